//! Command implementations behind the `tomfn` binary.
//!
//! Each command returns a [`CliError`] carrying the process exit code:
//! 2 config, 3 data, 4 compile, 5 simulate.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tomfn::cost::{self, CostReport, CountSummary, PowerModel};
use tomfn::model::{MacScope, ModelConfig, TomfnModel};
use tomfn::photonic::{self, CompiledModel, HardwareSummary};
use tomfn::train::{self, InputDims, Metrics, Optimizer, Sample, SynthSpec, TrainOptions};
use tomfn::weight::WeightRepr;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_COMPILE: i32 = 4;
pub const EXIT_SIMULATE: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn with_code<E: std::fmt::Display>(code: i32, context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::new(code, format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "tomfn", version, about = "Tensorized optical multimodal fusion networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count parameters, MACs, MZIs and stages; estimate power and efficiency.
    Describe(DescribeArgs),
    /// Train on synthetic or JSONL data and write weights plus metrics.
    Train(TrainArgs),
    /// Evaluate saved weights on a dataset.
    Eval(EvalArgs),
    /// Compile weights into MZI-mesh netlists.
    Compile(CompileArgs),
    /// Simulate a compiled bundle, optionally with phase noise.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config JSON; the built-in default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override (falls back to TOMFN_SEED, then the config's seed).
    #[arg(long, env = "TOMFN_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    SubnetWeightsOnly,
    AllWeights,
    FullRuntime,
}

impl From<ScopeArg> for MacScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::SubnetWeightsOnly => MacScope::SubnetWeightsOnly,
            ScopeArg::AllWeights => MacScope::AllWeights,
            ScopeArg::FullRuntime => MacScope::FullRuntime,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Total system power in watts, replacing the component model.
    #[arg(long)]
    pub power_override: Option<f64>,
    /// Component power model JSON.
    #[arg(long)]
    pub power_model: Option<PathBuf>,
    /// Modulation frequency in Hz.
    #[arg(long, default_value_t = 1e10)]
    pub freq: f64,
    #[arg(long, value_enum, default_value_t = ScopeArg::SubnetWeightsOnly)]
    pub mac_scope: ScopeArg,
    #[arg(long, default_value_t = photonic::DEFAULT_MAX_CORE)]
    pub max_core: usize,
    /// Reference counts (`{"params":..,"mzis":..}` or a full report) to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Candidate counts for --compare; this model when omitted.
    #[arg(long, requires = "compare")]
    pub candidate: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[group(id = "source", required = true, multiple = false, args = ["synthetic", "data"])]
pub struct DataArgs {
    /// Synthetic data spec, e.g. `n=200,L=20,sigma=0.05,gamma=1,seed=0`.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// JSON Lines dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for weights.json and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompileArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Trained weights; freshly initialized weights when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = photonic::DEFAULT_MAX_CORE)]
    pub max_core: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Bundle written by `compile`.
    #[arg(long)]
    pub bundle: PathBuf,
    /// JSON Lines samples to run.
    #[arg(long, conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Synthetic samples to run instead of --input.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub phase_sigma: f64,
    /// Phase quantization bits; 0 disables quantization.
    #[arg(long, default_value_t = 0)]
    pub bits: u32,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    #[arg(long, env = "TOMFN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance recorded in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub weights_path: Option<String>,
    pub seed: u64,
    pub timestamp: String,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, config: Option<&Path>, weights: Option<&Path>, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config.map(|p| p.display().to_string()),
            weights_path: weights.map(|p| p.display().to_string()),
            seed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Loads a model config, naming the offending field on failure.
pub fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    let Some(path) = path else {
        return Ok(ModelConfig::default());
    };
    let text = fs::read_to_string(path).map_err(with_code(EXIT_CONFIG, &format!("cannot read config {}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: ModelConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::new(EXIT_CONFIG, format!("config error in `{field}`: {}", e.inner()))
    })?;
    cfg.validate().map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    Ok(cfg)
}

fn resolve_config(args: &ModelArgs) -> CliResult<ModelConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    manifest: RunManifest,
    weights: BTreeMap<String, WeightRepr>,
}

/// Reads a weights file: either `{"manifest":..,"weights":{..}}` or a bare
/// name → tensor map.
pub fn load_weights(cfg: &ModelConfig, path: &Path, code: i32) -> CliResult<TomfnModel> {
    let text = fs::read_to_string(path).map_err(with_code(code, &format!("cannot read weights {}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(with_code(code, "weights file is not valid JSON"))?;
    let map = match value.get_mut("weights") {
        Some(w) if w.is_object() => w.take(),
        _ => value,
    };
    let map: BTreeMap<String, WeightRepr> = serde_json::from_value(map).map_err(with_code(code, "malformed weights"))?;
    TomfnModel::from_weights_map(cfg, map).map_err(with_code(code, "weights do not match config"))
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, code: i32) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(with_code(code, "serialization failed"))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(with_code(code, &format!("cannot write {}", path.display())))
}

fn load_data(args: &DataArgs, cfg: &ModelConfig) -> CliResult<Vec<Sample>> {
    let data = if let Some(spec) = &args.synthetic {
        let spec: SynthSpec = spec.parse().map_err(with_code(EXIT_DATA, "bad --synthetic"))?;
        train::gen_synthetic(&spec, InputDims::of(cfg)).map_err(with_code(EXIT_DATA, "synthetic data"))?
    } else if let Some(path) = &args.data {
        read_jsonl_file(path, EXIT_DATA)?
    } else {
        return Err(CliError::new(EXIT_DATA, "one of --synthetic or --data is required"));
    };
    if data.is_empty() {
        return Err(CliError::new(EXIT_DATA, "dataset is empty"));
    }
    Ok(data)
}

fn read_jsonl_file(path: &Path, code: i32) -> CliResult<Vec<Sample>> {
    let file = fs::File::open(path).map_err(with_code(code, &format!("cannot open {}", path.display())))?;
    train::read_jsonl(BufReader::new(file)).map_err(with_code(code, &path.display().to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DescribeOutput {
    pub manifest: RunManifest,
    pub report: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonOutput>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ComparisonOutput {
    pub reference: CountSummary,
    pub candidate: CountSummary,
    pub result: cost::Comparison,
}

fn read_counts(path: &Path) -> CliResult<CountSummary> {
    let text = fs::read_to_string(path).map_err(with_code(EXIT_CONFIG, &format!("cannot read {}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: error in `{}`: {}", path.display(), e.path(), e.inner())))
}

/// Runs `describe`; returns the JSON output and the human-readable text.
pub fn describe(args: &DescribeArgs) -> CliResult<(DescribeOutput, String)> {
    let cfg = resolve_config(&args.model)?;
    let model = match &args.weights {
        Some(w) => load_weights(&cfg, w, EXIT_CONFIG)?,
        None => TomfnModel::build(&cfg).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?,
    };
    let compiled = photonic::compile_model(&model, args.max_core).map_err(with_code(EXIT_CONFIG, "cannot map model onto photonic cores"))?;
    let mut pm = match &args.power_model {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(with_code(EXIT_CONFIG, &format!("cannot read {}", p.display())))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| CliError::new(EXIT_CONFIG, format!("power model error in `{}`: {}", e.path(), e.inner())))?
        }
        None => PowerModel::default(),
    };
    if let Some(total) = args.power_override {
        pm.total_override = Some(total);
    }
    let report = cost::build_report(&model, &compiled, &pm, args.freq, args.mac_scope.into())
        .map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;

    let mut text = cost::render_report(&report);
    let comparison = match &args.compare {
        Some(ref_path) => {
            let reference = read_counts(ref_path)?;
            let candidate = match &args.candidate {
                Some(c) => read_counts(c)?,
                None => report.summary(),
            };
            let result = cost::compare(&reference, &candidate).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
            text.push('\n');
            text.push_str(&cost::render_table(&[(&reference).into(), (&candidate).into()]));
            text.push_str(&format!("parameters: {} fewer\n", result.param_ratio_text));
            text.push_str(&format!("MZIs:       {} fewer\n", result.mzi_ratio_text));
            Some(ComparisonOutput { reference, candidate, result })
        }
        None => None,
    };
    let manifest = RunManifest::new("describe", args.model.config.as_deref(), args.weights.as_deref(), cfg.seed);
    let out = DescribeOutput { manifest, report, comparison };
    if let Some(path) = &args.out {
        write_json(path, &out, EXIT_CONFIG)?;
    }
    Ok((out, text))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsOutput {
    pub manifest: RunManifest,
    pub f1: BTreeMap<String, f64>,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_history: Vec<f64>,
}

impl MetricsOutput {
    fn new(manifest: RunManifest, m: Metrics, loss_history: Vec<f64>) -> Self {
        MetricsOutput { manifest, f1: m.f1, accuracy: m.accuracy, loss_history }
    }
}

pub fn train(args: &TrainArgs) -> CliResult<MetricsOutput> {
    let cfg = resolve_config(&args.model)?;
    let data = load_data(&args.data, &cfg)?;
    let mut model = TomfnModel::build(&cfg).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?;
    let opts = TrainOptions {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => Optimizer::default(),
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: cfg.seed,
    };
    let report = train::train_model(&mut model, &data, &opts).map_err(with_code(EXIT_DATA, "training failed"))?;
    let metrics = train::evaluate(&model, &data).map_err(with_code(EXIT_DATA, "evaluation failed"))?;

    let weights_path = args.out.join("weights.json");
    let manifest = RunManifest::new("train", args.model.config.as_deref(), Some(&weights_path), cfg.seed);
    let weights = WeightsFile { manifest: manifest.clone(), weights: model.to_weights_map() };
    write_json(&weights_path, &weights, EXIT_DATA)?;
    let out = MetricsOutput::new(manifest, metrics, report.loss_history);
    write_json(&args.out.join("metrics.json"), &out, EXIT_DATA)?;
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> CliResult<MetricsOutput> {
    let cfg = resolve_config(&args.model)?;
    let model = load_weights(&cfg, &args.weights, EXIT_DATA)?;
    let data = load_data(&args.data, &cfg)?;
    let metrics = train::evaluate(&model, &data).map_err(with_code(EXIT_DATA, "evaluation failed"))?;
    let manifest = RunManifest::new("eval", args.model.config.as_deref(), Some(&args.weights), cfg.seed);
    let out = MetricsOutput::new(manifest, metrics, Vec::new());
    if let Some(path) = &args.out {
        write_json(path, &out, EXIT_DATA)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub mzis: usize,
    pub stages: usize,
    pub wdm_channels: usize,
    pub histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Bundle {
    pub manifest: RunManifest,
    pub summary: HardwareSummary,
    pub layers: Vec<LayerSummary>,
    pub compiled: CompiledModel,
}

pub fn compile(args: &CompileArgs) -> CliResult<Bundle> {
    let cfg = resolve_config(&args.model)?;
    let model = match &args.weights {
        Some(w) => load_weights(&cfg, w, EXIT_COMPILE)?,
        None => TomfnModel::build(&cfg).map_err(|e| CliError::new(EXIT_CONFIG, e.to_string()))?,
    };
    let compiled = photonic::compile_model(&model, args.max_core).map_err(with_code(EXIT_COMPILE, "compile failed"))?;
    let layers = compiled
        .layers()
        .iter()
        .map(|l| LayerSummary {
            name: l.name.clone(),
            mzis: photonic::mzi_count(&l.plan),
            stages: photonic::stage_depth(&l.plan),
            wdm_channels: l.plan.wdm_channels,
            histogram: l.plan.histogram(),
        })
        .collect();
    let bundle = Bundle {
        manifest: RunManifest::new("compile", args.model.config.as_deref(), args.weights.as_deref(), cfg.seed),
        summary: compiled.summary(),
        layers,
        compiled,
    };
    write_json(&args.out, &bundle, EXIT_COMPILE)?;
    Ok(bundle)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub manifest: RunManifest,
    pub samples: usize,
    pub trials: usize,
    pub phase_sigma: f64,
    pub bits: u32,
    /// Ideal per-head probabilities, one `heads × 2` list per sample.
    pub ideal: Vec<Vec<f64>>,
    /// Mean absolute probability error per trial, averaged over samples.
    pub trial_errors: Vec<f64>,
    pub mean_error: f64,
    pub max_error: f64,
    /// True when every perturbed output equals the ideal output exactly.
    pub bit_identical: bool,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<SimulationReport> {
    let text = fs::read_to_string(&args.bundle).map_err(with_code(EXIT_SIMULATE, &format!("cannot read bundle {}", args.bundle.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(with_code(EXIT_SIMULATE, "bundle is not valid JSON"))?;
    let compiled_value = value.get("compiled").cloned().unwrap_or(value);
    let compiled: CompiledModel = serde_json::from_value(compiled_value).map_err(with_code(EXIT_SIMULATE, "malformed bundle"))?;
    let cfg = compiled.config().clone();
    let samples = match (&args.input, &args.synthetic) {
        (Some(p), _) => read_jsonl_file(p, EXIT_SIMULATE)?,
        (None, Some(spec)) => {
            let spec: SynthSpec = spec.parse().map_err(with_code(EXIT_SIMULATE, "bad --synthetic"))?;
            train::gen_synthetic(&spec, InputDims::of(&cfg)).map_err(with_code(EXIT_SIMULATE, "synthetic data"))?
        }
        (None, None) => return Err(CliError::new(EXIT_SIMULATE, "one of --input or --synthetic is required")),
    };
    if samples.is_empty() {
        return Err(CliError::new(EXIT_SIMULATE, "no input samples"));
    }
    if args.trials == 0 {
        return Err(CliError::new(EXIT_SIMULATE, "--trials must be >= 1"));
    }
    let ideal = samples
        .iter()
        .map(|s| compiled.forward(s).map(|p| p.probs.into_data()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(with_code(EXIT_SIMULATE, "simulation failed"))?;

    let mut trial_errors = Vec::with_capacity(args.trials);
    let mut bit_identical = true;
    for t in 0..args.trials {
        let noisy = compiled
            .perturbed(args.phase_sigma, args.bits, args.seed.wrapping_add(t as u64))
            .map_err(with_code(EXIT_SIMULATE, "perturbation failed"))?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (s, clean) in samples.iter().zip(&ideal) {
            let p = noisy.forward(s).map_err(with_code(EXIT_SIMULATE, "simulation failed"))?.probs.into_data();
            bit_identical &= p == *clean;
            total += p.iter().zip(clean).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += p.len();
        }
        trial_errors.push(total / count as f64);
    }
    let mean_error = trial_errors.iter().sum::<f64>() / trial_errors.len() as f64;
    let max_error = trial_errors.iter().copied().fold(0.0, f64::max);
    let report = SimulationReport {
        manifest: RunManifest::new("simulate", None, Some(&args.bundle), args.seed),
        samples: samples.len(),
        trials: args.trials,
        phase_sigma: args.phase_sigma,
        bits: args.bits,
        ideal,
        trial_errors,
        mean_error,
        max_error,
        bit_identical,
    };
    if let Some(path) = &args.out {
        write_json(path, &report, EXIT_SIMULATE)?;
    }
    Ok(report)
}

/// Dispatches a parsed command line, printing human output to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Describe(a) => {
            let (out, text) = describe(&a)?;
            print!("{text}");
            if a.out.is_none() {
                println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
            }
        }
        Command::Train(a) => {
            let m = train(&a)?;
            println!("final loss {:.6}", m.loss_history.last().copied().unwrap_or(f64::NAN));
            print_metrics(&m);
            println!("wrote {}", a.out.display());
        }
        Command::Eval(a) => print_metrics(&eval(&a)?),
        Command::Compile(a) => {
            let b = compile(&a)?;
            println!("{} layers, {} MZIs, {} stages, {} WDM channels", b.layers.len(), b.summary.mzis, b.summary.stages, b.summary.wdm_channels);
            let hist: Vec<String> = b.summary.histogram.iter().map(|(k, v)| format!("{v} of {k}")).collect();
            println!("photonic cores: {}", hist.join(", "));
            println!("wrote {}", a.out.display());
        }
        Command::Simulate(a) => {
            let r = simulate(&a)?;
            println!(
                "{} samples, {} trials: mean |error| {:.3e}, max {:.3e}{}",
                r.samples,
                r.trials,
                r.mean_error,
                r.max_error,
                if r.bit_identical { " (bit-identical)" } else { "" }
            );
            if a.out.is_none() {
                println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
            }
        }
    }
    Ok(())
}

fn print_metrics(m: &MetricsOutput) {
    for (k, v) in &m.f1 {
        println!("F1 {k:<8} {v:.3}");
    }
    println!("accuracy    {:.3}", m.accuracy);
}
