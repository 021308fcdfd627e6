//! Desk-scale training harness: synthetic data, Adam/SGD, F1 evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::model::{self, head_label, ModelConfig, TomfnModel};
use crate::tensor::DenseTensor;

/// One labelled example. `labels[k]` is true when emotion `k` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct Sample {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    /// `L × d_model` token matrix.
    pub text: DenseTensor,
    pub labels: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    visual: Vec<f64>,
    audio: Vec<f64>,
    text: DenseTensor,
    labels: Vec<u8>,
}

impl TryFrom<RawSample> for Sample {
    type Error = Error;

    fn try_from(raw: RawSample) -> Result<Self> {
        let labels = raw
            .labels
            .iter()
            .map(|&l| match l {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Data(format!("label {other} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        if raw.visual.iter().chain(&raw.audio).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        raw.text.matrix_dims()?;
        Ok(Sample { visual: raw.visual, audio: raw.audio, text: raw.text, labels })
    }
}

impl From<Sample> for RawSample {
    fn from(s: Sample) -> Self {
        RawSample { visual: s.visual, audio: s.audio, text: s.text, labels: s.labels.into_iter().map(u8::from).collect() }
    }
}

/// Reads one sample per non-empty line.
pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_jsonl(mut writer: impl Write, data: &[Sample]) -> Result<()> {
    for s in data {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n").map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

/// Parameters of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub seq_len: usize,
    pub noise_std: f64,
    pub interaction_strength: f64,
    pub seed: u64,
    /// Multiplier on the per-class templates; 0 leaves only the interaction term.
    pub template_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_samples: 200, seq_len: 20, noise_std: 0.05, interaction_strength: 1.0, seed: 0, template_scale: 1.0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 4 {
            return Err(Error::InvalidArgument(format!("n must be >= 4, got {}", self.n_samples)));
        }
        if self.seq_len == 0 {
            return Err(Error::InvalidArgument("L must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {}", self.noise_std)));
        }
        if !self.interaction_strength.is_finite() || !self.template_scale.is_finite() {
            return Err(Error::InvalidArgument("gamma and templates must be finite".into()));
        }
        Ok(())
    }
}

/// Parses `n=200,L=20,sigma=0.05,gamma=1,seed=3[,templates=0]`. Missing keys
/// keep their defaults.
impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{part}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::InvalidArgument(format!("{key}: {e}"));
            match key.trim() {
                "n" => spec.n_samples = value.parse().map_err(|e| bad(&e))?,
                "L" => spec.seq_len = value.parse().map_err(|e| bad(&e))?,
                "sigma" => spec.noise_std = value.parse().map_err(|e| bad(&e))?,
                "gamma" => spec.interaction_strength = value.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
                "templates" => spec.template_scale = value.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::InvalidArgument(format!("unknown synthetic key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Raw input widths of the three modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputDims {
    pub visual: usize,
    pub audio: usize,
    pub text: usize,
    pub heads: usize,
}

impl InputDims {
    pub fn of(config: &ModelConfig) -> Self {
        InputDims { visual: config.visual_dims[0], audio: config.audio_dims[0], text: config.text.d_model, heads: config.heads }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| x * (n as f64).sqrt() / norm).collect()
}

/// Builds a dataset whose labels cycle through the one-hot patterns.
///
/// Class `c` gets a fixed template per modality. On top of that, each sample
/// draws a random sign `s`; the audio signal carries `s`, the visual signal
/// carries `s` flipped by bit 0 of `c`, the text signal carries `s` flipped
/// by bit 1. Each sign alone is uniform noise, so with templates switched off
/// the class is recoverable only from products of two modalities.
pub fn gen_synthetic(spec: &SynthSpec, dims: InputDims) -> Result<Vec<Sample>> {
    spec.validate()?;
    let classes = dims.heads;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let widths = [dims.visual, dims.audio, dims.text];
    let templates: Vec<Vec<Vec<f64>>> =
        widths.iter().map(|&w| (0..classes).map(|_| unit_vector(&mut rng, w)).collect()).collect();
    let directions: Vec<Vec<f64>> = widths.iter().map(|&w| unit_vector(&mut rng, w)).collect();

    let signal = |m: usize, c: usize, sign: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..widths[m])
            .map(|j| {
                let noise: f64 = StandardNormal.sample(rng);
                spec.template_scale * templates[m][c][j] + spec.interaction_strength * sign * directions[m][j] + spec.noise_std * noise
            })
            .collect()
    };

    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let c = i % classes;
        let s_a = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let s_v = if c & 1 == 1 { -s_a } else { s_a };
        let s_t = if c & 2 == 2 { -s_a } else { s_a };
        let visual = signal(0, c, s_v, &mut rng);
        let audio = signal(1, c, s_a, &mut rng);
        let tokens: Vec<f64> = (0..spec.seq_len).flat_map(|_| signal(2, c, s_t, &mut rng)).collect();
        let text = DenseTensor::matrix(spec.seq_len, dims.text, tokens)?;
        let labels = (0..classes).map(|k| k == c).collect();
        out.push(Sample { visual, audio, text, labels });
    }
    Ok(out)
}

/// Copies `data` with every modality except `keep` zeroed.
pub fn ablate(data: &[Sample], keep: Modality) -> Vec<Sample> {
    data.iter()
        .map(|s| {
            let mut s = s.clone();
            if keep != Modality::Visual {
                s.visual.iter_mut().for_each(|v| *v = 0.0);
            }
            if keep != Modality::Audio {
                s.audio.iter_mut().for_each(|v| *v = 0.0);
            }
            if keep != Modality::Text {
                s.text = s.text.map(|_| 0.0);
            }
            s
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 200, lr: 1e-3, batch_size: 8, optimizer: Optimizer::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub loss_history: Vec<f64>,
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Minibatch training. Batches are drawn from a shuffle seeded by
/// `opts.seed`, so runs are reproducible.
pub fn train_model(model: &mut TomfnModel, data: &[Sample], opts: &TrainOptions) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(opts.lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", opts.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sizes: Vec<usize> = model.buffers().iter().map(|b| b.len()).collect();
    let mut adam = AdamState { m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let g = model::grad(model, &batch)?;
            epoch_loss += g.loss;
            batches += 1;
            step(model, &g, opts, &mut adam);
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(TrainReport { loss_history: history })
}

fn step(model: &mut TomfnModel, g: &model::Gradients, opts: &TrainOptions, adam: &mut AdamState) {
    let grads = g.buffers();
    adam.t += 1;
    for (k, (w, gr)) in model.buffers_mut().into_iter().zip(grads).enumerate() {
        match opts.optimizer {
            Optimizer::Sgd => {
                for (wi, gi) in w.iter_mut().zip(gr) {
                    *wi -= opts.lr * gi;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(adam.t);
                let c2 = 1.0 - beta2.powi(adam.t);
                for (i, (wi, gi)) in w.iter_mut().zip(gr).enumerate() {
                    let m = &mut adam.m[k][i];
                    let v = &mut adam.v[k][i];
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    *wi -= opts.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Per-emotion F1 and overall accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: BTreeMap<String, f64>,
    pub accuracy: f64,
}

/// `2PR/(P+R)`, zero when undefined.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores predicted flags against true flags, sample by sample.
pub fn score(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<Metrics> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Data(format!("cannot score {} predictions against {} labels", predicted.len(), truth.len())));
    }
    let heads = truth[0].len();
    let mut f1 = BTreeMap::new();
    let mut correct = 0;
    for k in 0..heads {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in predicted.iter().zip(truth) {
            if p.len() != heads || t.len() != heads {
                return Err(Error::Data("inconsistent label widths".into()));
            }
            match (p[k], t[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
            correct += usize::from(p[k] == t[k]);
        }
        f1.insert(head_label(k), f1_score(tp, fp, fn_));
    }
    Ok(Metrics { f1, accuracy: correct as f64 / (heads * truth.len()) as f64 })
}

/// Per-head argmax predictions.
pub fn predict(model: &TomfnModel, sample: &Sample) -> Result<Vec<bool>> {
    let p = model.forward(sample)?.probs;
    Ok(p.data().chunks_exact(2).map(|c| c[1] > c[0]).collect())
}

pub fn evaluate(model: &TomfnModel, data: &[Sample]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let predicted = data.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<Vec<bool>> = data.iter().map(|s| s.labels.clone()).collect();
    score(&predicted, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TtConfig;

    fn dims() -> InputDims {
        InputDims { visual: 6, audio: 5, text: 8, heads: 4 }
    }

    #[test]
    fn parses_spec_string() {
        let s: SynthSpec = "n=100,L=5,sigma=0.1,gamma=2,seed=9".parse().unwrap();
        assert_eq!((s.n_samples, s.seq_len, s.noise_std, s.interaction_strength, s.seed), (100, 5, 0.1, 2.0, 9));
        assert_eq!(s.template_scale, 1.0);
        assert!("n=3".parse::<SynthSpec>().is_err());
        assert!("sigma=-1".parse::<SynthSpec>().is_err());
        assert!("bogus=1".parse::<SynthSpec>().is_err());
        assert!("n".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn round_robin_labels() {
        let spec = SynthSpec { n_samples: 100, seq_len: 2, ..SynthSpec::default() };
        let data = gen_synthetic(&spec, dims()).unwrap();
        for k in 0..4 {
            assert_eq!(data.iter().filter(|s| s.labels[k]).count(), 25);
        }
        assert!(data.iter().all(|s| s.labels.iter().filter(|&&l| l).count() == 1));
        assert_eq!(data, gen_synthetic(&spec, dims()).unwrap());
    }

    #[test]
    fn noiseless_templates_are_linearly_separable() {
        // nearest-template probe on one modality: with no noise and no
        // interaction every sample equals its class template exactly
        let spec = SynthSpec { n_samples: 40, seq_len: 2, noise_std: 0.0, interaction_strength: 0.0, ..SynthSpec::default() };
        let data = gen_synthetic(&spec, dims()).unwrap();
        let protos: Vec<&Vec<f64>> = (0..4).map(|c| &data[c].visual).collect();
        // a linear probe w_c = template_c, b_c = -|template_c|^2/2 scores argmax correctly
        let correct = data
            .iter()
            .filter(|s| {
                let scores: Vec<f64> = protos
                    .iter()
                    .map(|p| p.iter().zip(&s.visual).map(|(a, b)| a * b).sum::<f64>() - 0.5 * p.iter().map(|a| a * a).sum::<f64>())
                    .collect();
                let best = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
                s.labels[best]
            })
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn jsonl_roundtrip() {
        let spec = SynthSpec { n_samples: 4, seq_len: 2, ..SynthSpec::default() };
        let data = gen_synthetic(&spec, dims()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let bad = br#"{"visual":[1],"audio":[1],"text":{"shape":[1,1],"data":[1]},"labels":[2]}"#;
        assert!(matches!(read_jsonl(&bad[..]), Err(Error::Data(_))));
    }

    #[test]
    fn f1_cases() {
        assert!((f1_score(2, 1, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_score(0, 0, 3), 0.0);
        assert_eq!(f1_score(5, 0, 0), 1.0);
        let truth = vec![vec![true, false, false, false], vec![false, true, false, false]];
        let m = score(&truth, &truth).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1["happy"], 1.0);
        assert_eq!(m.f1["sad"], 1.0);
        let none = vec![vec![false; 4]; 2];
        let m = score(&none, &truth).unwrap();
        assert_eq!(m.f1["happy"], 0.0);
        assert_eq!(m.accuracy, 0.75);
    }

    #[test]
    fn evaluate_ignores_order() {
        let cfg = ModelConfig::tiny();
        let model = TomfnModel::build(&cfg).unwrap();
        let spec = SynthSpec { n_samples: 12, seq_len: 3, ..SynthSpec::default() };
        let data = gen_synthetic(&spec, InputDims::of(&cfg)).unwrap();
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &rev).unwrap());
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let cfg = ModelConfig { tt: TtConfig { heads: true, ..TtConfig::default() }, ..ModelConfig::tiny() };
        let mut model = TomfnModel::build(&cfg).unwrap();
        let before = model.clone();
        let data = gen_synthetic(&SynthSpec { n_samples: 8, seq_len: 3, ..SynthSpec::default() }, InputDims::of(&cfg)).unwrap();
        let opts = TrainOptions { epochs: 3, lr: 0.0, ..TrainOptions::default() };
        train_model(&mut model, &data, &opts).unwrap();
        assert_eq!(model, before);
        assert!(train_model(&mut model, &[], &opts).is_err());
    }

    #[test]
    fn single_sample_overfits() {
        let cfg = ModelConfig::tiny();
        let mut model = TomfnModel::build(&cfg).unwrap();
        let data = gen_synthetic(&SynthSpec { n_samples: 4, seq_len: 3, ..SynthSpec::default() }, InputDims::of(&cfg)).unwrap();
        let one = &data[..1];
        let opts = TrainOptions { epochs: 500, lr: 1e-2, batch_size: 1, ..TrainOptions::default() };
        let report = train_model(&mut model, one, &opts).unwrap();
        assert!(*report.loss_history.last().unwrap() < 1e-3, "{:?}", report.loss_history.last());
    }
}
