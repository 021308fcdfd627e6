//! The full fusion network: visual and audio FC stacks, the attention text
//! encoder, low-rank fusion, and one two-way softmax head per emotion.
//!
//! Every weight has a stable name (`visual.0`, `text.head1.k`, `fusion.a.3`,
//! `head.2`, ...) and a canonical position given by [`ModelConfig::layout`].
//! Forward passes are written once against a projection callback so the
//! in-memory model and the compiled optical model share the same dataflow.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionHead, Pooling, Projection, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{self, LmfLayer, Modality};
use crate::tensor::{matvec_t_slice, softmax_slice, DenseTensor};
use crate::train::Sample;
use crate::weight::{TtOptions, Weight, WeightRepr};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_out: usize,
    pub seq_len: usize,
    pub pooling: Pooling,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { d_model: 300, heads: 2, d_head: 150, d_out: 64, seq_len: 20, pooling: Pooling::Mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub rank: usize,
    pub out_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { rank: 4, out_dim: 32 }
    }
}

/// Which blocks are tensor-train compressed, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtConfig {
    pub visual: bool,
    pub audio: bool,
    pub text: bool,
    pub fusion: bool,
    pub heads: bool,
    pub max_rank: usize,
    pub tol: f64,
    pub max_factor: usize,
}

impl Default for TtConfig {
    fn default() -> Self {
        TtConfig {
            visual: true,
            audio: true,
            text: true,
            fusion: true,
            heads: true,
            max_rank: 2,
            tol: 0.0,
            max_factor: crate::tt::DEFAULT_MAX_FACTOR,
        }
    }
}

impl TtConfig {
    pub fn dense() -> Self {
        TtConfig { visual: false, audio: false, text: false, fusion: false, heads: false, ..TtConfig::default() }
    }

    fn options(&self) -> TtOptions {
        TtOptions { max_rank: self.max_rank, tol: self.tol, max_factor: self.max_factor }
    }

    fn enabled(&self, block: Block) -> bool {
        match block {
            Block::Visual => self.visual,
            Block::Audio => self.audio,
            Block::Text => self.text,
            Block::Fusion => self.fusion,
            Block::Heads => self.heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual_dims: Vec<usize>,
    pub audio_dims: Vec<usize>,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    /// Number of binary emotion heads.
    pub heads: usize,
    pub tt: TtConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual_dims: vec![80, 32, 32, 32],
            audio_dims: vec![36, 32, 32, 32],
            text: TextConfig::default(),
            fusion: FusionConfig::default(),
            heads: 4,
            tt: TtConfig::default(),
            seed: 0,
        }
    }
}

/// Coarse grouping of weights, used for TT flags and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Visual,
    Audio,
    Text,
    Fusion,
    Heads,
}

/// Identifies one weight matrix of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightId {
    Visual(usize),
    Audio(usize),
    Text(Projection),
    Fusion(Modality, usize),
    Head(usize),
}

impl WeightId {
    pub fn name(&self) -> String {
        match *self {
            WeightId::Visual(l) => format!("visual.{l}"),
            WeightId::Audio(l) => format!("audio.{l}"),
            WeightId::Text(Projection::Query(h)) => format!("text.head{h}.q"),
            WeightId::Text(Projection::Key(h)) => format!("text.head{h}.k"),
            WeightId::Text(Projection::Value(h)) => format!("text.head{h}.v"),
            WeightId::Text(Projection::FeedForward) => "text.ff".to_string(),
            WeightId::Fusion(m, i) => format!("fusion.{}.{i}", m.tag()),
            WeightId::Head(k) => format!("head.{k}"),
        }
    }

    pub fn block(&self) -> Block {
        match self {
            WeightId::Visual(_) => Block::Visual,
            WeightId::Audio(_) => Block::Audio,
            WeightId::Text(_) => Block::Text,
            WeightId::Fusion(..) => Block::Fusion,
            WeightId::Head(_) => Block::Heads,
        }
    }
}

/// One entry of the canonical weight layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpec {
    pub id: WeightId,
    pub rows: usize,
    pub cols: usize,
}

impl WeightSpec {
    pub fn name(&self) -> String {
        self.id.name()
    }
}

/// Emotion names used in reports, in head order.
pub const EMOTIONS: [&str; 4] = ["happy", "sad", "angry", "neutral"];

pub fn head_label(k: usize) -> String {
    EMOTIONS.get(k).map_or_else(|| format!("head{k}"), |s| s.to_string())
}

/// Which weights a MAC count covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacScope {
    /// Visual, audio and text matrices, each applied once.
    SubnetWeightsOnly,
    /// Adds fusion factors and classification heads.
    AllWeights,
    /// Text matrices applied per token, plus attention-score MACs.
    FullRuntime,
}

impl ModelConfig {
    /// A miniature network with every dimension at most 8.
    pub fn tiny() -> Self {
        ModelConfig {
            visual_dims: vec![6, 8, 4],
            audio_dims: vec![5, 4, 4],
            text: TextConfig { d_model: 8, heads: 2, d_head: 4, d_out: 6, seq_len: 3, pooling: Pooling::Mean },
            fusion: FusionConfig { rank: 2, out_dim: 4 },
            heads: 4,
            tt: TtConfig::dense(),
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, dims) in [("visual_dims", &self.visual_dims), ("audio_dims", &self.audio_dims)] {
            if dims.len() < 2 {
                return Err(Error::config(field, "need an input width and at least one layer"));
            }
            if dims.contains(&0) {
                return Err(Error::config(field, "dimensions must be >= 1"));
            }
        }
        let t = &self.text;
        for (field, v) in [("text.d_model", t.d_model), ("text.heads", t.heads), ("text.d_head", t.d_head), ("text.d_out", t.d_out), ("text.seq_len", t.seq_len)] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if t.heads * t.d_head != t.d_model {
            return Err(Error::config(
                "text.d_head",
                format!("heads ({}) x d_head ({}) must equal d_model ({})", t.heads, t.d_head, t.d_model),
            ));
        }
        if self.fusion.rank == 0 {
            return Err(Error::config("fusion.rank", "must be >= 1"));
        }
        if self.fusion.out_dim == 0 {
            return Err(Error::config("fusion.out_dim", "must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be >= 1"));
        }
        if self.tt.max_rank == 0 {
            return Err(Error::config("tt.max_rank", "must be >= 1"));
        }
        if !(self.tt.tol >= 0.0) {
            return Err(Error::config("tt.tol", "must be >= 0"));
        }
        if self.tt.max_factor < 2 {
            return Err(Error::config("tt.max_factor", "must be >= 2"));
        }
        Ok(())
    }

    pub fn visual_out(&self) -> usize {
        *self.visual_dims.last().unwrap()
    }

    pub fn audio_out(&self) -> usize {
        *self.audio_dims.last().unwrap()
    }

    fn visual_layers(&self) -> usize {
        self.visual_dims.len() - 1
    }

    fn audio_layers(&self) -> usize {
        self.audio_dims.len() - 1
    }

    pub fn fusion_inputs(&self) -> [usize; 3] {
        [self.visual_out(), self.audio_out(), self.text.d_out]
    }

    /// Every weight in canonical order with its `out × in` shape.
    pub fn layout(&self) -> Vec<WeightSpec> {
        let mut out = Vec::new();
        for (l, w) in self.visual_dims.windows(2).enumerate() {
            out.push(WeightSpec { id: WeightId::Visual(l), rows: w[1], cols: w[0] });
        }
        for (l, w) in self.audio_dims.windows(2).enumerate() {
            out.push(WeightSpec { id: WeightId::Audio(l), rows: w[1], cols: w[0] });
        }
        let t = &self.text;
        for h in 0..t.heads {
            for p in [Projection::Query(h), Projection::Key(h), Projection::Value(h)] {
                out.push(WeightSpec { id: WeightId::Text(p), rows: t.d_head, cols: t.d_model });
            }
        }
        out.push(WeightSpec { id: WeightId::Text(Projection::FeedForward), rows: t.d_out, cols: t.d_model });
        let dims = self.fusion_inputs();
        for m in Modality::ALL {
            for i in 0..self.fusion.rank {
                out.push(WeightSpec { id: WeightId::Fusion(m, i), rows: self.fusion.out_dim, cols: dims[m.index()] + 1 });
            }
        }
        for k in 0..self.heads {
            out.push(WeightSpec { id: WeightId::Head(k), rows: 2, cols: self.fusion.out_dim });
        }
        out
    }

    /// Position of `id` in [`ModelConfig::layout`].
    pub fn position(&self, id: WeightId) -> usize {
        let nv = self.visual_layers();
        let na = self.audio_layers();
        let text0 = nv + na;
        let fusion0 = text0 + 3 * self.text.heads + 1;
        let heads0 = fusion0 + 3 * self.fusion.rank;
        match id {
            WeightId::Visual(l) => l,
            WeightId::Audio(l) => nv + l,
            WeightId::Text(Projection::Query(h)) => text0 + 3 * h,
            WeightId::Text(Projection::Key(h)) => text0 + 3 * h + 1,
            WeightId::Text(Projection::Value(h)) => text0 + 3 * h + 2,
            WeightId::Text(Projection::FeedForward) => text0 + 3 * self.text.heads,
            WeightId::Fusion(m, i) => fusion0 + m.index() * self.fusion.rank + i,
            WeightId::Head(k) => heads0 + k,
        }
    }

    /// Multiply-accumulate count for one inference.
    pub fn mac_count(&self, scope: MacScope) -> u64 {
        let layout = self.layout();
        let macs = |pred: &dyn Fn(&WeightSpec) -> bool| -> u64 { layout.iter().filter(|s| pred(s)).map(|s| (s.rows * s.cols) as u64).sum() };
        let fc = macs(&|s| matches!(s.id.block(), Block::Visual | Block::Audio));
        let text = macs(&|s| s.id.block() == Block::Text);
        let rest = macs(&|s| matches!(s.id.block(), Block::Fusion | Block::Heads));
        match scope {
            MacScope::SubnetWeightsOnly => fc + text,
            MacScope::AllWeights => fc + text + rest,
            MacScope::FullRuntime => {
                let l = self.text.seq_len as u64;
                let scores = 2 * l * l * self.text.d_head as u64 * self.text.heads as u64;
                fc + text * l + scores + rest
            }
        }
    }
}

/// Logits and per-head probabilities, both `heads × 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: DenseTensor,
    pub probs: DenseTensor,
}

/// Parameter counts per weight and in total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    pub per_block: BTreeMap<String, usize>,
    pub total: usize,
    pub dense_equivalent_total: usize,
    /// Visual, audio and text weights only.
    pub subnet_total: usize,
    pub subnet_dense_equivalent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TomfnModel {
    config: ModelConfig,
    visual: Vec<Weight>,
    audio: Vec<Weight>,
    text: TextEncoder,
    fusion: LmfLayer,
    class_heads: Vec<Weight>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseTensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    DenseTensor::matrix(rows, cols, data).expect("finite init")
}

impl TomfnModel {
    /// Builds a model with Glorot-uniform weights drawn from `config.seed`.
    /// Blocks flagged in `config.tt` are TT-SVD compressed after initialization.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let opts = config.tt.options();
        let mut weights = Vec::new();
        for spec in config.layout() {
            let dense = glorot(&mut rng, spec.rows, spec.cols);
            let w = if config.tt.enabled(spec.id.block()) {
                Weight::tt_from_dense(&dense, &opts)?
            } else {
                Weight::Dense(dense)
            };
            weights.push(w);
        }
        TomfnModel::assemble(config, weights)
    }

    /// Assembles a model from weights in canonical layout order.
    pub fn assemble(config: &ModelConfig, weights: Vec<Weight>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if weights.len() != layout.len() {
            return Err(Error::shape(format!("expected {} weights, got {}", layout.len(), weights.len())));
        }
        for (spec, w) in layout.iter().zip(&weights) {
            if (w.rows(), w.cols()) != (spec.rows, spec.cols) {
                return Err(Error::shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    spec.name(),
                    w.rows(),
                    w.cols(),
                    spec.rows,
                    spec.cols
                )));
            }
        }
        let mut it = weights.into_iter();
        let visual: Vec<Weight> = it.by_ref().take(config.visual_layers()).collect();
        let audio: Vec<Weight> = it.by_ref().take(config.audio_layers()).collect();
        let mut heads = Vec::new();
        for _ in 0..config.text.heads {
            let (q, k, v) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            heads.push(AttentionHead::new(q, k, v)?);
        }
        let text = TextEncoder::new(heads, it.next().unwrap(), config.text.pooling)?;
        let factors = Modality::ALL.map(|_| it.by_ref().take(config.fusion.rank).collect::<Vec<_>>());
        let fusion = LmfLayer::new(config.fusion.out_dim, config.fusion_inputs(), factors)?;
        let class_heads: Vec<Weight> = it.collect();
        Ok(TomfnModel { config: config.clone(), visual, audio, text, fusion, class_heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn fusion_layer(&self) -> &LmfLayer {
        &self.fusion
    }

    pub fn weight(&self, id: WeightId) -> &Weight {
        match id {
            WeightId::Visual(l) => &self.visual[l],
            WeightId::Audio(l) => &self.audio[l],
            WeightId::Text(Projection::Query(h)) => &self.text.heads()[h].q,
            WeightId::Text(Projection::Key(h)) => &self.text.heads()[h].k,
            WeightId::Text(Projection::Value(h)) => &self.text.heads()[h].v,
            WeightId::Text(Projection::FeedForward) => self.text.ff(),
            WeightId::Fusion(m, i) => self.fusion.factor(m, i),
            WeightId::Head(k) => &self.class_heads[k],
        }
    }

    pub fn weight_mut(&mut self, id: WeightId) -> &mut Weight {
        match id {
            WeightId::Visual(l) => &mut self.visual[l],
            WeightId::Audio(l) => &mut self.audio[l],
            WeightId::Text(Projection::Query(h)) => &mut self.text.heads_mut()[h].q,
            WeightId::Text(Projection::Key(h)) => &mut self.text.heads_mut()[h].k,
            WeightId::Text(Projection::Value(h)) => &mut self.text.heads_mut()[h].v,
            WeightId::Text(Projection::FeedForward) => self.text.ff_mut(),
            WeightId::Fusion(m, i) => &mut self.fusion.factors_mut()[m.index()][i],
            WeightId::Head(k) => &mut self.class_heads[k],
        }
    }

    /// Weights in canonical order.
    pub fn weights(&self) -> Vec<(WeightSpec, &Weight)> {
        self.config.layout().into_iter().map(|s| {
            let w = self.weight(s.id);
            (s, w)
        }).collect()
    }

    pub fn forward(&self, sample: &Sample) -> Result<Prediction> {
        forward_with(&self.config, sample, |id, x| self.weight(id).apply(x))
    }

    pub fn param_count(&self) -> ParamCount {
        let mut per_block = BTreeMap::new();
        let (mut total, mut dense, mut subnet, mut subnet_dense) = (0, 0, 0, 0);
        for (spec, w) in self.weights() {
            let (p, d) = (w.param_count(), w.dense_equivalent());
            per_block.insert(spec.name(), p);
            total += p;
            dense += d;
            if matches!(spec.id.block(), Block::Visual | Block::Audio | Block::Text) {
                subnet += p;
                subnet_dense += d;
            }
        }
        ParamCount { per_block, total, dense_equivalent_total: dense, subnet_total: subnet, subnet_dense_equivalent: subnet_dense }
    }

    pub fn mac_count(&self, scope: MacScope) -> u64 {
        self.config.mac_count(scope)
    }

    /// Weights keyed by name, as written to a weights file.
    pub fn to_weights_map(&self) -> BTreeMap<String, WeightRepr> {
        self.weights().into_iter().map(|(s, w)| (s.name(), WeightRepr::from(w))).collect()
    }

    pub fn from_weights_map(config: &ModelConfig, mut map: BTreeMap<String, WeightRepr>) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::new();
        for spec in config.layout() {
            let name = spec.name();
            let repr = map.remove(&name).ok_or_else(|| Error::shape(format!("weights file has no `{name}`")))?;
            let w = repr.into_weight(spec.rows, spec.cols).map_err(|e| Error::shape(format!("`{name}`: {e}")))?;
            weights.push(w);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::shape(format!("weights file has unexpected entry `{extra}`")));
        }
        TomfnModel::assemble(config, weights)
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for w in self.visual.iter_mut().chain(self.audio.iter_mut()) {
            out.extend(w.buffers_mut());
        }
        let (heads, ff) = self.text.parts_mut();
        for h in heads {
            out.extend(h.q.buffers_mut());
            out.extend(h.k.buffers_mut());
            out.extend(h.v.buffers_mut());
        }
        out.extend(ff.buffers_mut());
        for list in self.fusion.factors_mut().iter_mut() {
            for w in list {
                out.extend(w.buffers_mut());
            }
        }
        for w in &mut self.class_heads {
            out.extend(w.buffers_mut());
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.weights().into_iter().flat_map(|(_, w)| w.buffers()).collect()
    }
}

fn check_sample(config: &ModelConfig, sample: &Sample) -> Result<()> {
    if sample.visual.len() != config.visual_dims[0] {
        return Err(Error::shape(format!("visual input has length {}, expected {}", sample.visual.len(), config.visual_dims[0])));
    }
    if sample.audio.len() != config.audio_dims[0] {
        return Err(Error::shape(format!("audio input has length {}, expected {}", sample.audio.len(), config.audio_dims[0])));
    }
    let (_, width) = sample.text.matrix_dims()?;
    if width != config.text.d_model {
        return Err(Error::shape(format!("text tokens have width {width}, expected {}", config.text.d_model)));
    }
    Ok(())
}

fn run_stack<F>(x: &[f64], layers: usize, id: impl Fn(usize) -> WeightId, project: &mut F) -> Result<Vec<f64>>
where
    F: FnMut(WeightId, &[f64]) -> Result<Vec<f64>>,
{
    let mut z = x.to_vec();
    for l in 0..layers {
        z = project(id(l), &z)?;
        if l + 1 < layers {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    Ok(z)
}

/// Network forward pass against an arbitrary projection kernel:
/// `project(id, x)` must return `W_id · x`.
pub fn forward_with<F>(config: &ModelConfig, sample: &Sample, mut project: F) -> Result<Prediction>
where
    F: FnMut(WeightId, &[f64]) -> Result<Vec<f64>>,
{
    check_sample(config, sample)?;
    let z_v = run_stack(&sample.visual, config.visual_layers(), WeightId::Visual, &mut project)?;
    let z_a = run_stack(&sample.audio, config.audio_layers(), WeightId::Audio, &mut project)?;
    let head_dims = vec![config.text.d_head; config.text.heads];
    let z_t = attention::encode_with(&head_dims, config.text.d_out, config.text.pooling, &sample.text, |p, x| project(WeightId::Text(p), x))?;
    let h = fusion::lmf_fuse_with(config.fusion.rank, config.fusion.out_dim, [&z_v, &z_a, &z_t], |m, i, z| project(WeightId::Fusion(m, i), z))?;
    let mut logits = Vec::with_capacity(2 * config.heads);
    let mut probs = Vec::with_capacity(2 * config.heads);
    for k in 0..config.heads {
        let l = project(WeightId::Head(k), &h)?;
        probs.extend(softmax_slice(&l));
        logits.extend(l);
    }
    Ok(Prediction { logits: DenseTensor::matrix(config.heads, 2, logits)?, probs: DenseTensor::matrix(config.heads, 2, probs)? })
}

/// Mean binary cross-entropy over heads and samples.
pub fn loss(model: &TomfnModel, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let heads = model.config.heads;
    let mut total = 0.0;
    for s in batch {
        check_labels(heads, s)?;
        let p = model.forward(s)?.probs;
        for k in 0..heads {
            total -= p.data()[2 * k + usize::from(s.labels[k])].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(total / (batch.len() * heads) as f64)
}

fn check_labels(heads: usize, s: &Sample) -> Result<()> {
    if s.labels.len() != heads {
        return Err(Error::shape(format!("sample has {} labels, model has {heads} heads", s.labels.len())));
    }
    Ok(())
}

/// Gradients for every stored parameter, in [`TomfnModel::buffers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// One entry per weight in layout order; one tensor per stored buffer.
    pub per_weight: Vec<(String, Vec<DenseTensor>)>,
}

impl Gradients {
    pub fn buffers(&self) -> Vec<&[f64]> {
        self.per_weight.iter().flat_map(|(_, g)| g.iter().map(DenseTensor::data)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.buffers().iter().flat_map(|b| b.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

struct StackCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    outputs: Vec<Vec<f64>>,
}

fn stack_forward(dense: &[DenseTensor], x: &[f64]) -> StackCache {
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut z = x.to_vec();
    for (l, w) in dense.iter().enumerate() {
        let (m, n) = (w.dims()[0], w.dims()[1]);
        let a = crate::tensor::matvec_slice(w.data(), m, n, &z);
        inputs.push(z);
        z = if l + 1 < dense.len() { a.iter().map(|v| v.max(0.0)).collect() } else { a.clone() };
        outputs.push(a);
    }
    StackCache { inputs, outputs }
}

fn add_outer(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (row, &gi) in acc.chunks_exact_mut(n).zip(g) {
        if gi == 0.0 {
            continue;
        }
        for (a, &xj) in row.iter_mut().zip(x) {
            *a += gi * xj;
        }
    }
}

fn stack_backward(dense: &[DenseTensor], cache: &StackCache, mut g: Vec<f64>, acc: &mut [Vec<f64>]) {
    for l in (0..dense.len()).rev() {
        add_outer(&mut acc[l], &g, &cache.inputs[l]);
        if l == 0 {
            break;
        }
        let (m, n) = (dense[l].dims()[0], dense[l].dims()[1]);
        let gx = matvec_t_slice(dense[l].data(), m, n, &g);
        g = gx.iter().zip(&cache.outputs[l - 1]).map(|(gi, a)| if *a > 0.0 { *gi } else { 0.0 }).collect();
    }
}

/// Loss and reverse-mode gradients of the mean cross-entropy over `batch`.
///
/// Per-sample contributions are summed in batch order, so the result is
/// deterministic.
pub fn grad(model: &TomfnModel, batch: &[Sample]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let cfg = &model.config;
    let layout = cfg.layout();
    let dense: Vec<DenseTensor> = layout.iter().map(|s| model.weight(s.id).to_dense()).collect();
    let mut acc: Vec<Vec<f64>> = layout.iter().map(|s| vec![0.0; s.rows * s.cols]).collect();
    let pos = |id: WeightId| cfg.position(id);
    let nv = cfg.visual_layers();
    let na = cfg.audio_layers();
    let (heads, rank, dh_fuse) = (cfg.heads, cfg.fusion.rank, cfg.fusion.out_dim);
    let (n_heads, d_head, d_model, d_out) = (cfg.text.heads, cfg.text.d_head, cfg.text.d_model, cfg.text.d_out);
    let scale = 1.0 / (batch.len() * heads) as f64;
    let mut total_loss = 0.0;

    for s in batch {
        check_sample(cfg, s)?;
        check_labels(heads, s)?;
        let l = s.text.dims()[0];

        // forward with caches
        let vis = stack_forward(&dense[0..nv], &s.visual);
        let aud = stack_forward(&dense[nv..nv + na], &s.audio);

        let x = s.text.data();
        let mut qkv = Vec::with_capacity(n_heads);
        let mut concat = vec![0.0; l * d_model];
        for h in 0..n_heads {
            let proj = |p: Projection| -> Vec<f64> {
                let w = &dense[pos(WeightId::Text(p))];
                (0..l).flat_map(|t| crate::tensor::matvec_slice(w.data(), d_head, d_model, &x[t * d_model..(t + 1) * d_model])).collect()
            };
            let (q, k, v) = (proj(Projection::Query(h)), proj(Projection::Key(h)), proj(Projection::Value(h)));
            let (a, probs) = attention::attend(&q, &k, &v, l, d_head);
            for t in 0..l {
                concat[t * d_model + h * d_head..t * d_model + (h + 1) * d_head].copy_from_slice(&a[t * d_head..(t + 1) * d_head]);
            }
            qkv.push((q, k, v, probs));
        }
        let ff = &dense[pos(WeightId::Text(Projection::FeedForward))];
        let f_pre: Vec<f64> = (0..l).flat_map(|t| crate::tensor::matvec_slice(ff.data(), d_out, d_model, &concat[t * d_model..(t + 1) * d_model])).collect();
        let f_act: Vec<f64> = f_pre.iter().map(|v| v.max(0.0)).collect();
        let z_t = attention::pool(&f_act, l, d_out, cfg.text.pooling);

        let z = [vis.outputs.last().unwrap().clone(), aud.outputs.last().unwrap().clone(), z_t];
        let aug: Vec<Vec<f64>> = z.iter().map(|v| fusion::append_one(v)).collect();
        let mut proj = vec![vec![Vec::new(); rank]; 3];
        let mut hvec = vec![0.0; dh_fuse];
        for i in 0..rank {
            for m in Modality::ALL {
                let w = &dense[pos(WeightId::Fusion(m, i))];
                proj[m.index()][i] = crate::tensor::matvec_slice(w.data(), dh_fuse, aug[m.index()].len(), &aug[m.index()]);
            }
            for j in 0..dh_fuse {
                hvec[j] += proj[0][i][j] * proj[1][i][j] * proj[2][i][j];
            }
        }

        // heads and loss
        let mut dh = vec![0.0; dh_fuse];
        for k in 0..heads {
            let idx = pos(WeightId::Head(k));
            let logits = crate::tensor::matvec_slice(dense[idx].data(), 2, dh_fuse, &hvec);
            let p = softmax_slice(&logits);
            let y = usize::from(s.labels[k]);
            total_loss -= p[y].max(f64::MIN_POSITIVE).ln();
            let dlogit: Vec<f64> = (0..2).map(|c| scale * (p[c] - if c == y { 1.0 } else { 0.0 })).collect();
            add_outer(&mut acc[idx], &dlogit, &hvec);
            for (d, g) in dh.iter_mut().zip(matvec_t_slice(dense[idx].data(), 2, dh_fuse, &dlogit)) {
                *d += g;
            }
        }

        // fusion
        let mut dz: Vec<Vec<f64>> = aug.iter().map(|a| vec![0.0; a.len()]).collect();
        for i in 0..rank {
            for m in Modality::ALL {
                let (o1, o2) = match m {
                    Modality::Visual => (1, 2),
                    Modality::Audio => (0, 2),
                    Modality::Text => (0, 1),
                };
                let dp: Vec<f64> = (0..dh_fuse).map(|j| dh[j] * proj[o1][i][j] * proj[o2][i][j]).collect();
                let idx = pos(WeightId::Fusion(m, i));
                add_outer(&mut acc[idx], &dp, &aug[m.index()]);
                let cols = aug[m.index()].len();
                for (d, g) in dz[m.index()].iter_mut().zip(matvec_t_slice(dense[idx].data(), dh_fuse, cols, &dp)) {
                    *d += g;
                }
            }
        }

        // visual / audio stacks
        let mut dz_v = dz[0].clone();
        dz_v.pop();
        stack_backward(&dense[0..nv], &vis, dz_v, &mut acc[0..nv]);
        let mut dz_a = dz[1].clone();
        dz_a.pop();
        stack_backward(&dense[nv..nv + na], &aud, dz_a, &mut acc[nv..nv + na]);

        // text encoder
        let dz_t = &dz[2][..d_out];
        let mut df = vec![0.0; l * d_out];
        match cfg.text.pooling {
            Pooling::Mean => {
                for t in 0..l {
                    for c in 0..d_out {
                        df[t * d_out + c] = dz_t[c] / l as f64;
                    }
                }
            }
            Pooling::Last => df[(l - 1) * d_out..].copy_from_slice(dz_t),
        }
        for (g, &pre) in df.iter_mut().zip(&f_pre) {
            if pre <= 0.0 {
                *g = 0.0;
            }
        }
        let ff_idx = pos(WeightId::Text(Projection::FeedForward));
        let mut dconcat = vec![0.0; l * d_model];
        for t in 0..l {
            let g = &df[t * d_out..(t + 1) * d_out];
            add_outer(&mut acc[ff_idx], g, &concat[t * d_model..(t + 1) * d_model]);
            dconcat[t * d_model..(t + 1) * d_model].copy_from_slice(&matvec_t_slice(ff.data(), d_out, d_model, g));
        }
        for (h, (q, k, v, probs)) in qkv.iter().enumerate() {
            let da: Vec<f64> = (0..l).flat_map(|t| dconcat[t * d_model + h * d_head..t * d_model + (h + 1) * d_head].iter().copied()).collect();
            let (dq, dk, dv) = attention::attend_backward(q, k, v, probs, &da, l, d_head);
            for (p, g) in [(Projection::Query(h), dq), (Projection::Key(h), dk), (Projection::Value(h), dv)] {
                let idx = pos(WeightId::Text(p));
                for t in 0..l {
                    add_outer(&mut acc[idx], &g[t * d_head..(t + 1) * d_head], &x[t * d_model..(t + 1) * d_model]);
                }
            }
        }
    }

    let mut per_weight = Vec::with_capacity(layout.len());
    for (spec, dw) in layout.iter().zip(acc) {
        let dw = DenseTensor::matrix(spec.rows, spec.cols, dw)?;
        per_weight.push((spec.name(), model.weight(spec.id).param_gradients(&dw)?));
    }
    Ok(Gradients { loss: total_loss * scale, per_weight })
}
