//! MZI-mesh compilation and optical simulation.
//!
//! Each MZI acts on a pair of adjacent waveguides `(row, row+1)` with the
//! real transfer matrix
//!
//! ```text
//! T(θ, φ) = [[cos θ, -sin θ], [sin θ, cos θ]] · diag(cos φ, 1)
//! ```
//!
//! so `φ ∈ {0, π}` is a sign flip on the upper input. Columns follow the
//! rectangular layout: column `c` holds MZIs on pairs whose top row has the
//! parity of `c`, and an `N×N` orthogonal mesh has `N` columns.
//!
//! A matrix is realized as `W = scale · U·diag(σ/scale)·Vᵀ` with `U` and `Vᵀ`
//! as meshes and the diagonal as attenuators whose amplitudes never exceed 1.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, orthogonality_residual};
use crate::model::{self, ModelConfig, Prediction, TomfnModel, WeightId};
use crate::tensor::DenseTensor;
use crate::train::Sample;
use crate::tt::{self, TtMatrix};
use crate::weight::Weight;

/// Default cap on sub-matrix size (rows and columns) for one photonic core.
pub const DEFAULT_MAX_CORE: usize = 8;

/// One MZI. Its column in the mesh is given by its position in
/// [`MeshNetlist::columns`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MziSetting {
    pub row: usize,
    pub theta: f64,
    pub phi: f64,
}

impl MziSetting {
    fn apply(&self, x: &mut [f64]) {
        let (s, c) = self.theta.sin_cos();
        let a = x[self.row] * self.phi.cos();
        let b = x[self.row + 1];
        x[self.row] = c * a - s * b;
        x[self.row + 1] = s * a + c * b;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetlist")]
pub struct MeshNetlist {
    size: usize,
    columns: Vec<Vec<MziSetting>>,
    /// Per-row input phases, only present for meshes without MZIs.
    #[serde(skip_serializing_if = "Option::is_none")]
    phase_screen: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetlist {
    size: usize,
    columns: Vec<Vec<MziSetting>>,
    #[serde(default)]
    phase_screen: Option<Vec<f64>>,
}

impl TryFrom<RawNetlist> for MeshNetlist {
    type Error = Error;

    fn try_from(raw: RawNetlist) -> Result<Self> {
        MeshNetlist::new(raw.size, raw.columns, raw.phase_screen)
    }
}

impl MeshNetlist {
    pub fn new(size: usize, columns: Vec<Vec<MziSetting>>, phase_screen: Option<Vec<f64>>) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("mesh size must be >= 1".into()));
        }
        for (c, col) in columns.iter().enumerate() {
            let mut used = vec![false; size];
            for m in col {
                if m.row + 1 >= size {
                    return Err(Error::InvalidArgument(format!("column {c}: MZI at row {} exceeds size {size}", m.row)));
                }
                if used[m.row] || used[m.row + 1] {
                    return Err(Error::InvalidArgument(format!("column {c}: MZIs overlap at row {}", m.row)));
                }
                if !m.theta.is_finite() || !m.phi.is_finite() {
                    return Err(Error::InvalidArgument(format!("column {c}: non-finite phase at row {}", m.row)));
                }
                used[m.row] = true;
                used[m.row + 1] = true;
            }
        }
        if let Some(p) = &phase_screen {
            if p.len() != size || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("phase screen must hold {size} finite values")));
            }
        }
        Ok(MeshNetlist { size, columns, phase_screen })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn columns(&self) -> &[Vec<MziSetting>] {
        &self.columns
    }

    pub fn phase_screen(&self) -> Option<&[f64]> {
        self.phase_screen.as_deref()
    }

    /// Number of MZI columns.
    pub fn depth(&self) -> usize {
        self.columns.len()
    }

    pub fn mzi_count(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    /// `(column, setting)` pairs in application order.
    pub fn settings(&self) -> impl Iterator<Item = (usize, &MziSetting)> {
        self.columns.iter().enumerate().flat_map(|(c, col)| col.iter().map(move |m| (c, m)))
    }

    /// The realized `N×N` matrix.
    pub fn matrix(&self) -> DenseTensor {
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = mesh_apply_slice(self, &mut e);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
        DenseTensor::matrix(n, n, data).expect("finite mesh")
    }
}

fn mesh_apply_slice<'a>(mesh: &MeshNetlist, x: &'a mut [f64]) -> &'a [f64] {
    if let Some(p) = &mesh.phase_screen {
        for (v, phi) in x.iter_mut().zip(p) {
            *v *= phi.cos();
        }
    }
    for col in &mesh.columns {
        for m in col {
            m.apply(x);
        }
    }
    x
}

/// Propagates `x` through the mesh, column by column.
pub fn mesh_apply(mesh: &MeshNetlist, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mesh.size {
        return Err(Error::shape(format!("mesh has {} ports but input has length {}", mesh.size, x.len())));
    }
    let mut y = x.to_vec();
    mesh_apply_slice(mesh, &mut y);
    Ok(y)
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Decomposes a real orthogonal matrix into a rectangular MZI mesh with
/// `N(N-1)/2` MZIs and `N` columns.
pub fn givens_decompose(u: &DenseTensor) -> Result<MeshNetlist> {
    let (n, cols) = u.matrix_dims()?;
    if n != cols {
        return Err(Error::shape(format!("givens_decompose needs a square matrix, got {}", u.shape())));
    }
    let residual = orthogonality_residual(u)?;
    if !(residual < 1e-8) {
        return Err(Error::NotOrthogonal { residual });
    }
    let mut a = u.data().to_vec();
    let at = |a: &[f64], i: usize, j: usize| a[i * n + j];

    // right rotations act on columns (b, b+1), left rotations on rows (r, r+1)
    let mut right: Vec<(usize, f64)> = Vec::new();
    let mut left: Vec<(usize, f64)> = Vec::new();
    for i in 0..n.saturating_sub(1) {
        if i % 2 == 0 {
            for j in 0..=i {
                let (row, b) = (n - 1 - j, i - j);
                let theta = (-at(&a, row, b)).atan2(at(&a, row, b + 1));
                let (s, c) = theta.sin_cos();
                for r in 0..n {
                    let (x, y) = (a[r * n + b], a[r * n + b + 1]);
                    a[r * n + b] = c * x + s * y;
                    a[r * n + b + 1] = -s * x + c * y;
                }
                a[row * n + b] = 0.0;
                right.push((b, theta));
            }
        } else {
            for j in 0..=i {
                let (row, b) = (n - 1 - i + j, j);
                let theta = (-at(&a, row, b)).atan2(at(&a, row - 1, b));
                let (s, c) = theta.sin_cos();
                for k in 0..n {
                    let (x, y) = (a[(row - 1) * n + k], a[row * n + k]);
                    a[(row - 1) * n + k] = c * x - s * y;
                    a[row * n + k] = s * x + c * y;
                }
                a[row * n + b] = 0.0;
                left.push((row - 1, theta));
            }
        }
    }
    let d: Vec<f64> = (0..n).map(|i| if at(&a, i, i) < 0.0 { -1.0 } else { 1.0 }).collect();

    // U = L_1⁻¹..L_p⁻¹ · D · R_q⁻¹..R_1⁻¹. Push D to the input side, where
    // D·R(φ) = R(d_r d_{r+1} φ)·D on the pair, then fold it into the first
    // MZI on each row.
    let mut ops: Vec<(usize, f64)> = right.iter().map(|&(r, th)| (r, -d[r] * d[r + 1] * th)).collect();
    ops.extend(left.iter().rev().map(|&(r, th)| (r, -th)));

    let mut absorbed = vec![false; n];
    let mut next_free = vec![0usize; n];
    let mut columns: Vec<Vec<MziSetting>> = vec![Vec::new(); n];
    for (r, theta) in ops {
        let mut sign = |row: usize| {
            if absorbed[row] {
                1.0
            } else {
                absorbed[row] = true;
                d[row]
            }
        };
        let (top, bottom) = (sign(r), sign(r + 1));
        // R(θ)·diag(a, b) = R(θ + π[b<0])·diag(ab, 1)
        let theta = wrap_angle(if bottom < 0.0 { theta + PI } else { theta });
        let phi = if top * bottom < 0.0 { PI } else { 0.0 };
        let mut c = next_free[r].max(next_free[r + 1]);
        if c % 2 != r % 2 {
            c += 1;
        }
        if c >= columns.len() {
            columns.resize(c + 1, Vec::new());
        }
        columns[c].push(MziSetting { row: r, theta, phi });
        next_free[r] = c + 1;
        next_free[r + 1] = c + 1;
    }
    for col in &mut columns {
        col.sort_by_key(|m| m.row);
    }
    let phase_screen = if n == 1 && d[0] < 0.0 { Some(vec![PI]) } else { None };
    MeshNetlist::new(n, columns, phase_screen)
}

/// One mapped sub-matrix: `W = scale · U·diag·Vᵀ` with meshes for `U` and `Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvdTriple {
    pub mesh_u: MeshNetlist,
    /// `min(m, n)` attenuator amplitudes in `[0, 1]`.
    pub diag: Vec<f64>,
    #[serde(rename = "scale")]
    pub global_scale: f64,
    pub mesh_v: MeshNetlist,
}

impl SvdTriple {
    pub fn rows(&self) -> usize {
        self.mesh_u.size
    }

    pub fn cols(&self) -> usize {
        self.mesh_v.size
    }

    /// Signal path: `Vᵀ` mesh, attenuators, `U` mesh, then digital rescale.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = mesh_apply(&self.mesh_v, x)?;
        v.truncate(self.diag.len());
        for (vi, a) in v.iter_mut().zip(&self.diag) {
            *vi *= a;
        }
        v.resize(self.rows(), 0.0);
        let mut y = mesh_apply(&self.mesh_u, &v)?;
        y.iter_mut().for_each(|yi| *yi *= self.global_scale);
        Ok(y)
    }

    pub fn matrix(&self) -> DenseTensor {
        let (m, n) = (self.rows(), self.cols());
        let mut data = vec![0.0; m * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.apply(&e).expect("matching size");
            for i in 0..m {
                data[i * n + j] = col[i];
            }
        }
        DenseTensor::matrix(m, n, data).expect("finite")
    }

    /// MZIs in both meshes plus one attenuator per singular value.
    pub fn mzi_count(&self) -> usize {
        let (m, n) = (self.rows(), self.cols());
        m * (m - 1) / 2 + n * (n - 1) / 2 + m.min(n)
    }

    /// Mesh depths plus one attenuator column.
    pub fn depth(&self) -> usize {
        self.rows() + 1 + self.cols()
    }
}

/// Maps a real matrix onto two orthogonal meshes and an attenuator column.
pub fn svd_map(w: &DenseTensor) -> Result<SvdTriple> {
    let svd = linalg::svd(w)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let global_scale = smax.max(1.0);
    let diag = svd.s.iter().map(|s| (s / global_scale).clamp(0.0, 1.0)).collect();
    let u_full = linalg::complete_orthonormal(&svd.u)?;
    let v = svd.vt.transpose()?;
    let vt_full = linalg::complete_orthonormal(&v)?.transpose()?;
    Ok(SvdTriple { mesh_u: givens_decompose(&u_full)?, diag, global_scale, mesh_v: givens_decompose(&vt_full)? })
}

/// Sub-matrices of one TT core, indexed `α·r_out + β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorePlan {
    pub rank_in: usize,
    pub rank_out: usize,
    pub triples: Vec<SvdTriple>,
}

impl CorePlan {
    /// Cascaded depth contributed by this core (its sub-matrices run in parallel).
    pub fn depth(&self) -> usize {
        self.triples.iter().map(SvdTriple::depth).max().unwrap_or(0)
    }
}

/// Optical realization of one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    /// Logical size; the mapped TT may be zero-padded beyond it.
    pub rows: usize,
    pub cols: usize,
    pub row_modes: Vec<usize>,
    pub col_modes: Vec<usize>,
    pub cores: Vec<CorePlan>,
    /// Bond-rank channels carried in parallel wavelengths.
    pub wdm_channels: usize,
}

fn size_key(m: usize, n: usize) -> String {
    format!("{m}x{n}")
}

impl LayerPlan {
    pub fn triples(&self) -> impl Iterator<Item = &SvdTriple> {
        self.cores.iter().flat_map(|c| c.triples.iter())
    }

    /// Count of sub-matrices per size, keyed `"MxN"`.
    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for t in self.triples() {
            *h.entry(size_key(t.rows(), t.cols())).or_insert(0) += 1;
        }
        h
    }

    fn ranks(&self) -> Vec<usize> {
        let mut r = vec![1];
        r.extend(self.cores.iter().map(|c| c.rank_out));
        r
    }

    /// Optical forward pass: each sub-matrix runs through its meshes, rank
    /// indices are summed digitally between cores.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!("layer is {}x{} but input has length {}", self.rows, self.cols, x.len())));
        }
        let mut padded = x.to_vec();
        padded.resize(self.col_modes.iter().product(), 0.0);
        let mut failure = None;
        let mut y = tt::contract_with(&self.row_modes, &self.col_modes, &self.ranks(), &padded, |k, r_in, m, n, r_out, z| {
            let core = &self.cores[k];
            let mut out = vec![0.0; m * r_out];
            for a in 0..r_in {
                let zi = &z[a * n..(a + 1) * n];
                if zi.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for b in 0..r_out {
                    match core.triples[a * r_out + b].apply(zi) {
                        Ok(part) => {
                            for i in 0..m {
                                out[i * r_out + b] += part[i];
                            }
                        }
                        Err(e) => failure = Some(e),
                    }
                }
            }
            out
        });
        if let Some(e) = failure {
            return Err(e);
        }
        y.truncate(self.rows);
        Ok(y)
    }

    /// Returns a copy with every phase quantized and jittered; see [`perturb`].
    pub fn perturbed(&self, phase_sigma: f64, bits: u32, rng: &mut ChaCha8Rng) -> Result<LayerPlan> {
        let mut out = self.clone();
        for core in &mut out.cores {
            for t in &mut core.triples {
                t.mesh_v = perturb_with(&t.mesh_v, phase_sigma, bits, rng)?;
                if phase_sigma > 0.0 || bits > 0 {
                    // attenuator amplitude a = cos θ_att
                    let noise = Normal::new(0.0, phase_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    for a in &mut t.diag {
                        let theta = quantize(a.clamp(0.0, 1.0).acos(), bits) + noise.sample(rng);
                        *a = theta.cos();
                    }
                }
                t.mesh_u = perturb_with(&t.mesh_u, phase_sigma, bits, rng)?;
            }
        }
        Ok(out)
    }
}

fn check_cap(core: usize, m: usize, n: usize, max_core: usize) -> Result<()> {
    if m > max_core || n > max_core {
        return Err(Error::CoreTooLarge { core, rows: m, cols: n, max: max_core });
    }
    Ok(())
}

/// Slices each core into `r_in·r_out` sub-matrices of shape `m_k × n_k` and
/// maps each with [`svd_map`].
pub fn map_tt_layer(tt: &TtMatrix, max_core: usize) -> Result<LayerPlan> {
    map_tt_logical(tt, tt.rows(), tt.cols(), max_core)
}

fn map_tt_logical(tt: &TtMatrix, rows: usize, cols: usize, max_core: usize) -> Result<LayerPlan> {
    let mut cores = Vec::with_capacity(tt.num_cores());
    for (k, core) in tt.cores().iter().enumerate() {
        let (r_in, m, n, r_out) = (tt.ranks()[k], tt.row_modes()[k], tt.col_modes()[k], tt.ranks()[k + 1]);
        check_cap(k, m, n, max_core)?;
        let g = core.data();
        let mut triples = Vec::with_capacity(r_in * r_out);
        for a in 0..r_in {
            for b in 0..r_out {
                let sub = DenseTensor::from_fn(vec![m, n], |idx| g[((a * m + idx[0]) * n + idx[1]) * r_out + b])?;
                triples.push(svd_map(&sub)?);
            }
        }
        cores.push(CorePlan { rank_in: r_in, rank_out: r_out, triples });
    }
    Ok(LayerPlan {
        rows,
        cols,
        row_modes: tt.row_modes().to_vec(),
        col_modes: tt.col_modes().to_vec(),
        wdm_channels: tt.max_rank(),
        cores,
    })
}

/// Maps a model weight. Dense weights become a single sub-matrix and must
/// fit the core cap themselves.
pub fn map_weight(w: &Weight, max_core: usize) -> Result<LayerPlan> {
    match w {
        Weight::Tt { tt, rows, cols } => map_tt_logical(tt, *rows, *cols, max_core),
        Weight::Dense(d) => map_tt_logical(&TtMatrix::from_single_core(d)?, w.rows(), w.cols(), max_core),
    }
}

/// Σ over sub-matrices of `m(m-1)/2 + n(n-1)/2 + min(m,n)`.
pub fn mzi_count(plan: &LayerPlan) -> usize {
    plan.triples().map(SvdTriple::mzi_count).sum()
}

/// Cores cascade, so a layer's depth is the sum of per-core depths.
pub fn stage_depth(plan: &LayerPlan) -> usize {
    plan.cores.iter().map(CorePlan::depth).sum()
}

fn quantize(x: f64, bits: u32) -> f64 {
    if bits == 0 {
        return x;
    }
    let step = 2.0 * PI / 2f64.powi(bits as i32);
    (x / step).round() * step
}

fn perturb_with(mesh: &MeshNetlist, phase_sigma: f64, bits: u32, rng: &mut ChaCha8Rng) -> Result<MeshNetlist> {
    let noise = Normal::new(0.0, phase_sigma).map_err(|e| Error::InvalidArgument(format!("phase sigma: {e}")))?;
    let mut jitter = |x: f64| quantize(x, bits) + noise.sample(rng);
    let columns = mesh
        .columns
        .iter()
        .map(|col| col.iter().map(|m| MziSetting { row: m.row, theta: jitter(m.theta), phi: jitter(m.phi) }).collect())
        .collect();
    let screen = mesh.phase_screen.as_ref().map(|p| p.iter().map(|&v| jitter(v)).collect());
    MeshNetlist::new(mesh.size, columns, screen)
}

/// Quantizes every phase to a `2π/2^bits` grid (`bits = 0` skips this), then
/// adds `N(0, phase_sigma²)` jitter drawn from `seed`.
pub fn perturb(mesh: &MeshNetlist, phase_sigma: f64, bits: u32, seed: u64) -> Result<MeshNetlist> {
    if !(phase_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("phase sigma must be >= 0, got {phase_sigma}")));
    }
    perturb_with(mesh, phase_sigma, bits, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One compiled weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedPlan {
    pub name: String,
    pub plan: LayerPlan,
}

/// A whole network compiled to meshes, in canonical weight order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCompiled")]
pub struct CompiledModel {
    config: ModelConfig,
    layers: Vec<NamedPlan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCompiled {
    config: ModelConfig,
    layers: Vec<NamedPlan>,
}

impl TryFrom<RawCompiled> for CompiledModel {
    type Error = Error;

    fn try_from(raw: RawCompiled) -> Result<Self> {
        CompiledModel::new(raw.config, raw.layers)
    }
}

/// Totals over a compiled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSummary {
    pub mzis: usize,
    pub stages: usize,
    pub wdm_channels: usize,
    pub histogram: BTreeMap<String, usize>,
}

impl CompiledModel {
    pub fn new(config: ModelConfig, layers: Vec<NamedPlan>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != layers.len() {
            return Err(Error::shape(format!("expected {} layers, got {}", layout.len(), layers.len())));
        }
        for (spec, l) in layout.iter().zip(&layers) {
            if spec.name() != l.name || (spec.rows, spec.cols) != (l.plan.rows, l.plan.cols) {
                return Err(Error::shape(format!(
                    "layer `{}` ({}x{}) does not match `{}` ({}x{})",
                    l.name, l.plan.rows, l.plan.cols, spec.name(), spec.rows, spec.cols
                )));
            }
        }
        Ok(CompiledModel { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[NamedPlan] {
        &self.layers
    }

    pub fn plan(&self, id: WeightId) -> &LayerPlan {
        &self.layers[self.config.position(id)].plan
    }

    pub fn forward(&self, sample: &Sample) -> Result<Prediction> {
        model::forward_with(&self.config, sample, |id, x| self.plan(id).apply(x))
    }

    pub fn perturbed(&self, phase_sigma: f64, bits: u32, seed: u64) -> Result<CompiledModel> {
        if !(phase_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("phase sigma must be >= 0, got {phase_sigma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .layers
            .iter()
            .map(|l| Ok(NamedPlan { name: l.name.clone(), plan: l.plan.perturbed(phase_sigma, bits, &mut rng)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompiledModel { config: self.config.clone(), layers })
    }

    pub fn summary(&self) -> HardwareSummary {
        let mut histogram = BTreeMap::new();
        for l in &self.layers {
            for (k, v) in l.plan.histogram() {
                *histogram.entry(k).or_insert(0) += v;
            }
        }
        HardwareSummary {
            mzis: self.layers.iter().map(|l| mzi_count(&l.plan)).sum(),
            stages: self.stage_depth(),
            wdm_channels: self.layers.iter().map(|l| l.plan.wdm_channels).max().unwrap_or(0),
            histogram,
        }
    }

    /// Depth along the dataflow: the three branches run in parallel, then
    /// fusion, then the heads. Within the text branch the head projections
    /// run in parallel before the feed-forward layer; fusion factors and
    /// class heads are parallel among themselves.
    pub fn stage_depth(&self) -> usize {
        let cfg = &self.config;
        let depth = |id: WeightId| stage_depth(self.plan(id));
        let visual: usize = (0..cfg.visual_dims.len() - 1).map(|l| depth(WeightId::Visual(l))).sum();
        let audio: usize = (0..cfg.audio_dims.len() - 1).map(|l| depth(WeightId::Audio(l))).sum();
        use crate::attention::Projection;
        let proj = (0..cfg.text.heads)
            .flat_map(|h| [Projection::Query(h), Projection::Key(h), Projection::Value(h)])
            .map(|p| depth(WeightId::Text(p)))
            .max()
            .unwrap_or(0);
        let text = proj + depth(WeightId::Text(Projection::FeedForward));
        let fusion = crate::fusion::Modality::ALL
            .iter()
            .flat_map(|&m| (0..cfg.fusion.rank).map(move |i| WeightId::Fusion(m, i)))
            .map(depth)
            .max()
            .unwrap_or(0);
        let heads = (0..cfg.heads).map(|k| depth(WeightId::Head(k))).max().unwrap_or(0);
        visual.max(audio).max(text) + fusion + heads
    }
}

/// Compiles every weight of `model` onto photonic cores of at most
/// `max_core × max_core`.
pub fn compile_model(model: &TomfnModel, max_core: usize) -> Result<CompiledModel> {
    let layers = model
        .weights()
        .into_iter()
        .map(|(spec, w)| {
            let plan = map_weight(w, max_core).map_err(|e| match e {
                Error::CoreTooLarge { .. } => Error::InvalidArgument(format!("{}: {e}", spec.name())),
                other => other,
            })?;
            Ok(NamedPlan { name: spec.name(), plan })
        })
        .collect::<Result<Vec<_>>>()?;
    CompiledModel::new(model.config().clone(), layers)
}
