//! Tensor-train matrices (MPO format).
//!
//! An `M×N` matrix with `M = Π m_k` and `N = Π n_k` is stored as a chain of
//! four-way cores `G_k` of shape `(r_{k-1}, m_k, n_k, r_k)`:
//!
//! ```text
//! W[(i_1..i_d), (j_1..j_d)] = G_1[:, i_1, j_1, :] · G_2[:, i_2, j_2, :] ··· G_d[:, i_d, j_d, :]
//! ```
//!
//! with `r_0 = r_d = 1`. Row and column multi-indices are flattened row-major,
//! so `i_1` is the slowest-varying row digit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{matmul_slice, DenseTensor, Shape};

/// Default cap on a single mode size, matching an 8×8 photonic core.
pub const DEFAULT_MAX_FACTOR: usize = 8;

/// A dimension split into small factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFactorization {
    pub dim: usize,
    pub factors: Vec<usize>,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

/// Splits `n` into factors no larger than `max_factor`.
///
/// Starting from the prime factorization, the two smallest entries are merged
/// while their product stays within the cap. The result is sorted ascending.
/// `1` factorizes as `[1]`.
pub fn factorize_dim(n: usize, max_factor: usize) -> Result<ModeFactorization> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot factorize 0".into()));
    }
    if max_factor < 2 {
        return Err(Error::InvalidArgument(format!("max_factor must be >= 2, got {max_factor}")));
    }
    let mut factors = prime_factors(n);
    if let Some(&p) = factors.iter().find(|&&p| p > max_factor) {
        return Err(Error::Factorization { dim: n, prime: p, max_factor });
    }
    if factors.is_empty() {
        factors.push(1);
    }
    factors.sort_unstable();
    while factors.len() >= 2 && factors[0] * factors[1] <= max_factor {
        let merged = factors[0] * factors[1];
        factors.drain(..2);
        let pos = factors.partition_point(|&f| f < merged);
        factors.insert(pos, merged);
    }
    Ok(ModeFactorization { dim: n, factors })
}

/// Smallest integer `>= n` whose prime factors are all `<= max_factor`.
pub fn next_smooth(n: usize, max_factor: usize) -> usize {
    (n.max(1)..)
        .find(|&k| prime_factors(k).iter().all(|&p| p <= max_factor))
        .expect("powers of two are smooth")
}

/// Pads the shorter factor list with trailing 1s so both have the same length.
pub fn pad_modes(row: &ModeFactorization, col: &ModeFactorization) -> (ModeFactorization, ModeFactorization) {
    let d = row.factors.len().max(col.factors.len());
    let pad = |f: &ModeFactorization| {
        let mut factors = f.factors.clone();
        factors.resize(d, 1);
        ModeFactorization { dim: f.dim, factors }
    };
    (pad(row), pad(col))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTt")]
pub struct TtMatrix {
    row_modes: Vec<usize>,
    col_modes: Vec<usize>,
    ranks: Vec<usize>,
    cores: Vec<DenseTensor>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTt {
    row_modes: Vec<usize>,
    col_modes: Vec<usize>,
    ranks: Vec<usize>,
    cores: Vec<DenseTensor>,
}

impl TryFrom<RawTt> for TtMatrix {
    type Error = Error;

    fn try_from(raw: RawTt) -> Result<Self> {
        TtMatrix::new(raw.row_modes, raw.col_modes, raw.ranks, raw.cores)
    }
}

impl TtMatrix {
    pub fn new(row_modes: Vec<usize>, col_modes: Vec<usize>, ranks: Vec<usize>, cores: Vec<DenseTensor>) -> Result<Self> {
        let d = row_modes.len();
        if d == 0 || col_modes.len() != d {
            return Err(Error::InvalidTt(format!(
                "need equally many row and column modes, got {row_modes:?} and {col_modes:?}"
            )));
        }
        if row_modes.iter().chain(&col_modes).any(|&m| m == 0) {
            return Err(Error::InvalidTt("mode sizes must be >= 1".into()));
        }
        if ranks.len() != d + 1 || ranks[0] != 1 || ranks[d] != 1 || ranks.contains(&0) {
            return Err(Error::InvalidTt(format!(
                "ranks must have length {} with r_0 = r_d = 1 and all >= 1, got {ranks:?}",
                d + 1
            )));
        }
        if cores.len() != d {
            return Err(Error::InvalidTt(format!("expected {d} cores, got {}", cores.len())));
        }
        for (k, core) in cores.iter().enumerate() {
            let want = [ranks[k], row_modes[k], col_modes[k], ranks[k + 1]];
            if core.dims() != want {
                return Err(Error::InvalidTt(format!(
                    "core {k} has shape {} but ranks/modes require {want:?}",
                    core.shape()
                )));
            }
        }
        Ok(TtMatrix { row_modes, col_modes, ranks, cores })
    }

    /// Wraps a plain matrix as a one-core TT.
    pub fn from_single_core(w: &DenseTensor) -> Result<Self> {
        let (m, n) = w.matrix_dims()?;
        TtMatrix::new(vec![m], vec![n], vec![1, 1], vec![w.reshape(vec![1, m, n, 1])?])
    }

    pub fn row_modes(&self) -> &[usize] {
        &self.row_modes
    }

    pub fn col_modes(&self) -> &[usize] {
        &self.col_modes
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [DenseTensor] {
        &mut self.cores
    }

    pub fn num_cores(&self) -> usize {
        self.cores.len()
    }

    pub fn rows(&self) -> usize {
        self.row_modes.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.col_modes.iter().product()
    }

    pub fn max_rank(&self) -> usize {
        self.ranks.iter().copied().max().unwrap_or(1)
    }
}

/// Interleaving permutation `(m_1..m_d, n_1..n_d) -> (m_1, n_1, .., m_d, n_d)`.
fn interleave_perm(d: usize) -> Vec<usize> {
    (0..d).flat_map(|k| [k, d + k]).collect()
}

fn deinterleave_perm(d: usize) -> Vec<usize> {
    (0..d).map(|k| 2 * k).chain((0..d).map(|k| 2 * k + 1)).collect()
}

/// Reorders a dense `M×N` matrix into the paired-mode tensor `(m_1, n_1, .., m_d, n_d)`.
fn to_paired(w: &DenseTensor, row_modes: &[usize], col_modes: &[usize]) -> Result<DenseTensor> {
    let dims: Vec<usize> = row_modes.iter().chain(col_modes).copied().collect();
    w.reshape(dims)?.permute(&interleave_perm(row_modes.len()))
}

/// TT-SVD of a dense matrix.
///
/// Each of the `d − 1` splits keeps the smallest rank whose discarded
/// singular-value energy is at most `tol·‖W‖_F/√(d−1)`, capped at `max_rank`.
/// Singular values below numerical precision are always dropped, so an exact
/// low-rank input yields its true ranks even with `tol = 0`.
pub fn tt_from_dense(w: &DenseTensor, row_modes: &[usize], col_modes: &[usize], max_rank: usize, tol: f64) -> Result<TtMatrix> {
    let (m, n) = w.matrix_dims()?;
    if row_modes.len() != col_modes.len() || row_modes.is_empty() {
        return Err(Error::InvalidTt(format!(
            "row and column mode lists must be nonempty and equally long, got {row_modes:?} and {col_modes:?}"
        )));
    }
    if row_modes.iter().product::<usize>() != m || col_modes.iter().product::<usize>() != n {
        return Err(Error::InvalidTt(format!(
            "modes {row_modes:?} x {col_modes:?} do not multiply out to {m}x{n}"
        )));
    }
    if max_rank < 1 {
        return Err(Error::InvalidArgument("max_rank must be >= 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be >= 0, got {tol}")));
    }

    let d = row_modes.len();
    let paired = to_paired(w, row_modes, col_modes)?;
    let delta = if d > 1 { tol * w.frobenius_norm() / ((d - 1) as f64).sqrt() } else { 0.0 };

    let mut ranks = vec![1usize];
    let mut cores = Vec::with_capacity(d);
    let mut rest = paired.into_data();
    for k in 0..d - 1 {
        let r_prev = ranks[k];
        let rows = r_prev * row_modes[k] * col_modes[k];
        let cols = rest.len() / rows;
        let unfolding = DenseTensor::matrix(rows, cols, rest)?;
        let svd = linalg::svd(&unfolding)?;
        let r = truncation_rank(&svd.s, rows.max(cols), delta, max_rank);

        let k_full = svd.s.len();
        let core: Vec<f64> = svd.u.data().chunks_exact(k_full).flat_map(|row| row[..r].iter().copied()).collect();
        cores.push(DenseTensor::new(vec![r_prev, row_modes[k], col_modes[k], r], core)?);

        rest = Vec::with_capacity(r * cols);
        for (i, &s) in svd.s.iter().take(r).enumerate() {
            rest.extend(svd.vt.row(i).iter().map(|v| s * v));
        }
        ranks.push(r);
    }
    let r_prev = ranks[d - 1];
    cores.push(DenseTensor::new(vec![r_prev, row_modes[d - 1], col_modes[d - 1], 1], rest)?);
    ranks.push(1);
    TtMatrix::new(row_modes.to_vec(), col_modes.to_vec(), ranks, cores)
}

fn truncation_rank(s: &[f64], max_dim: usize, delta: f64, max_rank: usize) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    let noise_floor = smax * max_dim as f64 * f64::EPSILON;
    let numerical = s.iter().take_while(|&&v| v > noise_floor).count();
    // tail[i] = sqrt(Σ_{j >= i} s_j²)
    let mut r = numerical;
    let mut tail = s[numerical..].iter().map(|v| v * v).sum::<f64>();
    while r > 0 && tail + s[r - 1] * s[r - 1] <= delta * delta {
        tail += s[r - 1] * s[r - 1];
        r -= 1;
    }
    r.clamp(1, max_rank.max(1))
}

/// Contracts every core and returns the represented `M×N` matrix.
pub fn tt_to_dense(tt: &TtMatrix) -> DenseTensor {
    let acc = prefix_products(tt).pop().expect("at least one core");
    let d = tt.num_cores();
    let paired_dims: Vec<usize> = (0..d).flat_map(|k| [tt.row_modes[k], tt.col_modes[k]]).collect();
    let paired = DenseTensor::from_parts(Shape::new(paired_dims).expect("modes >= 1"), acc);
    paired
        .permute(&deinterleave_perm(d))
        .and_then(|t| t.reshape(vec![tt.rows(), tt.cols()]))
        .expect("valid TT")
}

/// `prefix[k]` is the contraction of cores `0..k` as a row-major
/// `(Π_{i<k} m_i n_i) × r_k` matrix; `prefix[0] = [[1]]`.
fn prefix_products(tt: &TtMatrix) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0]];
    let mut p = 1usize;
    for (k, core) in tt.cores.iter().enumerate() {
        let (r0, s, r1) = (tt.ranks[k], tt.row_modes[k] * tt.col_modes[k], tt.ranks[k + 1]);
        let next = matmul_slice(out.last().unwrap(), core.data(), p, r0, s * r1);
        p *= s;
        out.push(next);
    }
    out
}

/// `suffix[k]` is the contraction of cores `k..d` as a row-major
/// `r_k × (Π_{i>=k} m_i n_i)` matrix; `suffix[d] = [[1]]`.
fn suffix_products(tt: &TtMatrix) -> Vec<Vec<f64>> {
    let d = tt.num_cores();
    let mut out = vec![Vec::new(); d + 1];
    out[d] = vec![1.0];
    let mut q = 1usize;
    for k in (0..d).rev() {
        let (r0, s, r1) = (tt.ranks[k], tt.row_modes[k] * tt.col_modes[k], tt.ranks[k + 1]);
        out[k] = matmul_slice(tt.cores[k].data(), &out[k + 1], r0 * s, r1, q);
        q *= s;
    }
    out
}

/// `y = W·x` computed core by core, never forming `W`.
pub fn tt_matvec(tt: &TtMatrix, x: &DenseTensor) -> Result<DenseTensor> {
    if x.dims() != [tt.cols()] {
        return Err(Error::shape(format!(
            "tt_matvec: TT has {} columns but x has shape {}",
            tt.cols(),
            x.shape()
        )));
    }
    let y = contract_with(&tt.row_modes, &tt.col_modes, &tt.ranks, x.data(), |k, r_in, m, n, r_out, z| {
        core_apply(tt.cores[k].data(), r_in, m, n, r_out, z)
    });
    DenseTensor::vector(y)
}

/// Applies one core slice-wise. `z` holds the state for a single
/// `(row-prefix, rest)` pair laid out as `(r_in, n)`; returns `(m, r_out)`.
pub(crate) fn core_apply(g: &[f64], r_in: usize, m: usize, n: usize, r_out: usize, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * r_out];
    for c in 0..r_in {
        for j in 0..n {
            let zv = z[c * n + j];
            if zv == 0.0 {
                continue;
            }
            for i in 0..m {
                let base = ((c * m + i) * n + j) * r_out;
                for b in 0..r_out {
                    out[i * r_out + b] += g[base + b] * zv;
                }
            }
        }
    }
    out
}

/// Sequential TT contraction with a pluggable per-core kernel. The kernel
/// receives `(k, r_in, m_k, n_k, r_out, z)` with `z` laid out as
/// `(r_in, n_k)` and must return the `(m_k, r_out)` result.
pub(crate) fn contract_with<F>(row_modes: &[usize], col_modes: &[usize], ranks: &[usize], x: &[f64], mut kernel: F) -> Vec<f64>
where
    F: FnMut(usize, usize, usize, usize, usize, &[f64]) -> Vec<f64>,
{
    // state layout: (prefix, r, n_k, rest)
    let mut state = x.to_vec();
    let mut prefix = 1usize;
    let mut rest: usize = col_modes.iter().product();
    for k in 0..row_modes.len() {
        let (r_in, m, n, r_out) = (ranks[k], row_modes[k], col_modes[k], ranks[k + 1]);
        rest /= n;
        let mut next = vec![0.0; prefix * m * r_out * rest];
        let mut z = vec![0.0; r_in * n];
        for a in 0..prefix {
            for q in 0..rest {
                for c in 0..r_in {
                    for j in 0..n {
                        z[c * n + j] = state[((a * r_in + c) * n + j) * rest + q];
                    }
                }
                let out = kernel(k, r_in, m, n, r_out, &z);
                for i in 0..m {
                    for b in 0..r_out {
                        next[(((a * m + i) * r_out) + b) * rest + q] = out[i * r_out + b];
                    }
                }
            }
        }
        state = next;
        prefix *= m;
    }
    state
}

/// Number of stored core entries, `Σ_k r_{k-1}·m_k·n_k·r_k`.
pub fn tt_param_count(tt: &TtMatrix) -> usize {
    tt.cores.iter().map(DenseTensor::len).sum()
}

/// Gradients of `⟨dW, W(G_1..G_d)⟩` with respect to each core, given the
/// dense gradient `dW` (`M×N`).
pub(crate) fn core_gradients(tt: &TtMatrix, dw: &DenseTensor) -> Result<Vec<DenseTensor>> {
    let paired = to_paired(dw, &tt.row_modes, &tt.col_modes)?;
    let prefix = prefix_products(tt);
    let suffix = suffix_products(tt);
    let d = tt.num_cores();
    let mut p = 1usize;
    let mut grads = Vec::with_capacity(d);
    for k in 0..d {
        let (r0, s, r1) = (tt.ranks[k], tt.row_modes[k] * tt.col_modes[k], tt.ranks[k + 1]);
        let q = paired.len() / (p * s);
        // Lᵀ · D : (r0 × p)·(p × s·q)
        let left = &prefix[k];
        let mut t1 = vec![0.0; r0 * s * q];
        for a in 0..p {
            let drow = &paired.data()[a * s * q..(a + 1) * s * q];
            for c in 0..r0 {
                let l = left[a * r0 + c];
                if l == 0.0 {
                    continue;
                }
                for (t, &dv) in t1[c * s * q..(c + 1) * s * q].iter_mut().zip(drow) {
                    *t += l * dv;
                }
            }
        }
        // (r0·s × q) · Rᵀ (q × r1), R = suffix[k+1] is r1 × q
        let right = &suffix[k + 1];
        let mut g = vec![0.0; r0 * s * r1];
        for row in 0..r0 * s {
            let trow = &t1[row * q..(row + 1) * q];
            for b in 0..r1 {
                g[row * r1 + b] = trow.iter().zip(&right[b * q..(b + 1) * q]).map(|(x, y)| x * y).sum();
            }
        }
        grads.push(DenseTensor::new(tt.cores[k].dims().to_vec(), g)?);
        p *= s;
    }
    Ok(grads)
}
