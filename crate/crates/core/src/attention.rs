//! Multi-head self-attention text encoder.
//!
//! Each head projects every token to query/key/value vectors, mixes values
//! by `rowsoftmax(Q·Kᵀ/√d_k)`, and the head outputs are concatenated back to
//! the model width. A feed-forward matrix with ReLU follows, then the token
//! axis is pooled. There is no positional encoding, residual path or
//! normalization, so the whole encoder is a feed-forward datapath.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, DenseTensor};
use crate::weight::Weight;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

/// Query/key/value projections of one head, each `d_head × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: Weight,
    pub k: Weight,
    pub v: Weight,
}

impl AttentionHead {
    pub fn new(q: Weight, k: Weight, v: Weight) -> Result<Self> {
        let shape = (q.rows(), q.cols());
        if (k.rows(), k.cols()) != shape || (v.rows(), v.cols()) != shape || shape.0 == 0 {
            return Err(Error::shape("attention head q/k/v must share one shape"));
        }
        Ok(AttentionHead { q, k, v })
    }

    pub fn d_head(&self) -> usize {
        self.q.rows()
    }

    pub fn d_model(&self) -> usize {
        self.q.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    heads: Vec<AttentionHead>,
    /// `d_out × d_model`.
    ff: Weight,
    pooling: Pooling,
}

/// Which projection a caller-supplied kernel is asked to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Projection {
    Query(usize),
    Key(usize),
    Value(usize),
    FeedForward,
}

impl TextEncoder {
    pub fn new(heads: Vec<AttentionHead>, ff: Weight, pooling: Pooling) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::config("text.heads", "need at least one attention head"));
        };
        let d_model = first.d_model();
        if heads.iter().any(|h| h.d_model() != d_model) {
            return Err(Error::shape("all heads must read the same model width"));
        }
        let total: usize = heads.iter().map(AttentionHead::d_head).sum();
        if total != d_model {
            return Err(Error::config(
                "text.d_head",
                format!("head widths sum to {total} but d_model is {d_model}"),
            ));
        }
        if ff.cols() != d_model {
            return Err(Error::shape(format!("feed-forward reads {} features, expected {d_model}", ff.cols())));
        }
        Ok(TextEncoder { heads, ff, pooling })
    }

    pub fn heads(&self) -> &[AttentionHead] {
        &self.heads
    }

    pub(crate) fn heads_mut(&mut self) -> &mut [AttentionHead] {
        &mut self.heads
    }

    pub fn ff(&self) -> &Weight {
        &self.ff
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [AttentionHead], &mut Weight) {
        (&mut self.heads, &mut self.ff)
    }

    pub(crate) fn ff_mut(&mut self) -> &mut Weight {
        &mut self.ff
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn d_model(&self) -> usize {
        self.ff.cols()
    }

    pub fn d_out(&self) -> usize {
        self.ff.rows()
    }
}

/// `rowsoftmax(Q·Kᵀ/√d_k)·V` for `L × d_k` inputs.
pub fn scaled_dot_attention(q: &DenseTensor, k: &DenseTensor, v: &DenseTensor) -> Result<DenseTensor> {
    let (l, d) = q.matrix_dims()?;
    if k.dims() != [l, d] || v.dims() != [l, d] {
        return Err(Error::shape(format!(
            "attention inputs must share shape {}, got K {} and V {}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (out, _) = attend(q.data(), k.data(), v.data(), l, d);
    DenseTensor::matrix(l, d, out)
}

/// Returns the attention output and the row-stochastic weight matrix `P`.
pub(crate) fn attend(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = Vec::with_capacity(l * l);
    for t in 0..l {
        let qt = &q[t * d..(t + 1) * d];
        let scores: Vec<f64> = (0..l).map(|s| scale * qt.iter().zip(&k[s * d..(s + 1) * d]).map(|(a, b)| a * b).sum::<f64>()).collect();
        probs.extend(softmax_slice(&scores));
    }
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        for s in 0..l {
            let p = probs[t * l + s];
            for (o, &vs) in out[t * d..(t + 1) * d].iter_mut().zip(&v[s * d..(s + 1) * d]) {
                *o += p * vs;
            }
        }
    }
    (out, probs)
}

/// Gradients of the attention output with respect to `Q`, `K`, `V`.
pub(crate) fn attend_backward(q: &[f64], k: &[f64], v: &[f64], probs: &[f64], d_out: &[f64], l: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    for t in 0..l {
        let g = &d_out[t * d..(t + 1) * d];
        // dP[t,s] = g · V[s]
        let dp: Vec<f64> = (0..l).map(|s| g.iter().zip(&v[s * d..(s + 1) * d]).map(|(a, b)| a * b).sum()).collect();
        let prow = &probs[t * l..(t + 1) * l];
        let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for s in 0..l {
            let p = prow[s];
            for (dvs, &gi) in dv[s * d..(s + 1) * d].iter_mut().zip(g) {
                *dvs += p * gi;
            }
            let ds = p * (dp[s] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            for i in 0..d {
                dq[t * d + i] += ds * k[s * d + i];
                dk[s * d + i] += ds * q[t * d + i];
            }
        }
    }
    (dq, dk, dv)
}

/// Applies `project` token-wise and returns the `L × rows` result.
fn project_rows<F>(x: &[f64], l: usize, width: usize, which: Projection, project: &mut F) -> Result<Vec<f64>>
where
    F: FnMut(Projection, &[f64]) -> Result<Vec<f64>>,
{
    let mut out = Vec::new();
    for t in 0..l {
        out.extend(project(which, &x[t * width..(t + 1) * width])?);
    }
    Ok(out)
}

/// Text encoding with a pluggable projection kernel. `head_dims[h]` is the
/// width of head `h`; `project(p, x)` must return the projection `p` of `x`.
pub(crate) fn encode_with<F>(head_dims: &[usize], d_out: usize, pooling: Pooling, x: &DenseTensor, mut project: F) -> Result<Vec<f64>>
where
    F: FnMut(Projection, &[f64]) -> Result<Vec<f64>>,
{
    let (l, d_model) = x.matrix_dims()?;
    let total: usize = head_dims.iter().sum();
    if total != d_model {
        return Err(Error::shape(format!("text input has width {d_model}, encoder expects {total}")));
    }
    let mut concat = vec![0.0; l * d_model];
    let mut offset = 0;
    for (h, &dh) in head_dims.iter().enumerate() {
        let q = project_rows(x.data(), l, d_model, Projection::Query(h), &mut project)?;
        let k = project_rows(x.data(), l, d_model, Projection::Key(h), &mut project)?;
        let v = project_rows(x.data(), l, d_model, Projection::Value(h), &mut project)?;
        let (a, _) = attend(&q, &k, &v, l, dh);
        for t in 0..l {
            concat[t * d_model + offset..t * d_model + offset + dh].copy_from_slice(&a[t * dh..(t + 1) * dh]);
        }
        offset += dh;
    }
    let f = project_rows(&concat, l, d_model, Projection::FeedForward, &mut project)?;
    Ok(pool(&f.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), l, d_out, pooling))
}

pub(crate) fn pool(rows: &[f64], l: usize, width: usize, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Mean => {
            let mut out = vec![0.0; width];
            for row in rows.chunks_exact(width) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out.iter().map(|v| v / l as f64).collect()
        }
        Pooling::Last => rows[(l - 1) * width..].to_vec(),
    }
}

/// Encodes an `L × d_model` token matrix into a `d_out` vector.
pub fn encode_text(enc: &TextEncoder, x: &DenseTensor) -> Result<DenseTensor> {
    let (_, width) = x.matrix_dims()?;
    if width != enc.d_model() {
        return Err(Error::shape(format!("text tokens have width {width}, encoder expects {}", enc.d_model())));
    }
    let head_dims: Vec<usize> = enc.heads.iter().map(AttentionHead::d_head).collect();
    let z = encode_with(&head_dims, enc.d_out(), enc.pooling, x, |p, row| match p {
        Projection::Query(h) => enc.heads[h].q.apply(row),
        Projection::Key(h) => enc.heads[h].k.apply(row),
        Projection::Value(h) => enc.heads[h].v.apply(row),
        Projection::FeedForward => enc.ff.apply(row),
    })?;
    DenseTensor::vector(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_matrix;
    use crate::tensor::{matvec, relu};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows_of(t: &DenseTensor) -> Vec<Vec<f64>> {
        let (l, _) = t.matrix_dims().unwrap();
        (0..l).map(|i| t.row(i).to_vec()).collect()
    }

    fn encoder(rng: &mut ChaCha8Rng, d_model: usize, head_dims: &[usize], d_out: usize, pooling: Pooling) -> TextEncoder {
        let heads = head_dims
            .iter()
            .map(|&dh| {
                let mut w = || Weight::Dense(random_matrix(dh, d_model, rng));
                AttentionHead::new(w(), w(), w()).unwrap()
            })
            .collect();
        TextEncoder::new(heads, Weight::Dense(random_matrix(d_out, d_model, rng)), pooling).unwrap()
    }

    /// Triple-loop reference: out[t] = Σ_s softmax_s(q_t·k_s/√d)·v_s.
    fn attention_oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = q[0].len() as f64;
        q.iter()
            .map(|qt| {
                let scores: Vec<f64> = k.iter().map(|ks| qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut out = vec![0.0; q[0].len()];
                for (ws, vs) in w.iter().zip(v) {
                    for (o, x) in out.iter_mut().zip(vs) {
                        *o += ws / z * x;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn singleton_sequence_returns_value() {
        let q = DenseTensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let v = DenseTensor::matrix(1, 3, vec![-1.0, 0.5, 4.0]).unwrap();
        assert_eq!(scaled_dot_attention(&q, &q, &v).unwrap(), v);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_matrix(4, 2, &mut rng);
        let v = random_matrix(4, 2, &mut rng);
        let out = scaled_dot_attention(&DenseTensor::zeros(vec![4, 2]).unwrap(), &k, &v).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..4).map(|r| v.get(&[r, c]).unwrap()).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((out.get(&[r, c]).unwrap() - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random_matrix(3, 2, &mut rng), random_matrix(3, 2, &mut rng), random_matrix(3, 2, &mut rng));
        let got = scaled_dot_attention(&q, &k, &v).unwrap();
        let want = attention_oracle(&rows_of(&q), &rows_of(&k), &rows_of(&v));
        for (r, row) in want.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                assert!((got.get(&[r, c]).unwrap() - x).abs() < 1e-12);
            }
        }
        assert!(scaled_dot_attention(&q, &random_matrix(2, 2, &mut rng), &v).is_err());
    }

    #[test]
    fn single_token_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = encoder(&mut rng, 4, &[2, 2], 3, Pooling::Mean);
        let x = random_matrix(1, 4, &mut rng);
        let token = x.reshape(vec![4]).unwrap();
        let mut concat = Vec::new();
        for h in enc.heads() {
            concat.extend(h.v.apply(token.data()).unwrap());
        }
        let expected = relu(&matvec(&enc.ff().to_dense(), &DenseTensor::vector(concat).unwrap()).unwrap());
        assert!(encode_text(&enc, &x).unwrap().max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn mean_pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = encoder(&mut rng, 6, &[3, 3], 4, Pooling::Mean);
        let x = random_matrix(5, 6, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let xp = DenseTensor::from_fn(vec![5, 6], |i| x.get(&[perm[i[0]], i[1]]).unwrap()).unwrap();
        let a = encode_text(&enc, &x).unwrap();
        let b = encode_text(&enc, &xp).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn output_width_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = encoder(&mut rng, 6, &[4, 2], 5, Pooling::Last);
        for l in [1, 5, 20] {
            assert_eq!(encode_text(&enc, &random_matrix(l, 6, &mut rng)).unwrap().len(), 5);
        }
        assert!(encode_text(&enc, &random_matrix(2, 5, &mut rng)).is_err());

        let bad_heads = vec![AttentionHead::new(
            Weight::Dense(random_matrix(2, 6, &mut rng)),
            Weight::Dense(random_matrix(2, 6, &mut rng)),
            Weight::Dense(random_matrix(2, 6, &mut rng)),
        )
        .unwrap()];
        assert!(matches!(
            TextEncoder::new(bad_heads, Weight::Dense(random_matrix(5, 6, &mut rng)), Pooling::Mean),
            Err(Error::Config { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rows_are_convex_combinations(l in 1usize..6, d in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (random_matrix(l, d, &mut rng), random_matrix(l, d, &mut rng), random_matrix(l, d, &mut rng));
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            for c in 0..d {
                let col: Vec<f64> = (0..l).map(|r| v.get(&[r, c]).unwrap()).collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for r in 0..l {
                    let x = out.get(&[r, c]).unwrap();
                    prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn permutation_equivariant(l in 2usize..6, d in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (q, k, v) = (random_matrix(l, d, &mut rng), random_matrix(l, d, &mut rng), random_matrix(l, d, &mut rng));
            let perm: Vec<usize> = (0..l).rev().collect();
            let p = |t: &DenseTensor| DenseTensor::from_fn(vec![l, d], |i| t.get(&[perm[i[0]], i[1]]).unwrap()).unwrap();
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            let out_p = scaled_dot_attention(&p(&q), &p(&k), &p(&v)).unwrap();
            prop_assert!(out_p.max_abs_diff(&p(&out)).unwrap() < 1e-12);
        }
    }
}
