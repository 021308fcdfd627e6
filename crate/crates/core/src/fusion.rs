//! Low-rank multimodal fusion and the full-tensor fusion it factorizes.
//!
//! Each modality embedding `z_m` is extended with a constant 1 and projected
//! by `r` factor matrices; the fused vector is
//!
//! ```text
//! h = Σ_i (W_v⁽ⁱ⁾ z'_v) ∘ (W_a⁽ⁱ⁾ z'_a) ∘ (W_t⁽ⁱ⁾ z'_t)
//! ```
//!
//! which equals contracting the rank-`r` CP tensor
//! `T[j,p,q,s] = Σ_i W_v⁽ⁱ⁾[j,p]·W_a⁽ⁱ⁾[j,q]·W_t⁽ⁱ⁾[j,s]` with
//! `z'_v ⊗ z'_a ⊗ z'_t`, without ever building `T`.

use crate::error::{Error, Result};
use crate::tensor::{outer3, DenseTensor};
use crate::weight::Weight;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Visual => "v",
            Modality::Audio => "a",
            Modality::Text => "t",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmfLayer {
    out_dim: usize,
    input_dims: [usize; 3],
    /// `factors[m][i]` is `out_dim × (input_dims[m] + 1)`.
    factors: [Vec<Weight>; 3],
}

impl LmfLayer {
    pub fn new(out_dim: usize, input_dims: [usize; 3], factors: [Vec<Weight>; 3]) -> Result<Self> {
        let rank = factors[0].len();
        if rank == 0 {
            return Err(Error::config("fusion.rank", "fusion rank must be >= 1"));
        }
        for m in Modality::ALL {
            let list = &factors[m.index()];
            if list.len() != rank {
                return Err(Error::shape(format!(
                    "modality {} has {} factors, expected {rank}",
                    m.tag(),
                    list.len()
                )));
            }
            for (i, w) in list.iter().enumerate() {
                if (w.rows(), w.cols()) != (out_dim, input_dims[m.index()] + 1) {
                    return Err(Error::shape(format!(
                        "fusion.{}.{i} is {}x{}, expected {out_dim}x{}",
                        m.tag(),
                        w.rows(),
                        w.cols(),
                        input_dims[m.index()] + 1
                    )));
                }
            }
        }
        Ok(LmfLayer { out_dim, input_dims, factors })
    }

    /// Layer with dense factors built from `f(modality, rank_index)`.
    pub fn from_dense(out_dim: usize, input_dims: [usize; 3], rank: usize, mut f: impl FnMut(Modality, usize) -> DenseTensor) -> Result<Self> {
        let factors = Modality::ALL.map(|m| (0..rank).map(|i| Weight::Dense(f(m, i))).collect());
        LmfLayer::new(out_dim, input_dims, factors)
    }

    pub fn rank(&self) -> usize {
        self.factors[0].len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn factor(&self, m: Modality, i: usize) -> &Weight {
        &self.factors[m.index()][i]
    }

    pub(crate) fn factors_mut(&mut self) -> &mut [Vec<Weight>; 3] {
        &mut self.factors
    }

    pub fn factors(&self) -> &[Vec<Weight>; 3] {
        &self.factors
    }
}

/// `z` with a trailing constant 1.
pub fn append_one(z: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len() + 1);
    out.extend_from_slice(z);
    out.push(1.0);
    out
}

/// Fuses three embeddings with a caller-supplied projection; `project(m, i, z')`
/// must return `W_m⁽ⁱ⁾·z'`. The photonic simulator reuses this with optical
/// projections.
pub(crate) fn lmf_fuse_with<F>(rank: usize, out_dim: usize, inputs: [&[f64]; 3], mut project: F) -> Result<Vec<f64>>
where
    F: FnMut(Modality, usize, &[f64]) -> Result<Vec<f64>>,
{
    let augmented = inputs.map(append_one);
    let mut h = vec![0.0; out_dim];
    for i in 0..rank {
        let mut term = vec![1.0; out_dim];
        for m in Modality::ALL {
            let p = project(m, i, &augmented[m.index()])?;
            for (t, v) in term.iter_mut().zip(&p) {
                *t *= v;
            }
        }
        for (hj, t) in h.iter_mut().zip(&term) {
            *hj += t;
        }
    }
    Ok(h)
}

fn check_inputs(dims: [usize; 3], z: [&DenseTensor; 3]) -> Result<()> {
    for m in Modality::ALL {
        let zm = z[m.index()];
        if zm.dims() != [dims[m.index()]] {
            return Err(Error::shape(format!(
                "modality {} expects a length-{} vector, got shape {}",
                m.tag(),
                dims[m.index()],
                zm.shape()
            )));
        }
    }
    Ok(())
}

pub fn lmf_forward(layer: &LmfLayer, z_v: &DenseTensor, z_a: &DenseTensor, z_t: &DenseTensor) -> Result<DenseTensor> {
    check_inputs(layer.input_dims, [z_v, z_a, z_t])?;
    let h = lmf_fuse_with(layer.rank(), layer.out_dim, [z_v.data(), z_a.data(), z_t.data()], |m, i, z| {
        layer.factor(m, i).apply(z)
    })?;
    DenseTensor::vector(h)
}

/// Materializes the `d_h × (d_v+1) × (d_a+1) × (d_t+1)` fusion tensor.
pub fn fusion_full_tensor(layer: &LmfLayer) -> DenseTensor {
    let [dv, da, dt] = layer.input_dims.map(|d| d + 1);
    let dense: [Vec<DenseTensor>; 3] = Modality::ALL.map(|m| layer.factors[m.index()].iter().map(Weight::to_dense).collect());
    let mut data = vec![0.0; layer.out_dim * dv * da * dt];
    for i in 0..layer.rank() {
        let (wv, wa, wt) = (dense[0][i].data(), dense[1][i].data(), dense[2][i].data());
        for j in 0..layer.out_dim {
            let block = &mut data[j * dv * da * dt..(j + 1) * dv * da * dt];
            for p in 0..dv {
                let vp = wv[j * dv + p];
                for q in 0..da {
                    let vq = vp * wa[j * da + q];
                    let row = &mut block[(p * da + q) * dt..(p * da + q + 1) * dt];
                    for (s, cell) in row.iter_mut().enumerate() {
                        *cell += vq * wt[j * dt + s];
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![layer.out_dim, dv, da, dt], data).expect("finite factors")
}

/// Tensor fusion: `h[j] = Σ_{p,q,s} T[j,p,q,s]·z'_v[p]·z'_a[q]·z'_t[s]`.
pub fn tfn_forward(t: &DenseTensor, z_v: &DenseTensor, z_a: &DenseTensor, z_t: &DenseTensor) -> Result<DenseTensor> {
    let &[_, dv, da, dt] = t.dims() else {
        return Err(Error::shape(format!("fusion tensor must be 4-way, got {}", t.shape())));
    };
    check_inputs([dv - 1, da - 1, dt - 1], [z_v, z_a, z_t])?;
    let outer = outer3(
        &DenseTensor::vector(append_one(z_v.data()))?,
        &DenseTensor::vector(append_one(z_a.data()))?,
        &DenseTensor::vector(append_one(z_t.data()))?,
    )?;
    let block = dv * da * dt;
    let h = t.data().chunks_exact(block).map(|slab| slab.iter().zip(outer.data()).map(|(a, b)| a * b).sum()).collect();
    DenseTensor::vector(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ones_layer(out_dim: usize, dims: [usize; 3], rank: usize) -> LmfLayer {
        LmfLayer::from_dense(out_dim, dims, rank, |m, _| DenseTensor::filled(vec![out_dim, dims[m.index()] + 1], 1.0).unwrap()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, out_dim: usize, dims: [usize; 3], rank: usize) -> LmfLayer {
        LmfLayer::from_dense(out_dim, dims, rank, |m, _| {
            let n = out_dim * (dims[m.index()] + 1);
            DenseTensor::matrix(out_dim, dims[m.index()] + 1, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .unwrap()
    }

    fn vec_of(v: &[f64]) -> DenseTensor {
        DenseTensor::vector(v.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DenseTensor {
        DenseTensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn bias_only_and_hand_case() {
        let layer = ones_layer(1, [1, 1, 1], 1);
        let zero = vec_of(&[0.0]);
        assert_eq!(lmf_forward(&layer, &zero, &zero, &zero).unwrap().data(), &[1.0]);
        assert_eq!(lmf_forward(&layer, &vec_of(&[1.0]), &zero, &zero).unwrap().data(), &[2.0]);
        assert!(lmf_forward(&layer, &vec_of(&[1.0, 2.0]), &zero, &zero).is_err());
    }

    #[test]
    fn full_tensor_cases() {
        let t = fusion_full_tensor(&ones_layer(2, [1, 2, 1], 1));
        assert_eq!(t.dims(), &[2, 2, 3, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_layer(&mut rng, 3, [2, 2, 2], 1);
        let zero = |m: Modality| DenseTensor::zeros(vec![3, base.input_dims()[m.index()] + 1]).unwrap();
        let extended = LmfLayer::new(
            3,
            [2, 2, 2],
            Modality::ALL.map(|m| vec![base.factor(m, 0).clone(), Weight::Dense(zero(m))]),
        )
        .unwrap();
        assert_eq!(fusion_full_tensor(&extended), fusion_full_tensor(&base));
    }

    #[test]
    fn full_tensor_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(&mut rng, 3, [2, 1, 3], 2);
        let t = fusion_full_tensor(&layer);
        let w = |m: Modality, i: usize| layer.factor(m, i).to_dense();
        for j in 0..3 {
            for p in 0..3 {
                for q in 0..2 {
                    for s in 0..4 {
                        let mut expected = 0.0;
                        for i in 0..2 {
                            expected += w(Modality::Visual, i).get(&[j, p]).unwrap()
                                * w(Modality::Audio, i).get(&[j, q]).unwrap()
                                * w(Modality::Text, i).get(&[j, s]).unwrap();
                        }
                        assert!((t.get(&[j, p, q, s]).unwrap() - expected).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn tfn_cases() {
        let zv = vec_of(&[0.5, -1.0]);
        let za = vec_of(&[2.0]);
        let zt = vec_of(&[3.0]);
        let t = DenseTensor::zeros(vec![2, 3, 2, 2]).unwrap();
        assert!(tfn_forward(&t, &zv, &za, &zt).unwrap().data().iter().all(|&v| v == 0.0));

        let t = DenseTensor::from_fn(vec![2, 3, 2, 2], |i| if i == [1, 1, 0, 1] { 1.0 } else { 0.0 }).unwrap();
        let h = tfn_forward(&t, &zv, &za, &zt).unwrap();
        assert_eq!(h.data(), &[0.0, -1.0 * 2.0 * 1.0]);

        assert!(tfn_forward(&t, &zv, &za, &vec_of(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn lmf_equals_tfn_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
            let (out_dim, rank) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let layer = random_layer(&mut rng, out_dim, dims, rank);
            let z = dims.map(|d| random_vec(&mut rng, d));
            let lmf = lmf_forward(&layer, &z[0], &z[1], &z[2]).unwrap();
            let tfn = tfn_forward(&fusion_full_tensor(&layer), &z[0], &z[1], &z[2]).unwrap();
            assert!(lmf.max_abs_diff(&tfn).unwrap() < 1e-10);
        }
    }

    #[test]
    fn affine_in_each_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 3, [3, 2, 4], 3);
        let za = random_vec(&mut rng, 2);
        let zt = random_vec(&mut rng, 4);
        let x0 = random_vec(&mut rng, 3);
        let dir = random_vec(&mut rng, 3);
        // three collinear inputs x0, x0 + dir, x0 + 2·dir: h must be collinear too
        let h: Vec<DenseTensor> = (0..3)
            .map(|k| lmf_forward(&layer, &x0.add(&dir.scale(k as f64)).unwrap(), &za, &zt).unwrap())
            .collect();
        let second_diff = h[2].sub(&h[1]).unwrap().sub(&h[1].sub(&h[0]).unwrap()).unwrap();
        assert!(second_diff.frobenius_norm() < 1e-12);
    }

    #[test]
    fn rank_terms_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_layer(&mut rng, 2, [2, 2, 2], 1);
        let b = random_layer(&mut rng, 2, [2, 2, 2], 1);
        let both = LmfLayer::new(2, [2, 2, 2], Modality::ALL.map(|m| vec![a.factor(m, 0).clone(), b.factor(m, 0).clone()])).unwrap();
        let z = [2, 2, 2].map(|d| random_vec(&mut rng, d));
        let ha = lmf_forward(&a, &z[0], &z[1], &z[2]).unwrap();
        let hb = lmf_forward(&b, &z[0], &z[1], &z[2]).unwrap();
        let hab = lmf_forward(&both, &z[0], &z[1], &z[2]).unwrap();
        assert!(hab.max_abs_diff(&ha.add(&hb).unwrap()).unwrap() < 1e-14);
    }
}
