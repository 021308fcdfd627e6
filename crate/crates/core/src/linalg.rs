//! Dense factorizations used by the TT and photonic modules.
//!
//! SVD comes from faer and QR from nalgebra; this module only adapts them to
//! [`DenseTensor`] and fixes conventions (descending singular values,
//! deterministic signs, square orthogonal completion).

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// Thin SVD `A = U·diag(s)·Vᵀ` with `s` sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m×k`, orthonormal columns.
    pub u: DenseTensor,
    /// length `k = min(m, n)`.
    pub s: Vec<f64>,
    /// `k×n`, orthonormal rows.
    pub vt: DenseTensor,
}

pub(crate) fn from_nalgebra(a: &DMatrix<f64>) -> DenseTensor {
    let (m, n) = a.shape();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        data.extend(a.row(i).iter());
    }
    DenseTensor::from_parts(crate::tensor::Shape::new(vec![m, n]).expect("nonzero dims"), data)
}

pub fn svd(a: &DenseTensor) -> Result<Svd> {
    let (m, n) = a.matrix_dims()?;
    let k = m.min(n);
    // nalgebra 0.35 returns wrong singular vectors for rank-deficient inputs
    // (TT unfoldings usually are), so the SVD itself comes from faer.
    let mat = faer::Mat::<f64>::from_fn(m, n, |i, j| a.data()[i * n + j]);
    let decomp = mat.thin_svd().map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (decomp.U(), decomp.S().column_vector(), decomp.V());

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));

    let mut u_data = vec![0.0; m * k];
    let mut vt_data = vec![0.0; k * n];
    let mut s_sorted = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        s_sorted.push(s[src]);
        // Sign convention: the largest-magnitude entry of each left vector is positive.
        let pivot = (0..m).map(|i| u[(i, src)]).fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u_data[i * k + dst] = sign * u[(i, src)];
        }
        for j in 0..n {
            vt_data[dst * n + j] = sign * v[(j, src)];
        }
    }
    Ok(Svd {
        u: DenseTensor::matrix(m, k, u_data)?,
        s: s_sorted,
        vt: DenseTensor::matrix(k, n, vt_data)?,
    })
}

/// Extends an `m×k` matrix with orthonormal columns to an `m×m` orthogonal
/// matrix. The first `k` columns are kept; the rest come from Gram-Schmidt
/// over the standard basis.
pub fn complete_orthonormal(q: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = q.matrix_dims()?;
    if k > m {
        return Err(Error::shape(format!("cannot complete {m}x{k}: more columns than rows")));
    }
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| (0..m).map(|i| q.data()[i * k + j]).collect()).collect();
    for e in 0..m {
        if cols.len() == m {
            break;
        }
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for c in &cols {
                let proj: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    debug_assert_eq!(cols.len(), m);
    let mut data = vec![0.0; m * m];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..m {
            data[i * m + j] = c[i];
        }
    }
    DenseTensor::matrix(m, m, data)
}

/// `‖QᵀQ − I‖_F` for a square matrix.
pub fn orthogonality_residual(q: &DenseTensor) -> Result<f64> {
    let (m, n) = q.matrix_dims()?;
    if m != n {
        return Err(Error::shape(format!("expected a square matrix, got {m}x{n}")));
    }
    let gram = crate::tensor::matmul(&q.transpose()?, q)?;
    Ok(gram.sub(&DenseTensor::eye(n)?)?.frobenius_norm())
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign of R's diagonal fixed).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DenseTensor {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_nalgebra(&q)
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseTensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DenseTensor::matrix(rows, cols, data).expect("finite gaussian samples")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(svd: &Svd) -> DenseTensor {
        let (m, k) = svd.u.matrix_dims().unwrap();
        let scaled = DenseTensor::from_fn(vec![m, k], |i| svd.u.data()[i[0] * k + i[1]] * svd.s[i[1]]).unwrap();
        matmul(&scaled, &svd.vt).unwrap()
    }

    #[test]
    fn svd_reconstructs_and_sorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n) in [(4, 6), (6, 4), (5, 5), (1, 3), (3, 1)] {
            let a = random_matrix(m, n, &mut rng);
            let svd = svd(&a).unwrap();
            assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            let err = reconstruct(&svd).sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(err < 1e-12, "{m}x{n}: {err}");
        }
    }

    #[test]
    fn svd_handles_rank_deficient_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let (m, n, r) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=3));
            let a = matmul(&random_matrix(m, r, &mut rng), &random_matrix(r, n, &mut rng)).unwrap();
            let err = reconstruct(&svd(&a).unwrap()).sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
            assert!(err < 1e-12, "{m}x{n} rank {r}: {err}");
        }
    }

    #[test]
    fn completion_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(7, 3, &mut rng);
        let u = svd(&a).unwrap().u;
        let full = complete_orthonormal(&u).unwrap();
        assert!(orthogonality_residual(&full).unwrap() < 1e-12);
        for i in 0..7 {
            for j in 0..3 {
                assert_eq!(full.data()[i * 7 + j], u.data()[i * 3 + j]);
            }
        }
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=8 {
            assert!(orthogonality_residual(&random_orthogonal(n, &mut rng)).unwrap() < 1e-12);
        }
    }
}
