//! Weight matrices stored either densely or as tensor trains.
//!
//! All matrices use the `out × in` convention: a layer computes `y = W·x`.
//! A TT weight may be zero-padded to dimensions whose prime factors fit the
//! core cap; `rows`/`cols` remember the logical size, inputs are padded with
//! zeros and outputs truncated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matvec_slice, DenseTensor};
use crate::tt::{self, TtMatrix};

/// TT compression options for one weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtOptions {
    pub max_rank: usize,
    pub tol: f64,
    #[serde(default = "default_max_factor")]
    pub max_factor: usize,
}

fn default_max_factor() -> usize {
    tt::DEFAULT_MAX_FACTOR
}

impl Default for TtOptions {
    fn default() -> Self {
        TtOptions { max_rank: 4, tol: 0.0, max_factor: tt::DEFAULT_MAX_FACTOR }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Dense(DenseTensor),
    Tt { tt: TtMatrix, rows: usize, cols: usize },
}

/// Row/column modes used to tensorize a `rows × cols` matrix, after padding
/// each dimension to the next `max_factor`-smooth integer.
pub fn tt_modes(rows: usize, cols: usize, max_factor: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = tt::factorize_dim(tt::next_smooth(rows, max_factor), max_factor)?;
    let c = tt::factorize_dim(tt::next_smooth(cols, max_factor), max_factor)?;
    let (r, c) = tt::pad_modes(&r, &c);
    Ok((r.factors, c.factors))
}

impl Weight {
    /// Compresses a dense matrix by TT-SVD, zero-padding it first if needed.
    pub fn tt_from_dense(w: &DenseTensor, opts: &TtOptions) -> Result<Self> {
        let (rows, cols) = w.matrix_dims()?;
        let (row_modes, col_modes) = tt_modes(rows, cols, opts.max_factor)?;
        let (pr, pc) = (row_modes.iter().product::<usize>(), col_modes.iter().product::<usize>());
        let padded = if (pr, pc) == (rows, cols) {
            w.clone()
        } else {
            DenseTensor::from_fn(vec![pr, pc], |i| if i[0] < rows && i[1] < cols { w.data()[i[0] * cols + i[1]] } else { 0.0 })?
        };
        let tt = tt::tt_from_dense(&padded, &row_modes, &col_modes, opts.max_rank, opts.tol)?;
        Ok(Weight::Tt { tt, rows, cols })
    }

    pub fn from_tt(tt: TtMatrix, rows: usize, cols: usize) -> Result<Self> {
        if tt.rows() < rows || tt.cols() < cols {
            return Err(Error::shape(format!(
                "TT of size {}x{} cannot hold a {rows}x{cols} weight",
                tt.rows(),
                tt.cols()
            )));
        }
        Ok(Weight::Tt { tt, rows, cols })
    }

    pub fn rows(&self) -> usize {
        match self {
            Weight::Dense(w) => w.dims()[0],
            Weight::Tt { rows, .. } => *rows,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Weight::Dense(w) => w.dims()[1],
            Weight::Tt { cols, .. } => *cols,
        }
    }

    pub fn is_tt(&self) -> bool {
        matches!(self, Weight::Tt { .. })
    }

    /// `y = W·x`. TT weights contract core by core.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols() {
            return Err(Error::shape(format!(
                "weight is {}x{} but input has length {}",
                self.rows(),
                self.cols(),
                x.len()
            )));
        }
        Ok(match self {
            Weight::Dense(w) => matvec_slice(w.data(), self.rows(), self.cols(), x),
            Weight::Tt { tt, rows, .. } => {
                let mut padded = x.to_vec();
                padded.resize(tt.cols(), 0.0);
                let mut y = tt::tt_matvec(tt, &DenseTensor::vector(padded)?)?.into_data();
                y.truncate(*rows);
                y
            }
        })
    }

    /// The logical `rows × cols` matrix.
    pub fn to_dense(&self) -> DenseTensor {
        match self {
            Weight::Dense(w) => w.clone(),
            Weight::Tt { tt, rows, cols } => {
                let full = tt::tt_to_dense(tt);
                if (tt.rows(), tt.cols()) == (*rows, *cols) {
                    return full;
                }
                let pc = tt.cols();
                DenseTensor::from_fn(vec![*rows, *cols], |i| full.data()[i[0] * pc + i[1]]).expect("nonzero dims")
            }
        }
    }

    /// Stored parameters (TT core entries for TT weights).
    pub fn param_count(&self) -> usize {
        match self {
            Weight::Dense(w) => w.len(),
            Weight::Tt { tt, .. } => tt::tt_param_count(tt),
        }
    }

    pub fn dense_equivalent(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Parameter buffers in a fixed order (one per TT core).
    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Weight::Dense(w) => vec![w.data()],
            Weight::Tt { tt, .. } => tt.cores().iter().map(DenseTensor::data).collect(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Weight::Dense(w) => vec![w.data_mut()],
            Weight::Tt { tt, .. } => tt.cores_mut().iter_mut().map(DenseTensor::data_mut).collect(),
        }
    }

    /// Converts a dense gradient of the logical matrix into gradients for
    /// this weight's stored parameters, in [`Weight::buffers`] order.
    pub fn param_gradients(&self, dw: &DenseTensor) -> Result<Vec<DenseTensor>> {
        match self {
            Weight::Dense(_) => Ok(vec![dw.clone()]),
            Weight::Tt { tt, rows, cols } => {
                let (pr, pc) = (tt.rows(), tt.cols());
                let padded = if (pr, pc) == (*rows, *cols) {
                    dw.clone()
                } else {
                    DenseTensor::from_fn(vec![pr, pc], |i| if i[0] < *rows && i[1] < *cols { dw.data()[i[0] * cols + i[1]] } else { 0.0 })?
                };
                tt::core_gradients(tt, &padded)
            }
        }
    }
}

/// Serialized form: a plain tensor or a TT; the logical size comes from the
/// model config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightRepr {
    Tt(TtMatrix),
    Dense(DenseTensor),
}

impl From<&Weight> for WeightRepr {
    fn from(w: &Weight) -> Self {
        match w {
            Weight::Dense(t) => WeightRepr::Dense(t.clone()),
            Weight::Tt { tt, .. } => WeightRepr::Tt(tt.clone()),
        }
    }
}

impl WeightRepr {
    pub fn into_weight(self, rows: usize, cols: usize) -> Result<Weight> {
        match self {
            WeightRepr::Dense(t) => {
                if t.dims() != [rows, cols] {
                    return Err(Error::shape(format!("expected a {rows}x{cols} matrix, got {}", t.shape())));
                }
                Ok(Weight::Dense(t))
            }
            WeightRepr::Tt(tt) => Weight::from_tt(tt, rows, cols),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_matrix;
    use crate::tensor::matvec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn padded_tt_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_matrix(5, 11, &mut rng);
        let opts = TtOptions { max_rank: 64, tol: 0.0, max_factor: 8 };
        let tw = Weight::tt_from_dense(&w, &opts).unwrap();
        let Weight::Tt { tt, .. } = &tw else { panic!() };
        assert_eq!(tt.cols(), 12);
        assert!(tw.to_dense().sub(&w).unwrap().frobenius_norm() < 1e-10);
        let x = random_matrix(11, 1, &mut rng).reshape(vec![11]).unwrap();
        let y = tw.apply(x.data()).unwrap();
        let expected = matvec(&w, &x).unwrap();
        assert!(y.iter().zip(expected.data()).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(tw.apply(&[0.0; 10]).is_err());
    }

    #[test]
    fn default_modes() {
        assert_eq!(tt_modes(150, 300, 8).unwrap(), (vec![5, 5, 6, 1], vec![3, 4, 5, 5]));
        assert_eq!(tt_modes(32, 33, 8).unwrap(), (vec![4, 8], vec![5, 7]));
        assert_eq!(tt_modes(64, 300, 8).unwrap(), (vec![4, 4, 4, 1], vec![3, 4, 5, 5]));
    }
}
