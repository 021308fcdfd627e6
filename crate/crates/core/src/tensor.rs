//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built from.
//!
//! A [`DenseTensor`] is a flat `Vec<f64>` plus a [`Shape`]. The last index
//! varies fastest. There are no views or strides: every operation returns a
//! fresh tensor, so values can be shared freely across threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a tensor. Every entry is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("dimension {pos} of {dims:?} is zero")));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for k in (0..self.0.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.0[k + 1];
        }
        strides
    }
}

impl<'de> Deserialize<'de> for Shape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let dims = Vec::<usize>::deserialize(d)?;
        Shape::new(dims).map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for DenseTensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        DenseTensor::new(raw.shape, raw.data)
    }
}

impl DenseTensor {
    /// Builds a tensor, checking the element count and that every entry is finite.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {shape} holds {} elements but {} were given",
                shape.numel(),
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(DenseTensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        DenseTensor { shape, data }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(DenseTensor { shape, data: vec![0.0; n] })
    }

    pub fn filled(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        DenseTensor::new(shape.0, vec![value; n])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        DenseTensor::new(vec![n], data)
    }

    /// Matrix from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        DenseTensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        DenseTensor::matrix(r, c, rows.concat())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = DenseTensor::zeros(vec![n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let dims = shape.dims().to_vec();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(f(&idx));
            for k in (0..dims.len()).rev() {
                idx[k] += 1;
                if idx[k] < dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        DenseTensor::new(dims, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.ndim() || index.iter().zip(self.dims()).any(|(i, d)| i >= d) {
            return None;
        }
        let flat: usize = index.iter().zip(self.shape.strides()).map(|(i, s)| i * s).sum();
        Some(self.data[flat])
    }

    /// `(rows, cols)` of a 2-way tensor.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected a matrix, got shape {}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.dims()[self.shape.ndim() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} ({} elements) into {shape} ({} elements)",
                self.shape,
                self.len(),
                shape.numel()
            )));
        }
        Ok(DenseTensor { shape, data: self.data.clone() })
    }

    /// Axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.shape.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("{perm:?} is not a permutation of {nd} axes")));
        }
        let in_strides = self.shape.strides();
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[offset]);
            for k in (0..nd).rev() {
                idx[k] += 1;
                offset += strides[k];
                if idx[k] < out_dims[k] {
                    break;
                }
                offset -= strides[k] * out_dims[k];
                idx[k] = 0;
            }
        }
        Ok(DenseTensor { shape: Shape(out_dims), data })
    }

    pub fn transpose(&self) -> Result<Self> {
        self.matrix_dims()?;
        self.permute(&[1, 0])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    fn check_same_shape(&self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("shape mismatch: {} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    fn zip_with(&self, other: &DenseTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(DenseTensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// `y[i] = Σ_j W[i,j]·x[j]`.
pub fn matvec(w: &DenseTensor, x: &DenseTensor) -> Result<DenseTensor> {
    let (m, n) = w.matrix_dims()?;
    if x.dims() != [n] {
        return Err(Error::shape(format!("matvec: W is {m}x{n} but x has shape {}", x.shape())));
    }
    Ok(DenseTensor::from_parts(Shape(vec![m]), matvec_slice(w.data(), m, n, x.data())))
}

/// Row-major `m×n` matrix times a length-`n` slice. Caller checks lengths.
pub(crate) fn matvec_slice(w: &[f64], m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    w.chunks_exact(n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ·g` for a row-major `m×n` matrix and a length-`m` slice.
pub(crate) fn matvec_t_slice(w: &[f64], m: usize, n: usize, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(g.len(), m);
    let mut out = vec![0.0; n];
    for (row, &gi) in w.chunks_exact(n).zip(g) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * gi;
        }
    }
    out
}

/// Matrix product of two 2-way tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul: {m}x{k} times {k2}x{n}")));
    }
    Ok(DenseTensor::from_parts(Shape(vec![m, n]), matmul_slice(a.data(), b.data(), m, k, n)))
}

pub(crate) fn matmul_slice(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub fn elementwise_mul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.zip_with(b, |x, y| x * y)
}

/// Three-way outer product `T[p,q,s] = a[p]·b[q]·c[s]`.
pub fn outer3(a: &DenseTensor, b: &DenseTensor, c: &DenseTensor) -> Result<DenseTensor> {
    for (name, v) in [("a", a), ("b", b), ("c", c)] {
        if v.shape().ndim() != 1 {
            return Err(Error::shape(format!("outer3: `{name}` must be a vector, got {}", v.shape())));
        }
    }
    let (n1, n2, n3) = (a.len(), b.len(), c.len());
    let mut data = Vec::with_capacity(n1 * n2 * n3);
    for &x in a.data() {
        for &y in b.data() {
            let xy = x * y;
            data.extend(c.data().iter().map(|&z| xy * z));
        }
    }
    Ok(DenseTensor::from_parts(Shape(vec![n1, n2, n3]), data))
}

/// Max-shifted softmax of a vector.
pub fn softmax(v: &DenseTensor) -> Result<DenseTensor> {
    if v.shape().ndim() != 1 {
        return Err(Error::shape(format!("softmax expects a vector, got {}", v.shape())));
    }
    Ok(DenseTensor::from_parts(v.shape().clone(), softmax_slice(v.data())))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn relu(v: &DenseTensor) -> DenseTensor {
    v.map(|x| x.max(0.0))
}
