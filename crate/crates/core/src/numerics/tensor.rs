use serde::{Deserialize, Serialize};

use super::Precision;
use crate::error::{Error, Result};

/// Dense row-major tensor on a double-precision carrier.
///
/// Every stored value is representable in `precision`; constructors round on
/// the way in, so re-rounding a tensor to its own tag is a no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Build a tensor, rounding `data` to `precision`.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        precision.round_slice(&mut data);
        Ok(Self { shape, data, precision })
    }

    pub fn zeros(shape: Vec<usize>, precision: Precision) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len], precision }
    }

    pub fn from_fn(shape: Vec<usize>, precision: Precision, mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|i| precision.round(f(i))).collect();
        Self { shape, data, precision }
    }

    pub fn scalar_vec(data: Vec<f64>, precision: Precision) -> Self {
        let n = data.len();
        Self::new(vec![n], data, precision).expect("length matches by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Extents of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            other => Err(Error::contract(format!("expected rank-3 tensor, got shape {other:?}"))),
        }
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            other => Err(Error::contract(format!("expected rank-2 tensor, got shape {other:?}"))),
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch { op: "reshape", left: self.shape, right: shape });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Re-round to another precision.
    pub fn round_to(&self, precision: Precision) -> Tensor {
        let mut data = self.data.clone();
        precision.round_slice(&mut data);
        Tensor { shape: self.shape.clone(), data, precision }
    }

    /// Elementwise map; the result is rounded to this tensor's precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let p = self.precision;
        let data = self.data.iter().map(|&x| p.round(f(x))).collect();
        Tensor { shape: self.shape.clone(), data, precision: p }
    }

    /// Elementwise binary op with matching shapes, rounded to `self`'s precision.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip_map",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let p = self.precision;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| p.round(f(a, b))).collect();
        Ok(Tensor { shape: self.shape.clone(), data, precision: p })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn has_infinity(&self) -> bool {
        self.data.iter().any(|x| x.is_infinite() || x.is_nan())
    }

    /// `self · rhs` for rank-2 operands.
    pub fn matmul(&self, rhs: &Tensor, accumulate: Precision, out: Precision) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul", rhs));
        }
        let data = gemm(m, n, k, |i, l| self.data[i * k + l], |l, j| rhs.data[l * n + j], accumulate, out);
        Ok(Tensor { shape: vec![m, n], data, precision: out })
    }

    /// `selfᵀ · rhs` for rank-2 operands.
    pub fn matmul_tn(&self, rhs: &Tensor, accumulate: Precision, out: Precision) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul_tn", rhs));
        }
        let data = gemm(m, n, k, |i, l| self.data[l * m + i], |l, j| rhs.data[l * n + j], accumulate, out);
        Ok(Tensor { shape: vec![m, n], data, precision: out })
    }

    /// `self · rhsᵀ` for rank-2 operands.
    pub fn matmul_nt(&self, rhs: &Tensor, accumulate: Precision, out: Precision) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = rhs.dims2()?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", rhs));
        }
        let data = gemm(m, n, k, |i, l| self.data[i * k + l], |l, j| rhs.data[j * k + l], accumulate, out);
        Ok(Tensor { shape: vec![m, n], data, precision: out })
    }

    fn mismatch(&self, op: &'static str, rhs: &Tensor) -> Error {
        Error::ShapeMismatch { op, left: self.shape.clone(), right: rhs.shape.clone() }
    }
}

/// Inner-product kernel: `out[i,j] = Σ_l a(i,l)·b(l,j)` summed in ascending `l`,
/// rounding the running sum to `accumulate` after every multiply-add.
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: impl Fn(usize, usize) -> f64,
    b: impl Fn(usize, usize) -> f64,
    accumulate: Precision,
    out: Precision,
) -> Vec<f64> {
    let mut result = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc = accumulate.round(acc + a(i, l) * b(l, j));
            }
            result.push(out.round(acc));
        }
    }
    result
}
