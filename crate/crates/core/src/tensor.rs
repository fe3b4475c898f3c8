//! Dense row-major tensors.
//!
//! Values are always held as `f64`; [`DType`] records the storage precision a
//! tensor was read from or will be written at. Narrowing to F32/F16 happens
//! explicitly via [`Tensor::narrowed`], so arithmetic is float64 throughout.

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum DType {
    #[default]
    F64,
    F32,
    F16,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            DType::F64 => "F64",
            DType::F32 => "F32",
            DType::F16 => "F16",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "F64" => Some(DType::F64),
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            _ => None,
        }
    }

    /// Rounds `x` to the nearest value representable at this precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F64 => x,
            DType::F32 => x as f32 as f64,
            DType::F16 => f16::from_f64(x).to_f64(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("dtype", &self.dtype).field("data", &preview).finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!("shape {shape:?} must be non-empty with positive dims")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, dtype: DType::F64, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros: invalid shape")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], dtype: DType::F64, data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("vector: empty data")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut crate::Rng) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = std * rng.normal();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Tags the tensor with a storage dtype after rounding every value to it.
    pub fn narrowed(mut self, dtype: DType) -> Self {
        for x in &mut self.data {
            *x = dtype.round(*x);
        }
        self.dtype = dtype;
        self
    }

    /// Wraps already-representable values with a dtype tag (used by readers).
    pub(crate) fn with_dtype_unchecked(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// `(rows, cols)` of a 2-D tensor; 1-D tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape("dims2", other, &[0, 0])),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|d| d.0).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|d| d.1).unwrap_or(0)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), dtype: DType::F64, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: DType::F64,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// `self += c * other`, in place.
    pub fn axpy(&mut self, c: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Left-to-right sum over the row-major buffer.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    /// Frobenius inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2_strict("matmul", other)?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, (k, 1), &other.data, (n, 1), 0.0, &mut out, (n, 1));
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ`, the layout of a linear layer with weight `[d_out × d_in]`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2_strict("matmul_t", other)?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, (k, 1), &other.data, (1, k), 0.0, &mut out, (n, 1));
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2_strict("t_matmul", other)?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("t_matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.data, (1, m), &other.data, (n, 1), 0.0, &mut out, (n, 1));
        Tensor::new(vec![m, n], out)
    }

    fn dims2_strict(&self, op: &'static str, other: &Tensor) -> Result<(usize, usize)> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        self.dims2()
    }

    /// Concatenates 2-D tensors along rows.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().ok_or_else(|| Error::contract("vstack of nothing"))?.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape("vstack", &parts[0].shape, &p.shape));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Concatenates 2-D tensors along columns.
    pub fn hstack(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().ok_or_else(|| Error::contract("hstack of nothing"))?.rows();
        let mut cols = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::shape("hstack", &parts[0].shape, &p.shape));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let c = p.cols();
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    /// Zero-pads a 2-D tensor to `[rows, cols]` (top-left aligned).
    pub fn padded(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if rows < r || cols < c {
            return Err(Error::shape("padded", &self.shape, &[rows, cols]));
        }
        let mut out = Tensor::zeros(vec![rows, cols]);
        for i in 0..r {
            out.data[i * cols..i * cols + c].copy_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(out)
    }
}

/// `c = alpha * a·b + beta * c` over strided row-major views.
///
/// Strides are `(row_stride, col_stride)` in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above state the bounds every caller
    // upholds: each strided view lies inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get2(i, p) * b.get2(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_multiplication() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn row_sum_of_ones() {
        let a = Tensor::full(vec![1, 32], 1.0);
        let b = Tensor::full(vec![32, 1], 1.0);
        assert_eq!(a.matmul(&b).unwrap().data(), &[32.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        match a.matmul(&b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn transposed_products_agree_with_naive() {
        let mut rng = Rng::seed(5);
        let a = Tensor::randn(vec![7, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![5, 9], 1.0, &mut rng);
        let reference = naive_matmul(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&reference).unwrap() < 1e-12);
        let bt = b.transpose().unwrap();
        assert!(a.matmul_t(&bt).unwrap().max_abs_diff(&reference).unwrap() < 1e-12);
        let at = a.transpose().unwrap();
        assert!(at.t_matmul(&b).unwrap().max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn scaling_commutes_with_matmul() {
        let mut rng = Rng::seed(9);
        for _ in 0..50 {
            let a = Tensor::randn(vec![6, 4], 1.0, &mut rng);
            let b = Tensor::randn(vec![4, 3], 1.0, &mut rng);
            let c = 3.0 * rng.normal();
            let lhs = a.matmul(&b).unwrap().scale(c);
            let rhs = a.scale(c).matmul(&b).unwrap();
            assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn narrowing_is_idempotent() {
        let t = Tensor::vector(vec![0.1, 1.0 / 3.0, 65504.0]);
        let h = t.clone().narrowed(DType::F16);
        assert_eq!(h.clone().narrowed(DType::F16), h);
        assert_eq!(h.dtype(), DType::F16);
        let f = t.narrowed(DType::F32);
        assert_eq!(f.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn finiteness_check() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(t.ensure_finite("t"), Err(Error::NonFinite(_))));
    }
}
