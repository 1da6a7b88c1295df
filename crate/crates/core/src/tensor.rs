//! Dense row-major tensors and the numeric kernels the tape is built on.
//!
//! Matrices follow the column-token convention used throughout the crate:
//! a `D x n` matrix holds one `D`-dimensional token per column. All kernels
//! accumulate each output element in a fixed order that does not depend on
//! how many other columns are present, so computing a column alone or as
//! part of a wider batch gives bitwise identical results.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract error: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Storage in bytes at the working precision.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.at(i, j)).collect()
    }

    /// Copies columns `[start, end)` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self {
            shape: vec![r, w],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Equality of shapes and of every value's bit pattern.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn scaled(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(TensorError::shape(op, format!("expected a matrix, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `a[p x q] * b[q x r]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = expect_matrix("matmul", a)?;
    let (q2, r) = expect_matrix("matmul", b)?;
    if q != q2 {
        return Err(TensorError::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; p * r];
    gemm_nn(&a.data, &b.data, &mut out, p, q, r);
    Ok(Tensor {
        shape: vec![p, r],
        data: out,
    })
}

/// `out += a[p x q] * b[q x r]`, accumulating over `q` in index order.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a[p x q] * b[r x q]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * r + j] += acc;
        }
    }
}

/// `out += a[q x p]^T * b[q x r]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for k in 0..q {
        let brow = &b[k * r..(k + 1) * r];
        for i in 0..p {
            let aki = a[k * p + i];
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(x: &Tensor) -> Result<Tensor> {
    let (p, q) = expect_matrix("softmax_columns", x)?;
    let mut out = x.data.clone();
    for j in 0..q {
        let mut max = f64::NEG_INFINITY;
        for i in 0..p {
            max = max.max(out[i * q + j]);
        }
        let mut sum = 0.0;
        for i in 0..p {
            let e = (out[i * q + j] - max).exp();
            out[i * q + j] = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for i in 0..p {
            out[i * q + j] *= inv;
        }
    }
    Tensor {
        shape: vec![p, q],
        data: out,
    }
    .check_finite("softmax_columns")
}

/// Per-column statistics of a layer normalization: normalized values and
/// reciprocal standard deviations.
pub(crate) struct LayerNormStats {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layernorm_stats(x: &[f64], d: usize, n: usize, eps: f64) -> LayerNormStats {
    let mut xhat = vec![0.0; d * n];
    let mut rstd = vec![0.0; n];
    let inv_d = 1.0 / d as f64;
    for j in 0..n {
        let mut mean = 0.0;
        for i in 0..d {
            mean += x[i * n + j];
        }
        mean *= inv_d;
        let mut var = 0.0;
        for i in 0..d {
            let c = x[i * n + j] - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = 1.0 / (var + eps).sqrt();
        rstd[j] = r;
        for i in 0..d {
            xhat[i * n + j] = (x[i * n + j] - mean) * r;
        }
    }
    LayerNormStats { xhat, rstd }
}

/// Normalizes every column of a `D x n` matrix to zero mean and unit
/// variance, then applies the per-row affine `gamma`, `beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (d, n) = expect_matrix("layernorm", x)?;
    if d < 2 {
        return Err(TensorError::Contract(format!("layernorm needs D >= 2, got {d}")));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(TensorError::shape(
            "layernorm",
            format!("affine params of length {}/{} for D = {d}", gamma.len(), beta.len()),
        ));
    }
    let stats = layernorm_stats(&x.data, d, n, eps);
    let mut out = stats.xhat;
    for i in 0..d {
        let (g, b) = (gamma.data[i], beta.data[i]);
        for v in &mut out[i * n..(i + 1) * n] {
            *v = *v * g + b;
        }
    }
    Tensor {
        shape: vec![d, n],
        data: out,
    }
    .check_finite("layernorm")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU of one value.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.map(gelu_scalar).check_finite("gelu")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let proj = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expect = Tensor::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(matmul(&proj, &b).unwrap(), expect);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                oracle[i * 2 + j] = s;
            }
        }
        assert_eq!(matmul(&a, &b).unwrap().data(), &oracle[..]);
    }

    #[test]
    fn matmul_shape_error() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = random(&[3, 5], 3);
        let b = random(&[4, 5], 4);
        let mut out = vec![0.0; 12];
        gemm_nt(a.data(), b.data(), &mut out, 3, 5, 4);
        let expect = matmul(&a, &b.transpose()).unwrap();
        assert!(Tensor::new(vec![3, 4], out).unwrap().max_abs_diff(&expect) < 1e-14);

        let c = random(&[3, 2], 5);
        let mut out = vec![0.0; 10];
        gemm_tn(a.data(), c.data(), &mut out, 5, 3, 2);
        let expect = matmul(&a.transpose(), &c).unwrap();
        assert!(Tensor::new(vec![5, 2], out).unwrap().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_columns(&Tensor::zeros(&[2, 1])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let x = Tensor::new(vec![2, 1], vec![3f64.ln(), 0.0]).unwrap();
        let s = softmax_columns(&x).unwrap();
        assert!((s.data()[0] - 0.75).abs() < 1e-15);
        assert!((s.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let x = random(&[5, 3], 7);
        let s = softmax_columns(&x).unwrap();
        for j in 0..3 {
            let denom: f64 = (0..5).map(|i| x.at(i, j).exp()).sum();
            let mut col = 0.0;
            for i in 0..5 {
                let naive = x.at(i, j).exp() / denom;
                assert!((s.at(i, j) - naive).abs() < 1e-12);
                assert!(s.at(i, j) > 0.0 && s.at(i, j) < 1.0);
                col += s.at(i, j);
            }
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let x = Tensor::new(vec![3, 1], vec![1000.0, 999.0, -1000.0]).unwrap();
        let s = softmax_columns(&x).unwrap();
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_cases() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let c = Tensor::full(&[4, 1], 3.5);
        let out = layernorm(&c, &ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        let out = layernorm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);

        let x = random(&[6, 1], 11);
        let out = layernorm(&x, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 0.0).unwrap();
        let mean = out.sum() / 6.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layernorm_requires_two_rows() {
        let x = Tensor::zeros(&[1, 3]);
        let p = Tensor::zeros(&[1]);
        assert!(matches!(layernorm(&x, &p, &p, 1e-5), Err(TensorError::Contract(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let oracle = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert_eq!(gelu_scalar(1.0), oracle);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
