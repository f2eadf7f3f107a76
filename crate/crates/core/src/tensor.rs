//! Dense row-major tensors of rank at most 3.
//!
//! Everything in the lab (weights, activations, gradients) is a [`Tensor`].
//! The element type defaults to `f32`; `f64` is available for reference
//! computations such as finite-difference gradient checks.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LabError, Result};

pub const MAX_RANK: usize = 3;

/// Floating point element type.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Row-major dense tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(LabError::Contract(format!("tensor rank must be 1..={MAX_RANK}, got shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LabError::Contract(format!("shape {shape:?} needs {numel} elements, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::ZERO; numel] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1, 1], data: vec![value] }
    }

    /// Matrix from row slices; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LabError::Contract("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix. Rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.is_empty() || shape.len() > MAX_RANK {
            return Err(LabError::Contract(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(LabError::Contract(format!("{what}: shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip(other, |a, b| a * b))
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self · other` for matrices `[n, k] · [k, m]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(LabError::Contract(format!("matmul: {:?} x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![T::ZERO; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Self::new(vec![n, m], out)
    }

    /// `self · otherᵀ` for matrices `[n, k] · [m, k]ᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(LabError::Contract(format!("matmul_t: {:?} x {:?}^T", self.shape, other.shape)));
        }
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                let mut acc = T::ZERO;
                for t in 0..k {
                    acc += a[t] * b[t];
                }
                out[i * m + j] = acc;
            }
        }
        Self::new(vec![n, m], out)
    }

    /// `selfᵀ · other` for matrices `[k, n]ᵀ · [k, m]`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, n) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(LabError::Contract(format!("t_matmul: {:?}^T x {:?}", self.shape, other.shape)));
        }
        let mut out = vec![T::ZERO; n * m];
        for t in 0..k {
            let a = &self.data[t * n..(t + 1) * n];
            let b = &other.data[t * m..(t + 1) * m];
            for i in 0..n {
                let ai = a[i];
                let row = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    row[j] += ai * b[j];
                }
            }
        }
        Self::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self { shape: vec![m, n], data: out }
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (n, m) = (self.rows(), self.cols());
        assert!(start + len <= m, "column slice out of range");
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&self.data[i * m + start..i * m + start + len]);
        }
        Self { shape: vec![n, len], data: out }
    }

    /// Rows `[start, start + len)` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let m = self.cols();
        Self { shape: vec![len, m], data: self.data[start * m..(start + len) * m].to_vec() }
    }

    /// Largest absolute elementwise difference, accumulated in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }
}

impl Tensor<f32> {
    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(|_| normal.sample(rng)).collect() }
    }

    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(|_| rng.random_range(-bound..bound)).collect() }
    }

    /// Little-endian IEEE-754 bytes of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for t in 0..k {
            let ait = a[i * k + t];
            if ait == T::ZERO {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            for j in 0..m {
                row[j] += ait * brow[j];
            }
        }
    }
}
