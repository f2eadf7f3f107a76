//! Stateless numeric kernels shared by the tape and by the probes.

use crate::tensor::{Scalar, Tensor};

/// Epsilon inside the RMS-norm square root. A zero row normalises to zero.
pub const RMS_EPS: f64 = 1e-6;

/// Row-wise `softmax(scale · x)` with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, scale: T) -> Tensor<T> {
    masked_softmax_rows(x, scale, None)
}

/// Row-wise softmax where, when `causal_offset` is `Some(o)`, row `i` only sees
/// columns `j <= i + o`. Masked entries are exactly zero.
pub fn masked_softmax_rows<T: Scalar>(x: &Tensor<T>, scale: T, causal_offset: Option<usize>) -> Tensor<T> {
    let (n, m) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let visible = match causal_offset {
            Some(o) => (i + o + 1).min(m),
            None => m,
        };
        softmax_into(&x.row(i)[..visible], scale, &mut out.row_mut(i)[..visible]);
    }
    out
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], scale: T, out: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(row[0] * scale, |m, &v| m.max(v * scale));
    let mut total = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v * scale - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `log softmax` of one row, computed in f64.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Softmax of one row in f64.
pub fn softmax_f64(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Elementwise `x · sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

/// Scale-only RMS norm per row: `x / sqrt(mean(x²) + eps) · g`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(gain.numel(), d, "rms_norm gain width");
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let inv = rms_inv(x.row(i));
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(x.row(i)).zip(gain.data()) {
            *o = v * inv * g;
        }
    }
    out
}

pub(crate) fn rms_inv<T: Scalar>(row: &[T]) -> T {
    let mut ss = T::ZERO;
    for &v in row {
        ss += v * v;
    }
    let ms = ss / T::from_f64(row.len() as f64) + T::from_f64(RMS_EPS);
    T::ONE / ms.sqrt()
}

/// Index of the largest entry; exact ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
