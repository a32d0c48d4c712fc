//! Differentiable primitives shared by every layer.
//!
//! Everything here is generic over [`Scalar`] so the same forward code can be
//! instantiated at `f32` (training and inference) and `f64` (gradient oracles).
//! The precision-sensitive operations (layer norm, L2 normalization and
//! softmax) never take 16-bit inputs directly: callers upcast to at least
//! `f32` first, so those reductions always accumulate in 32 bits or more.

use std::fmt::{Debug, Display};

use half::f16;
use ndarray::{linalg::general_mat_mul, Array2, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;

/// Layer-norm epsilon, added to the population variance.
pub const LAYER_NORM_EPS: f64 = 1e-6;
/// L2-normalization epsilon, added under the square root.
pub const L2_NORM_EPS: f64 = 1e-12;
/// Slope of the logistic gate in the fast GeLU approximation.
pub const GELU_SLOPE: f64 = 1.702;

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn widen(x: f32) -> Self;

    fn narrow(self) -> f32;
}

impl Scalar for f32 {
    fn widen(x: f32) -> Self {
        x
    }

    fn narrow(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn widen(x: f32) -> Self {
        x as f64
    }

    fn narrow(self) -> f32 {
        self as f32
    }
}

/// Round to the nearest IEEE binary16 value (ties to even) and widen back.
pub fn round_f16<T: Scalar>(x: T) -> T {
    T::widen(f16::from_f32(x.narrow()).to_f32())
}

pub fn round_f16_slice<T: Scalar>(xs: &mut [T]) {
    for x in xs {
        *x = round_f16(*x);
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(1.702 x)`.
pub fn gelu_fast<T: Scalar>(x: T) -> T {
    x * sigmoid(T::c(GELU_SLOPE) * x)
}

pub fn gelu_fast_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_SLOPE);
    let s = sigmoid(k * x);
    s + k * x * s * (T::one() - s)
}

pub fn gelu_fast_slice<T: Scalar>(xs: &[T]) -> Vec<T> {
    xs.iter().map(|&x| gelu_fast(x)).collect()
}

/// Statistics kept from a layer-norm forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormTape<T> {
    pub normalized: Array2<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise layer norm over the last dimension with population variance.
pub fn layer_norm<T: Scalar>(x: ArrayView2<T>, gain: &[T], bias: &[T]) -> (Array2<T>, LayerNormTape<T>) {
    let (rows, cols) = x.dim();
    assert_eq!(gain.len(), cols, "layer_norm gain width");
    assert_eq!(bias.len(), cols, "layer_norm bias width");
    let n = T::from_usize(cols).unwrap();
    let eps = T::c(LAYER_NORM_EPS);
    let mut normalized = Array2::<T>::zeros((rows, cols));
    let mut out = Array2::<T>::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let mut nrow = normalized.row_mut(r);
        let mut orow = out.row_mut(r);
        for c in 0..cols {
            let xh = (row[c] - mean) * is;
            nrow[c] = xh;
            orow[c] = xh * gain[c] + bias[c];
        }
    }
    (out, LayerNormTape { normalized, inv_std })
}

/// Backward of [`layer_norm`]. Accumulates into `dgain`/`dbias`, returns `dx`.
pub fn layer_norm_backward<T: Scalar>(
    dy: ArrayView2<T>,
    tape: &LayerNormTape<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Array2<T> {
    let (rows, cols) = dy.dim();
    let n = T::from_usize(cols).unwrap();
    let mut dx = Array2::<T>::zeros((rows, cols));
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let xh = tape.normalized.row(r);
        let g = dy.row(r);
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..cols {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let is = tape.inv_std[r];
        let mut out = dx.row_mut(r);
        for c in 0..cols {
            out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

/// `x / sqrt(|x|^2 + eps)`; the zero vector maps to the zero vector.
pub fn l2_normalize<T: Scalar>(x: &[T]) -> Vec<T> {
    let norm = l2_norm_eps(x);
    x.iter().map(|&v| v / norm).collect()
}

pub(crate) fn l2_norm_eps<T: Scalar>(x: &[T]) -> T {
    (x.iter().map(|&v| v * v).sum::<T>() + T::c(L2_NORM_EPS)).sqrt()
}

/// Row-wise L2 normalization. Returns the normalized rows and each row's norm.
pub fn l2_normalize_rows<T: Scalar>(x: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = l2_norm_eps(row.as_slice().unwrap());
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

/// Backward of [`l2_normalize_rows`] given the normalized output `h`.
pub fn l2_normalize_rows_backward<T: Scalar>(dh: ArrayView2<T>, h: ArrayView2<T>, norms: &[T]) -> Array2<T> {
    let mut dx = Array2::<T>::zeros(dh.dim());
    for r in 0..dh.nrows() {
        let hr = h.row(r);
        let gr = dh.row(r);
        let dot: T = hr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        let mut out = dx.row_mut(r);
        for c in 0..hr.len() {
            out[c] = (gr[c] - hr[c] * dot) / norms[r];
        }
    }
    dx
}

/// Softmax of one row restricted to the `allowed` entries. Disallowed entries
/// get exactly zero. If nothing is allowed, all mass goes to `fallback`.
pub fn softmax_row_masked<T: Scalar>(scores: &[T], allowed: impl Fn(usize) -> bool, fallback: usize, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for (j, &s) in scores.iter().enumerate() {
        if allowed(j) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|v| *v = T::zero());
        if fallback < out.len() {
            out[fallback] = T::one();
        } else {
            let u = T::one() / T::from_usize(out.len()).unwrap();
            out.iter_mut().for_each(|v| *v = u);
        }
        return;
    }
    let mut total = T::zero();
    for (j, &s) in scores.iter().enumerate() {
        let e = if allowed(j) { (s - max).exp() } else { T::zero() };
        out[j] = e;
        total += e;
    }
    for v in out.iter_mut() {
        *v = *v / total;
    }
}

/// Masked softmax over the rows of `scores`. `mask[i][j] == true` marks a
/// disallowed pair. A fully masked row puts all mass on its diagonal entry.
pub fn softmax_masked<T: Scalar>(scores: ArrayView2<T>, mask: ArrayView2<bool>) -> Array2<T> {
    assert_eq!(scores.dim(), mask.dim(), "softmax_masked mask shape");
    let mut out = Array2::<T>::zeros(scores.dim());
    for (i, (srow, mrow)) in scores.rows().into_iter().zip(mask.rows()).enumerate() {
        let s = srow.to_vec();
        let mut o = vec![T::zero(); s.len()];
        softmax_row_masked(&s, |j| !mrow[j], i, &mut o);
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&o));
    }
    out
}

/// Unmasked softmax of a single vector.
pub fn softmax<T: Scalar>(scores: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); scores.len()];
    softmax_row_masked(scores, |_| true, 0, &mut out);
    out
}

/// Semi-orthogonal `[rows, cols]` matrix in row-major order: rows are
/// orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f32> {
    assert!(rows >= 1 && cols >= 1, "orthogonal_init needs a non-empty shape");
    // Orthonormalize the `k` vectors of length `n`, then lay them out.
    let (k, n) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // Two passes of modified Gram-Schmidt keep the result orthogonal to
        // working precision.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { basis[r][c] } else { basis[c][r] } as f32;
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    a.dot(&b)
}

/// `grad (+)= aᵀ · b`, written into a flat row-major parameter gradient.
pub fn accumulate_at_b<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>, grad: &mut [T]) {
    let mut g = ArrayViewMut2::from_shape((a.ncols(), b.ncols()), grad).expect("gradient shape");
    general_mat_mul(T::one(), &a.t(), &b, T::one(), &mut g);
}

/// Column sums of `x` accumulated into `grad`.
pub fn accumulate_col_sums<T: Scalar>(x: ArrayView2<T>, grad: &mut [T]) {
    for row in x.rows() {
        for (g, &v) in grad.iter_mut().zip(row.iter()) {
            *g += v;
        }
    }
}
