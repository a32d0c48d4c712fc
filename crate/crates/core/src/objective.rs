//! Annealed cosine scoring, the in-batch-negatives loss, and ranking.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Encoding width `d`; the scale anneals from 1 to `sqrt(d)`.
    pub dim: usize,
    pub anneal_steps: u64,
    /// Probability mass moved from the positive to the in-batch negatives.
    pub smoothing: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { dim: 512, anneal_steps: 10_000, smoothing: 0.2 }
    }
}

impl ScoreConfig {
    /// `c(t) = 1 + (sqrt(d) - 1) * min(t / anneal_steps, 1)`.
    pub fn scale(&self, step: u64) -> f64 {
        let frac = if self.anneal_steps == 0 { 1.0 } else { (step as f64 / self.anneal_steps as f64).min(1.0) };
        1.0 + ((self.dim as f64).sqrt() - 1.0) * frac
    }
}

/// `c(step) * (h_x . h_y)` for unit vectors.
pub fn score(hx: &[f32], hy: &[f32], step: u64, cfg: &ScoreConfig) -> f32 {
    debug_assert!(is_unit(hx) && is_unit(hy), "score expects unit-norm encodings");
    let dot: f32 = hx.iter().zip(hy).map(|(a, b)| a * b).sum();
    (cfg.scale(step) as f32) * dot
}

fn is_unit(v: &[f32]) -> bool {
    let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    (n - 1.0).abs() < 1e-3 || n == 0.0
}

/// Per-row target distribution: `1 - smoothing` on the diagonal, the rest
/// spread evenly over the other `k - 1` columns.
pub fn smoothed_targets(k: usize, smoothing: f64) -> Array2<f64> {
    let off = if k > 1 { smoothing / (k - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 - smoothing } else { off })
}

#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Summed over rows.
    pub loss: T,
    pub d_hx: Array2<T>,
    pub d_hy: Array2<T>,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn per_row(&self) -> T {
        self.loss / T::from_usize(self.d_hx.nrows()).unwrap()
    }
}

/// Smoothed cross-entropy over the `K x K` score matrix `S_ij = c * h_x_i . h_y_j`.
/// With `smoothing = 0` this is `-J` for `J = sum_i S_ii - sum_i log sum_j exp(S_ij)`.
pub fn batch_loss<T: Scalar>(hx: ArrayView2<T>, hy: ArrayView2<T>, step: u64, cfg: &ScoreConfig) -> Result<BatchLoss<T>> {
    let k = hx.nrows();
    if k < 2 {
        return Err(Error::config("batch loss needs at least two pairs (no in-batch negatives otherwise)"));
    }
    if hy.nrows() != k || hx.ncols() != hy.ncols() {
        return Err(Error::config("input and response encodings must have matching shapes"));
    }
    let c = T::c(cfg.scale(step));
    let scores = hx.dot(&hy.t()) * c;
    let targets = smoothed_targets(k, cfg.smoothing);
    let mut loss = T::zero();
    let mut ds = Array2::<T>::zeros((k, k));
    for i in 0..k {
        let row = scores.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
        for j in 0..k {
            let p = T::c(targets[[i, j]]);
            let log_sm = row[j] - lse;
            if p > T::zero() {
                loss -= p * log_sm;
            }
            ds[[i, j]] = log_sm.exp() - p;
        }
    }
    let ds = ds * c;
    let d_hx = ds.dot(&hy);
    let d_hy = ds.t().dot(&hx);
    Ok(BatchLoss { loss, d_hx, d_hy })
}

/// Candidate indices by descending cosine with `query`; ties keep ascending index.
pub fn rank_responses(query: &[f32], candidates: ArrayView2<f32>) -> Vec<usize> {
    let scores: Vec<f32> = candidates.rows().into_iter().map(|c| c.iter().zip(query).map(|(a, b)| a * b).sum()).collect();
    rank_by_scores(&scores)
}

/// Indices by descending score; ties keep ascending index, NaN sorts last.
pub fn rank_by_scores(scores: &[f32]) -> Vec<usize> {
    let key = |s: f32| if s.is_nan() { f32::NEG_INFINITY } else { s };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).partial_cmp(&key(scores[a])).unwrap_or(Ordering::Equal));
    order
}
