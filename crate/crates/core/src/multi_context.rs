//! Extra-context features and the three-part multi-context objective.
//!
//! The extra context `z` is the earlier dialogue turns joined newest first.
//! It runs through the shared transformer tower and its own projection head
//! to give `h_z`. The combined context `h_xz` is the renormalized mean of
//! `h_x` and `h_z`; it is the encoding used when ranking at evaluation time.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::{l2_normalize_rows, l2_normalize_rows_backward, Scalar};
use crate::objective::{batch_loss, ScoreConfig};

pub const MAX_EXTRA_CONTEXTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiContextExample {
    pub immediate_context: String,
    /// Earlier turns, oldest first.
    pub extra_contexts: Vec<String>,
    pub response: String,
}

/// How earlier turns are joined into one string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextJoin {
    /// Single spaces.
    #[default]
    Plain,
    /// Each turn prefixed with its recency index `0..=9`.
    DigitPrefixed,
}

/// Join turns (given oldest first) newest first, keeping at most the ten most recent.
pub fn build_extra_context<S: AsRef<str>>(turns_oldest_first: &[S], join: ContextJoin) -> String {
    let newest_first = turns_oldest_first.iter().rev().take(MAX_EXTRA_CONTEXTS);
    let parts: Vec<String> = match join {
        ContextJoin::Plain => newest_first.map(|t| t.as_ref().to_string()).collect(),
        ContextJoin::DigitPrefixed => newest_first.enumerate().map(|(i, t)| format!("{i} {}", t.as_ref())).collect(),
    };
    parts.join(" ")
}

/// Combined-context encodings: normalized mean of `h_x` and `h_z`.
pub fn combine_contexts<T: Scalar>(hx: ArrayView2<T>, hz: ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let mean = (&hx + &hz) * T::c(0.5);
    l2_normalize_rows(mean.view())
}

/// Weights `[immediate, extra, combined]` for the sub-objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubObjectiveWeights(pub [f64; 3]);

impl Default for SubObjectiveWeights {
    fn default() -> Self {
        Self([1.0, 1.0, 1.0])
    }
}

#[derive(Debug, Clone)]
pub struct MultiContextLoss<T> {
    pub total: T,
    /// Unweighted sub-losses: immediate, extra, combined.
    pub parts: [T; 3],
    pub d_hx: Array2<T>,
    pub d_hz: Array2<T>,
    pub d_hy: Array2<T>,
}

pub fn multi_context_loss<T: Scalar>(
    hx: ArrayView2<T>,
    hz: ArrayView2<T>,
    hy: ArrayView2<T>,
    step: u64,
    cfg: &ScoreConfig,
    weights: SubObjectiveWeights,
) -> Result<MultiContextLoss<T>> {
    let [w1, w2, w3] = weights.0.map(T::c);
    let l1 = batch_loss(hx, hy, step, cfg)?;
    let l2 = batch_loss(hz, hy, step, cfg)?;
    let (hxz, norms) = combine_contexts(hx, hz);
    let l3 = batch_loss(hxz.view(), hy, step, cfg)?;

    let dmean = l2_normalize_rows_backward((l3.d_hx * w3).view(), hxz.view(), &norms) * T::c(0.5);
    let d_hx = l1.d_hx * w1 + &dmean;
    let d_hz = l2.d_hx * w2 + &dmean;
    let d_hy = l1.d_hy * w1 + l2.d_hy * w2 + l3.d_hy * w3;
    Ok(MultiContextLoss {
        total: w1 * l1.loss + w2 * l2.loss + w3 * l3.loss,
        parts: [l1.loss, l2.loss, l3.loss],
        d_hx,
        d_hz,
        d_hy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn unit_rows(k: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = Array2::from_shape_fn((k, d), |_| rng.random::<f64>() - 0.5);
        l2_normalize_rows(m.view()).0
    }

    #[test]
    fn joins_newest_first() {
        assert_eq!(build_extra_context(&["t1", "t2", "t3"], ContextJoin::Plain), "t3 t2 t1");
        assert_eq!(build_extra_context::<&str>(&[], ContextJoin::Plain), "");
        assert_eq!(build_extra_context(&["t1", "t2", "t3"], ContextJoin::DigitPrefixed), "0 t3 1 t2 2 t1");
        let many: Vec<String> = (0..14).map(|i| format!("m{i}")).collect();
        let z = build_extra_context(&many, ContextJoin::Plain);
        assert_eq!(z.split(' ').count(), 10);
        assert!(z.starts_with("m13") && z.ends_with("m4"));
    }

    #[test]
    fn degenerate_weights_reduce_to_single_context() {
        let cfg = ScoreConfig { dim: 8, anneal_steps: 100, smoothing: 0.2 };
        let (hx, hz, hy) = (unit_rows(4, 8, 1), unit_rows(4, 8, 2), unit_rows(4, 8, 3));
        let m = multi_context_loss(hx.view(), hz.view(), hy.view(), 7, &cfg, SubObjectiveWeights([1.0, 0.0, 0.0])).unwrap();
        let s = batch_loss(hx.view(), hy.view(), 7, &cfg).unwrap();
        assert_eq!(m.total, s.loss);
        assert_eq!(m.d_hy, s.d_hy);
        assert!(m.d_hz.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn equal_contexts_average_to_themselves() {
        let hx = unit_rows(3, 5, 9);
        let (hxz, _) = combine_contexts(hx.view(), hx.view());
        for (a, b) in hxz.iter().zip(hx.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_difference() {
        let cfg = ScoreConfig { dim: 8, anneal_steps: 10, smoothing: 0.2 };
        let w = SubObjectiveWeights([0.5, 1.0, 2.0]);
        let (hx, hz, hy) = (unit_rows(4, 8, 11), unit_rows(4, 8, 12), unit_rows(4, 8, 13));
        let m = multi_context_loss(hx.view(), hz.view(), hy.view(), 3, &cfg, w).unwrap();
        let f = |x: &Array2<f64>, z: &Array2<f64>| multi_context_loss(x.view(), z.view(), hy.view(), 3, &cfg, w).unwrap().total;
        let eps = 1e-6;
        for (i, j) in [(0, 0), (1, 4), (3, 7)] {
            let (mut p, mut q) = (hx.clone(), hx.clone());
            p[[i, j]] += eps;
            q[[i, j]] -= eps;
            let fd = (f(&p, &hz) - f(&q, &hz)) / (2.0 * eps);
            assert!((fd - m.d_hx[[i, j]]).abs() < 1e-7);
            let (mut p, mut q) = (hz.clone(), hz.clone());
            p[[i, j]] += eps;
            q[[i, j]] -= eps;
            let fd = (f(&hx, &p) - f(&hx, &q)) / (2.0 * eps);
            assert!((fd - m.d_hz[[i, j]]).abs() < 1e-7);
        }
    }
}
