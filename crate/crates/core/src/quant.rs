//! Quantization-aware mixed precision.
//!
//! The optimizer only ever touches the 32-bit shadows in a [`ParamStore`].
//! Before each forward pass the shadows are rendered: network parameters are
//! rounded to binary16 and embedding tables go through 8-bit codes over a
//! dynamic [`QuantRange`]. Gradients computed at the rendered values are
//! applied to the shadows unchanged (straight-through).

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, PrecisionClass, Weights};

pub const QUANT_LEVELS: u32 = 256;
pub const LOSS_SCALE: f32 = 128.0;
pub const MAX_CONSECUTIVE_SKIPS: u32 = 50;
pub const DEFAULT_RANGE_UPDATE_PERIOD: u64 = 1000;
/// Lower bound on the growth margin around an embedding range.
pub const MIN_RANGE_MARGIN: f32 = 0.01;
/// Growth margin as a fraction of the observed range.
pub const RANGE_MARGIN_FRACTION: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantRange {
    pub lo: f32,
    pub hi: f32,
}

impl QuantRange {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::format(format!("invalid quantization range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn step(&self) -> f64 {
        (self.hi as f64 - self.lo as f64) / (QUANT_LEVELS - 1) as f64
    }

    /// Range around `values` with the standard growth margin on both sides.
    pub fn covering(values: &[f32]) -> Self {
        let (lo, hi) = min_max(values);
        let m = growth_margin(lo, hi);
        Self { lo: lo - m, hi: hi + m }
    }

    pub fn code(&self, v: f32) -> (u8, bool) {
        let t = (v as f64 - self.lo as f64) * (QUANT_LEVELS - 1) as f64 / (self.hi as f64 - self.lo as f64);
        let r = t.round_ties_even();
        if r < 0.0 {
            (0, true)
        } else if r > 255.0 {
            (255, true)
        } else {
            (r as u8, v < self.lo || v > self.hi)
        }
    }

    pub fn value(&self, code: u8) -> f32 {
        (self.lo as f64 + code as f64 * self.step()) as f32
    }
}

fn min_max(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `max(0.1 * (hi - lo), 0.01)`.
pub fn growth_margin(lo: f32, hi: f32) -> f32 {
    (RANGE_MARGIN_FRACTION * (hi - lo)).max(MIN_RANGE_MARGIN)
}

/// Grow (or re-center) the range when the observed extremes leave less than
/// one margin of headroom on either side; otherwise keep it.
pub fn update_quant_range(range: QuantRange, observed_lo: f32, observed_hi: f32) -> QuantRange {
    let m = growth_margin(observed_lo, observed_hi);
    if observed_lo - m < range.lo || observed_hi + m > range.hi {
        QuantRange { lo: observed_lo - m, hi: observed_hi + m }
    } else {
        range
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTable {
    pub range: QuantRange,
    pub codes: Vec<u8>,
}

/// Codes for `values`; out-of-range values are clamped and counted.
pub fn quantize_embeddings(values: &[f32], range: QuantRange) -> (QuantizedTable, usize) {
    let mut clamped = 0;
    let codes = values
        .iter()
        .map(|&v| {
            let (c, clip) = range.code(v);
            clamped += clip as usize;
            c
        })
        .collect();
    (QuantizedTable { range, codes }, clamped)
}

pub fn dequantize(table: &QuantizedTable) -> Vec<f32> {
    table.codes.iter().map(|&c| table.range.value(c)).collect()
}

pub fn to_f16_bits(values: &[f32]) -> Vec<u16> {
    values.iter().map(|&v| f16::from_f32(v).to_bits()).collect()
}

pub fn from_f16_bits(bits: &[u16]) -> Vec<f32> {
    bits.iter().map(|&b| f16::from_bits(b).to_f32()).collect()
}

/// Embedding ranges and the clamp counter, owned by the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    /// One entry per tensor; `Some` for 8-bit tables.
    pub ranges: Vec<Option<QuantRange>>,
    pub clamped_since_update: usize,
}

impl QuantState {
    pub fn new(store: &ParamStore) -> Self {
        let ranges = store
            .tensors()
            .iter()
            .map(|t| (t.class == PrecisionClass::Embedding8).then(|| QuantRange::covering(&t.data)))
            .collect();
        Self { ranges, clamped_since_update: 0 }
    }

    pub fn range(&self, id: ParamId) -> Option<QuantRange> {
        self.ranges[id.0]
    }

    /// Refresh every range from the current shadows.
    pub fn update(&mut self, store: &ParamStore) {
        for (r, t) in self.ranges.iter_mut().zip(store.tensors()) {
            if let Some(range) = r {
                let (lo, hi) = min_max(&t.data);
                *range = update_quant_range(*range, lo, hi);
            }
        }
        self.clamped_since_update = 0;
    }

    /// The quantized rendering used by forward and backward passes.
    pub fn render(&mut self, store: &ParamStore) -> Weights<f32> {
        let mut data = Vec::with_capacity(store.len());
        for (t, range) in store.tensors().iter().zip(&self.ranges) {
            data.push(match (t.class, range) {
                (PrecisionClass::Embedding8, Some(range)) => {
                    let (table, clamped) = quantize_embeddings(&t.data, *range);
                    self.clamped_since_update += clamped;
                    dequantize(&table)
                }
                (PrecisionClass::Param16 | PrecisionClass::Activation16, _) => {
                    from_f16_bits(&to_f16_bits(&t.data))
                }
                _ => t.data.clone(),
            });
        }
        Weights::from_parts(store.tensors().iter().map(|t| t.shape.clone()).collect(), data)
    }
}

/// What to do with a step's unscaled gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepAction {
    Apply,
    Skip,
}

/// Fixed loss scaling with skip-on-overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f32,
    pub max_consecutive_skips: u32,
    pub consecutive_skips: u32,
    pub total_skips: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self::new(LOSS_SCALE)
    }
}

impl LossScaler {
    pub fn new(scale: f32) -> Self {
        Self { scale, max_consecutive_skips: MAX_CONSECUTIVE_SKIPS, consecutive_skips: 0, total_skips: 0 }
    }

    /// Divide by the scale and decide whether the step is usable. Errors once
    /// the consecutive-skip budget is exhausted.
    pub fn unscale(&mut self, grads: &mut Weights<f32>) -> Result<StepAction> {
        grads.scale(1.0 / self.scale);
        if grads.all_finite() {
            self.consecutive_skips = 0;
            return Ok(StepAction::Apply);
        }
        self.consecutive_skips += 1;
        self.total_skips += 1;
        if self.consecutive_skips > self.max_consecutive_skips {
            return Err(Error::Divergence(format!(
                "{} consecutive steps with non-finite gradients",
                self.consecutive_skips
            )));
        }
        Ok(StepAction::Skip)
    }
}
