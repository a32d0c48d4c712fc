//! Architecture configuration and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults follow the full-size model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of real subwords; OOV buckets follow.
    pub vocab_size: usize,
    pub oov_buckets: usize,
    pub embed_dim: usize,
    /// Query/key projection width per attention head.
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub ff1_dim: usize,
    /// Per-layer cap on `|i - j|` for attended pairs; its length is the layer count.
    pub max_relative_attention: Vec<usize>,
    pub relative_bias: bool,
    pub max_seq_len: usize,
    /// Sizes of the two positional tables, indexed by `i mod p`.
    pub position_periods: [usize; 2],
    pub reduction_heads: usize,
    pub ff2_hidden: usize,
    pub ff2_layers: usize,
    pub ff2_skip: bool,
    pub out_dim: usize,
    pub multi_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 31_476,
            oov_buckets: 1000,
            embed_dim: 512,
            attn_dim: 64,
            attn_heads: 1,
            ff1_dim: 2048,
            max_relative_attention: vec![3, 5, 48, 48, 48, 48],
            relative_bias: true,
            max_seq_len: 60,
            position_periods: [47, 11],
            reduction_heads: 2,
            ff2_hidden: 1024,
            ff2_layers: 3,
            ff2_skip: true,
            out_dim: 512,
            multi_context: false,
        }
    }
}

impl ModelConfig {
    pub fn full_size(vocab_size: usize) -> Self {
        Self { vocab_size, ..Self::default() }
    }

    /// Desk-scale model: six blocks at width 128.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 128,
            attn_dim: 32,
            ff1_dim: 256,
            ff2_hidden: 256,
            out_dim: 128,
            ..Self::default()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.max_relative_attention.len()
    }

    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + self.oov_buckets
    }

    /// Width of the reduced sequence representation `r`.
    pub fn reduced_dim(&self) -> usize {
        self.reduction_heads * self.embed_dim
    }

    pub fn value_dim(&self) -> usize {
        self.embed_dim / self.attn_heads
    }

    /// Relative-bias vector length, `2 * max_seq_len - 1`.
    pub fn relative_bias_len(&self) -> usize {
        2 * self.max_seq_len - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.embed_dim == 0 || self.attn_dim == 0 || self.ff1_dim == 0 || self.out_dim == 0 || self.ff2_hidden == 0 {
            return fail("all layer widths must be positive");
        }
        if self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
            return fail("embed_dim must be divisible by attn_heads");
        }
        if self.max_relative_attention.is_empty() {
            return fail("at least one transformer block is required");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be positive");
        }
        if self.position_periods.iter().any(|&p| p == 0) {
            return fail("positional periods must be positive");
        }
        if self.reduction_heads == 0 {
            return fail("at least one reduction head is required");
        }
        if self.oov_buckets == 0 {
            return fail("at least one OOV bucket is required");
        }
        Ok(())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        ablation.apply(&mut self);
        self
    }
}

/// Single-mechanism variants of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// A: eight attention heads instead of one.
    MultiHeadAttention,
    /// B: no learned relative-position bias.
    NoRelativeBias,
    /// C: every layer uses the widest attention cap.
    UniformAttentionCap,
    /// D: a single OOV bucket.
    SingleOovBucket,
    /// E: one reduction head instead of two.
    SingleHeadReduction,
    /// F: no skip connections in the projection heads.
    NoProjectionSkip,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::MultiHeadAttention,
        Ablation::NoRelativeBias,
        Ablation::UniformAttentionCap,
        Ablation::SingleOovBucket,
        Ablation::SingleHeadReduction,
        Ablation::NoProjectionSkip,
    ];

    pub fn letter(self) -> char {
        match self {
            Ablation::MultiHeadAttention => 'A',
            Ablation::NoRelativeBias => 'B',
            Ablation::UniformAttentionCap => 'C',
            Ablation::SingleOovBucket => 'D',
            Ablation::SingleHeadReduction => 'E',
            Ablation::NoProjectionSkip => 'F',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.letter() == c.to_ascii_uppercase())
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            Ablation::MultiHeadAttention => cfg.attn_heads = 8,
            Ablation::NoRelativeBias => cfg.relative_bias = false,
            Ablation::UniformAttentionCap => {
                let widest = cfg.max_relative_attention.iter().copied().max().unwrap_or(0);
                cfg.max_relative_attention.iter_mut().for_each(|c| *c = widest);
            }
            Ablation::SingleOovBucket => cfg.oov_buckets = 1,
            Ablation::SingleHeadReduction => cfg.reduction_heads = 1,
            Ablation::NoProjectionSkip => cfg.ff2_skip = false,
        }
    }
}
