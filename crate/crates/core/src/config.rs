//! Attention geometry and estimation hyperparameters.

use crate::error::{Error, Result};

/// Dimensions, block geometry and estimation parameters shared by every
/// operation in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnConfig {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Sequence length in tokens, always a multiple of `block_size`.
    pub seq_len: usize,
    pub block_size: usize,
    /// Estimation keeps the first token of every `stride` window.
    pub stride: usize,
    /// Number of proxy groups `g`.
    pub n_proxy_groups: usize,
    /// Cumulative probability threshold for budget estimation, in (0, 1].
    pub gamma: f64,
    pub min_budget_tokens: usize,
    /// Number of real tokens. Tokens in `valid_len..seq_len` are zero padding
    /// added at ingestion; their keys are never attended.
    pub valid_len: usize,
    /// Always select the first block column (attention sink) in every row.
    pub force_sink_block: bool,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            n_q_heads: 8,
            n_kv_heads: 2,
            head_dim: 64,
            seq_len: 4096,
            block_size: 64,
            stride: 4,
            n_proxy_groups: 1,
            gamma: 0.95,
            min_budget_tokens: 0,
            valid_len: 4096,
            force_sink_block: false,
        }
    }
}

impl AttnConfig {
    /// 32 query heads over 8 key heads, one proxy head, no minimum budget.
    pub fn llama_like(seq_len: usize) -> Self {
        AttnConfig {
            n_q_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            n_proxy_groups: 1,
            min_budget_tokens: 0,
            ..Self::default()
        }
        .with_seq_len(seq_len)
    }

    /// 28 query heads over 4 key heads, four proxy heads, 2048-token minimum budget.
    pub fn qwen_like(seq_len: usize) -> Self {
        AttnConfig {
            n_q_heads: 28,
            n_kv_heads: 4,
            head_dim: 128,
            n_proxy_groups: 4,
            min_budget_tokens: 2048,
            ..Self::default()
        }
        .with_seq_len(seq_len)
    }

    /// Sets both `seq_len` and `valid_len` (no padding).
    pub fn with_seq_len(mut self, seq_len: usize) -> Self {
        self.seq_len = seq_len;
        self.valid_len = seq_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("seq_len", self.seq_len),
            ("block_size", self.block_size),
            ("stride", self.stride),
            ("n_proxy_groups", self.n_proxy_groups),
            ("valid_len", self.valid_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_q_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.n_kv_heads.is_multiple_of(self.n_proxy_groups) {
            return Err(Error::Config(format!(
                "n_kv_heads ({}) is not a multiple of n_proxy_groups ({})",
                self.n_kv_heads, self.n_proxy_groups
            )));
        }
        if !self.block_size.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "block_size ({}) is not a multiple of stride ({})",
                self.block_size, self.stride
            )));
        }
        if !self.seq_len.is_multiple_of(self.block_size) {
            return Err(Error::Config(format!(
                "seq_len ({}) is not a multiple of block_size ({}); pad at ingestion",
                self.seq_len, self.block_size
            )));
        }
        if self.valid_len > self.seq_len || self.seq_len - self.valid_len >= self.block_size {
            return Err(Error::Config(format!(
                "valid_len ({}) must lie in the final block of seq_len ({})",
                self.valid_len, self.seq_len
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma ({}) must lie in (0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Query heads per key head.
    pub fn gqa_ratio(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.gqa_ratio()
    }

    pub fn n_blocks(&self) -> usize {
        self.seq_len / self.block_size
    }

    pub fn grid(&self) -> BlockGrid {
        BlockGrid {
            n_block_rows: self.n_blocks(),
            n_block_cols: self.n_blocks(),
            block_size: self.block_size,
        }
    }

    /// Softmax temperature `1/sqrt(d_k)`.
    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim as f32).sqrt()
    }

    /// Exclusive upper bound of the keys visible to query token `t`:
    /// causal (`s <= t`) and never a padded key.
    #[inline]
    pub fn key_limit(&self, t: usize) -> usize {
        (t + 1).min(self.valid_len)
    }
}

/// Block-level view of an `N x N` causal attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub n_block_rows: usize,
    pub n_block_cols: usize,
    pub block_size: usize,
}

impl BlockGrid {
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || !seq_len.is_multiple_of(block_size) {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} is not divisible by block size {block_size}"
            )));
        }
        let n = seq_len / block_size;
        Ok(BlockGrid { n_block_rows: n, n_block_cols: n, block_size })
    }

    pub fn seq_len(&self) -> usize {
        self.n_block_rows * self.block_size
    }

    /// Number of cells on or below the block diagonal.
    pub fn causal_cells(&self) -> usize {
        self.n_block_rows * (self.n_block_rows + 1) / 2
    }
}
