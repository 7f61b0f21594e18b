//! `[head][token][dim]` f32 activations.

use crate::config::AttnConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor {
    n_heads: usize,
    seq_len: usize,
    dim: usize,
    data: Vec<f32>,
}

/// Which projection a tensor holds; decides the expected head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Key,
    Value,
}

impl HeadTensor {
    pub fn new(n_heads: usize, seq_len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_heads * seq_len * dim {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {n_heads}x{seq_len}x{dim}",
                data.len()
            )));
        }
        Ok(HeadTensor { n_heads, seq_len, dim, data })
    }

    pub fn zeros(n_heads: usize, seq_len: usize, dim: usize) -> Self {
        HeadTensor { n_heads, seq_len, dim, data: vec![0.0; n_heads * seq_len * dim] }
    }

    /// Builds a tensor element by element from `f(head, token, dim)`.
    pub fn from_fn(n_heads: usize, seq_len: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(n_heads * seq_len * dim);
        for h in 0..n_heads {
            for t in 0..seq_len {
                for d in 0..dim {
                    data.push(f(h, t, d));
                }
            }
        }
        HeadTensor { n_heads, seq_len, dim, data }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn head(&self, h: usize) -> &[f32] {
        let len = self.seq_len * self.dim;
        &self.data[h * len..(h + 1) * len]
    }

    pub fn head_mut(&mut self, h: usize) -> &mut [f32] {
        let len = self.seq_len * self.dim;
        &mut self.data[h * len..(h + 1) * len]
    }

    #[inline]
    pub fn row(&self, h: usize, t: usize) -> &[f32] {
        let start = (h * self.seq_len + t) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, h: usize, t: usize) -> &mut [f32] {
        let start = (h * self.seq_len + t) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn check_finite(&self, name: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => {
                let (h, rest) = (i / (self.seq_len * self.dim), i % (self.seq_len * self.dim));
                Err(Error::Validation(format!(
                    "{name} holds a non-finite value at head {h}, token {}, dim {}",
                    rest / self.dim,
                    rest % self.dim
                )))
            }
        }
    }

    /// Checks shape against `cfg` for the given role and that every value is finite.
    pub fn check_role(&self, cfg: &AttnConfig, role: Role) -> Result<()> {
        let (name, heads) = match role {
            Role::Query => ("Q", cfg.n_q_heads),
            Role::Key => ("K", cfg.n_kv_heads),
            Role::Value => ("V", cfg.n_kv_heads),
        };
        if self.n_heads != heads || self.seq_len != cfg.seq_len || self.dim != cfg.head_dim {
            return Err(Error::Shape(format!(
                "{name} is {}x{}x{}, expected {heads}x{}x{}",
                self.n_heads, self.seq_len, self.dim, cfg.seq_len, cfg.head_dim
            )));
        }
        self.check_finite(name)
    }

    /// Zero-pads the token axis up to `seq_len`.
    pub fn padded_to(&self, seq_len: usize) -> HeadTensor {
        if seq_len <= self.seq_len {
            return self.clone();
        }
        let mut out = HeadTensor::zeros(self.n_heads, seq_len, self.dim);
        for h in 0..self.n_heads {
            let src = self.head(h);
            out.head_mut(h)[..src.len()].copy_from_slice(src);
        }
        out
    }

    /// Keeps the first `seq_len` tokens of every head.
    pub fn truncated_to(&self, seq_len: usize) -> HeadTensor {
        let seq_len = seq_len.min(self.seq_len);
        let mut out = HeadTensor::zeros(self.n_heads, seq_len, self.dim);
        for h in 0..self.n_heads {
            let n = seq_len * self.dim;
            out.head_mut(h).copy_from_slice(&self.head(h)[..n]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &HeadTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Zero-pads Q, K and V so the token count is a multiple of `block_size` and
/// returns the padded tensors with the config to use for them.
pub fn pad_to_blocks(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    cfg: &AttnConfig,
) -> (HeadTensor, HeadTensor, HeadTensor, AttnConfig) {
    let valid_len = q.seq_len();
    let padded = valid_len.div_ceil(cfg.block_size) * cfg.block_size;
    let mut out_cfg = *cfg;
    out_cfg.seq_len = padded;
    out_cfg.valid_len = valid_len;
    (q.padded_to(padded), k.padded_to(padded), v.padded_to(padded), out_cfg)
}
