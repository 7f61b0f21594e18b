//! Dense causal attention oracle, exact probability maps and block pooling.

use rayon::prelude::*;

use crate::config::{AttnConfig, BlockGrid};
use crate::error::{Error, Result};
use crate::tensor::{dot, HeadTensor, Role};

/// Largest sequence for which an `N x N` probability matrix is materialized.
pub const DENSE_PROBS_LIMIT: usize = 16384;

/// Multiply-accumulate counts split by attention stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCount {
    pub qk: u64,
    pub pv: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.qk + self.pv
    }
}

/// Writes `scale * q . k_s` for `s < limit` into `out[..limit]`.
#[inline]
pub(crate) fn row_logits(q_row: &[f32], k_head: &[f32], dim: usize, limit: usize, scale: f32, out: &mut [f32]) {
    for (s, o) in out[..limit].iter_mut().enumerate() {
        *o = dot(q_row, &k_head[s * dim..(s + 1) * dim]) * scale;
    }
}

/// In-place softmax with max subtraction.
#[inline]
pub(crate) fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

fn check_qkv(q: &HeadTensor, k: &HeadTensor, v: Option<&HeadTensor>, cfg: &AttnConfig) -> Result<()> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    if let Some(v) = v {
        v.check_role(cfg, Role::Value)?;
    }
    Ok(())
}

/// Exact causal multi-head attention with GQA head mapping.
pub fn dense_causal_attention(q: &HeadTensor, k: &HeadTensor, v: &HeadTensor, cfg: &AttnConfig) -> Result<HeadTensor> {
    dense_causal_attention_counted(q, k, v, cfg).map(|(out, _)| out)
}

/// [`dense_causal_attention`] plus the multiply-accumulates it performed.
pub fn dense_causal_attention_counted(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    cfg: &AttnConfig,
) -> Result<(HeadTensor, MacCount)> {
    check_qkv(q, k, Some(v), cfg)?;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let scale = cfg.scale();
    let mut out = HeadTensor::zeros(cfg.n_q_heads, n, d);
    let counts: Vec<MacCount> = out
        .data_mut()
        .par_chunks_mut(n * d)
        .enumerate()
        .map(|(h, out_head)| {
            let kv = cfg.kv_head_of(h);
            let (k_head, v_head) = (k.head(kv), v.head(kv));
            let mut probs = vec![0.0f32; n];
            let mut macs = MacCount::default();
            for t in 0..n {
                let limit = cfg.key_limit(t);
                row_logits(q.row(h, t), k_head, d, limit, scale, &mut probs);
                softmax_in_place(&mut probs[..limit]);
                let o = &mut out_head[t * d..(t + 1) * d];
                for (s, &p) in probs[..limit].iter().enumerate() {
                    for (acc, &vv) in o.iter_mut().zip(&v_head[s * d..(s + 1) * d]) {
                        *acc += p * vv;
                    }
                }
                macs.qk += (limit * d) as u64;
                macs.pv += (limit * d) as u64;
            }
            macs
        })
        .collect();
    let macs = counts.iter().fold(MacCount::default(), |a, c| MacCount { qk: a.qk + c.qk, pv: a.pv + c.pv });
    Ok((out, macs))
}

/// Row-major `N x N` causal attention probabilities of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    n: usize,
    data: Vec<f32>,
}

impl ProbMatrix {
    pub fn from_rows(n: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("{} values do not form a {n}x{n} matrix", data.len())));
        }
        Ok(ProbMatrix { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        ProbMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f32 {
        self.data[t * self.n + s]
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n..(t + 1) * self.n]
    }
}

/// Calls `f(t, probs)` for every query row of `head`, where `probs` holds the
/// softmax over the visible keys `0..cfg.key_limit(t)`.
pub(crate) fn for_each_prob_row(
    q: &HeadTensor,
    k: &HeadTensor,
    cfg: &AttnConfig,
    head: usize,
    mut f: impl FnMut(usize, &[f32]),
) {
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let k_head = k.head(cfg.kv_head_of(head));
    let scale = cfg.scale();
    let mut buf = vec![0.0f32; n];
    for t in 0..n {
        let limit = cfg.key_limit(t);
        row_logits(q.row(head, t), k_head, d, limit, scale, &mut buf);
        softmax_in_place(&mut buf[..limit]);
        f(t, &buf[..limit]);
    }
}

/// Exact causal attention probabilities of one query head.
pub fn dense_attention_probs(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize) -> Result<ProbMatrix> {
    check_qkv(q, k, None, cfg)?;
    if head >= cfg.n_q_heads {
        return Err(Error::Shape(format!("head {head} out of range for {} query heads", cfg.n_q_heads)));
    }
    let n = cfg.seq_len;
    if n > DENSE_PROBS_LIMIT {
        return Err(Error::Capacity { seq_len: n, limit: DENSE_PROBS_LIMIT });
    }
    let mut data = vec![0.0f32; n * n];
    for_each_prob_row(q, k, cfg, head, |t, p| data[t * n..t * n + p.len()].copy_from_slice(p));
    Ok(ProbMatrix { n, data })
}

/// Probability maps of every query head, computed in parallel.
pub fn dense_attention_probs_all(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig) -> Result<Vec<ProbMatrix>> {
    (0..cfg.n_q_heads).into_par_iter().map(|h| dense_attention_probs(q, k, cfg, h)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
    Sum,
}

/// Block-level importance grid. Cells strictly above the block diagonal are
/// invalid and hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreMap {
    n_rows: usize,
    n_cols: usize,
    scores: Vec<f32>,
    valid: Vec<bool>,
}

impl BlockScoreMap {
    /// A map of zeros with the causal (lower-triangular) cells marked valid.
    pub fn causal_zeros(n: usize) -> Self {
        let mut valid = vec![false; n * n];
        for m in 0..n {
            for c in 0..=m {
                valid[m * n + c] = true;
            }
        }
        BlockScoreMap { n_rows: n, n_cols: n, scores: vec![0.0; n * n], valid }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f32 {
        self.scores[m * self.n_cols + n]
    }

    #[inline]
    pub fn is_valid(&self, m: usize, n: usize) -> bool {
        self.valid[m * self.n_cols + n]
    }

    pub fn row(&self, m: usize) -> &[f32] {
        &self.scores[m * self.n_cols..(m + 1) * self.n_cols]
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    #[inline]
    pub(crate) fn set(&mut self, m: usize, n: usize, value: f32) {
        self.scores[m * self.n_cols + n] = value;
    }

    /// Columns of row `m` ordered by descending score, ties by lower column;
    /// only valid cells are returned.
    pub fn ranked_row(&self, m: usize) -> Vec<usize> {
        let row = self.row(m);
        let mut cols: Vec<usize> = (0..self.n_cols).filter(|&c| self.is_valid(m, c)).collect();
        cols.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        cols
    }
}

/// Pools an `N x N` probability matrix into `b x b` blocks.
pub fn block_reduce(probs: &ProbMatrix, grid: BlockGrid, mode: Reduce) -> Result<BlockScoreMap> {
    let n = probs.n();
    let b = grid.block_size;
    if b == 0 || !n.is_multiple_of(b) || grid.seq_len() != n {
        return Err(Error::Shape(format!("{n}x{n} matrix does not tile into blocks of {b}")));
    }
    let nb = n / b;
    let mut map = BlockScoreMap::causal_zeros(nb);
    for m in 0..nb {
        for c in 0..=m {
            let mut max = 0.0f32;
            let mut sum = 0.0f32;
            for t in m * b..(m + 1) * b {
                for &p in &probs.row(t)[c * b..(c + 1) * b] {
                    max = max.max(p);
                    sum += p;
                }
            }
            let value = match mode {
                Reduce::Max => max,
                Reduce::Sum => sum,
                Reduce::Mean => sum / (b * b) as f32,
            };
            map.set(m, c, value);
        }
    }
    Ok(map)
}
