//! Per-head block budgets from the attention of the final query block.
//!
//! The last `b` query rows attend over the full causal key range; their
//! probabilities are averaged over rows and within each key block, sorted
//! descending, and the head's budget ratio is the smallest number of blocks
//! whose cumulative mass reaches `gamma`, divided by the number of blocks.

use rayon::prelude::*;

use crate::config::AttnConfig;
use crate::dense::{row_logits, softmax_in_place};
use crate::error::{Error, Result};
use crate::mask::min_budget_floor;
use crate::tensor::{HeadTensor, Role};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadBudget {
    /// Fraction of block columns this head may select, in `(0, 1]`.
    pub ratio: f64,
    /// Number of blocks needed to reach `gamma` on the final query block.
    pub blocks: usize,
    /// Minimum selected blocks per row from `min_budget_tokens`.
    pub blocks_per_row_floor: usize,
}

/// Smallest count of top blocks whose share of the total reaches `gamma`.
///
/// Blocks are ranked by descending score, ties to the lower index. Returns
/// `(count, count / scores.len())`.
pub fn budget_from_block_scores(scores: &[f64], gamma: f64) -> Result<(usize, f64)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma ({gamma}) must lie in (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::Shape("no block scores to rank".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::Validation(format!("block score {bad} is not a finite non-negative value")));
    }
    let mut sorted = scores.to_vec();
    // stable sort keeps lower indices first among ties
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    let target = gamma * total;
    let mut prefix = 0.0;
    let mut count = sorted.len();
    for (i, s) in sorted.iter().enumerate() {
        prefix += s;
        if prefix >= target {
            count = i + 1;
            break;
        }
    }
    Ok((count, count as f64 / scores.len() as f64))
}

/// Block-level mean attention of the final query block of `head`: one value
/// per key block, averaged over the query rows and over the tokens in the block.
pub fn last_block_scores(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize) -> Vec<f64> {
    let (n, b, d) = (cfg.seq_len, cfg.block_size, cfg.head_dim);
    let nb = cfg.n_blocks();
    let k_head = k.head(cfg.kv_head_of(head));
    let scale = cfg.scale();
    let rows: Vec<usize> = (n - b..n).filter(|&t| t < cfg.valid_len).collect();
    let mut acc = vec![0.0f64; nb];
    let mut buf = vec![0.0f32; n];
    for &t in &rows {
        let limit = cfg.key_limit(t);
        row_logits(q.row(head, t), k_head, d, limit, scale, &mut buf);
        softmax_in_place(&mut buf[..limit]);
        for (s, &p) in buf[..limit].iter().enumerate() {
            acc[s / b] += p as f64;
        }
    }
    let denom = (rows.len() * b) as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    acc
}

/// Budget of one query head from its own queries and its GQA-mapped keys.
pub fn estimate_head_budget(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize) -> Result<HeadBudget> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    if head >= cfg.n_q_heads {
        return Err(Error::Shape(format!("head {head} out of range for {} query heads", cfg.n_q_heads)));
    }
    let scores = last_block_scores(q, k, cfg, head);
    // softmax mass is never truly zero, so full coverage means every block
    // even when some scores underflowed
    let (blocks, ratio) =
        if cfg.gamma == 1.0 { (scores.len(), 1.0) } else { budget_from_block_scores(&scores, cfg.gamma)? };
    Ok(HeadBudget { ratio, blocks, blocks_per_row_floor: min_budget_floor(cfg) })
}

/// One budget per query head, in head order.
pub fn budgets_for_all_heads(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig) -> Result<Vec<HeadBudget>> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    (0..cfg.n_q_heads).into_par_iter().map(|h| estimate_head_budget(q, k, cfg, h)).collect()
}

/// Query-key MACs spent by budget estimation over all heads.
pub fn budget_macs(cfg: &AttnConfig) -> u64 {
    let rows = (cfg.seq_len - cfg.block_size..cfg.seq_len).filter(|&t| t < cfg.valid_len);
    let per_head: u64 = rows.map(|t| (cfg.key_limit(t) * cfg.head_dim) as u64).sum();
    per_head * cfg.n_q_heads as u64
}
