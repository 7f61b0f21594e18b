//! End-to-end runs: scores, budgets, masks, sparse execution and metrics
//! against the dense oracle.

use rayon::prelude::*;

use crate::budget::{budgets_for_all_heads, HeadBudget};
use crate::comparators::{per_head_scores, EstimatorKind};
use crate::config::AttnConfig;
use crate::dense::{dense_causal_attention_counted, BlockScoreMap};
use crate::error::{Error, Result};
use crate::mask::{build_mask, build_mask_from_maps, mask_sparsity, BlockMask};
use crate::proxy::{estimate_proxy_scores, estimation_cost_ratio};
use crate::sparse::{block_sparse_attention_ordered, oracle_recall, BlockOrder, SparseAttnStats};
use crate::tensor::HeadTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub estimator: EstimatorKind,
    /// Anti-diagonal sampling stride for [`EstimatorKind::Antidiagonal`].
    pub antidiagonal_stride: usize,
    pub order: BlockOrder,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { estimator: EstimatorKind::Proxy, antidiagonal_stride: 8, order: BlockOrder::Ascending }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMetrics {
    pub head: usize,
    pub budget: HeadBudget,
    pub sparsity: f64,
    pub recall: f64,
    pub max_abs_err: f64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub sparse_macs: u64,
    pub dense_macs: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub estimator: EstimatorKind,
    pub cfg: AttnConfig,
    pub heads: Vec<HeadMetrics>,
    pub mask: BlockMask,
    pub output: HeadTensor,
    pub dense_output: HeadTensor,
    pub stats: SparseAttnStats,
    /// Query-key MACs of the score estimation stage.
    pub estimation_macs: u64,
    /// Query-key MACs of dense causal attention over all heads.
    pub dense_qk_macs: u64,
}

impl PipelineResult {
    /// Counted estimation MACs over dense query-key MACs.
    pub fn estimation_cost(&self) -> f64 {
        self.estimation_macs as f64 / self.dense_qk_macs as f64
    }

    pub fn mean_recall(&self) -> f64 {
        self.heads.iter().map(|h| h.recall).sum::<f64>() / self.heads.len() as f64
    }

    pub fn mean_sparsity(&self) -> f64 {
        self.heads.iter().map(|h| h.sparsity).sum::<f64>() / self.heads.len() as f64
    }
}

/// Query-key MACs an estimator spends on scores, for the kinds whose cost is
/// not counted while running.
pub fn estimation_macs(kind: EstimatorKind, cfg: &AttnConfig, antidiagonal_stride: usize) -> u64 {
    let (nb, d, b) = (cfg.n_blocks() as u64, cfg.head_dim as u64, cfg.block_size);
    let heads = cfg.n_q_heads as u64;
    match kind {
        EstimatorKind::Proxy => {
            // strided proxy over pooled groups
            let s = cfg.stride;
            let keys: u64 = (0..cfg.seq_len)
                .step_by(s)
                .map(|t| cfg.key_limit(t).div_ceil(s) as u64)
                .sum();
            keys * d * cfg.n_proxy_groups as u64
        }
        EstimatorKind::SeqAvgpool => heads * nb * (nb + 1) / 2 * d,
        EstimatorKind::Antidiagonal => {
            let st = antidiagonal_stride;
            let keys: u64 = (0..cfg.seq_len)
                .map(|t| {
                    let r = (st - 1 + st - (t % b) % st) % st;
                    let limit = cfg.key_limit(t);
                    if r < limit { ((limit - 1 - r) / st + 1) as u64 } else { 0 }
                })
                .sum();
            keys * d * heads
        }
        EstimatorKind::OracleMax | EstimatorKind::OracleSum => {
            (0..cfg.seq_len).map(|t| cfg.key_limit(t) as u64).sum::<u64>() * d * heads
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 && bb == 0.0 {
        1.0
    } else if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Per-head `(max_abs_err, mean_cosine, min_cosine)` over the real query rows.
fn output_errors(sparse: &HeadTensor, dense: &HeadTensor, valid_len: usize, rows: std::ops::Range<usize>) -> Vec<(f64, f64, f64)> {
    (0..sparse.n_heads())
        .into_par_iter()
        .map(|h| {
            let rows = rows.start.min(valid_len)..rows.end.min(valid_len);
            let count = rows.len().max(1) as f64;
            let (mut max_err, mut sum_cos, mut min_cos) = (0.0f64, 0.0f64, f64::INFINITY);
            for t in rows {
                let (a, b) = (sparse.row(h, t), dense.row(h, t));
                let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
                max_err = max_err.max(err as f64);
                let c = cosine(a, b);
                sum_cos += c;
                min_cos = min_cos.min(c);
            }
            (max_err, sum_cos / count, if min_cos.is_finite() { min_cos } else { 1.0 })
        })
        .collect()
}

/// Scores and masks only, without executing attention.
pub fn select_mask(
    q: &HeadTensor,
    k: &HeadTensor,
    cfg: &AttnConfig,
    opts: &PipelineOptions,
) -> Result<(BlockMask, Vec<HeadBudget>, u64)> {
    let budgets = budgets_for_all_heads(q, k, cfg)?;
    let (mask, est_macs) = match opts.estimator {
        EstimatorKind::Proxy => {
            let scores = estimate_proxy_scores(q, k, cfg)?;
            (build_mask(&scores, &budgets, cfg)?, scores.macs)
        }
        kind => {
            let maps = per_head_scores(kind, q, k, cfg, opts.antidiagonal_stride)?;
            let refs: Vec<&BlockScoreMap> = maps.iter().collect();
            (build_mask_from_maps(&refs, &budgets, cfg)?, estimation_macs(kind, cfg, opts.antidiagonal_stride))
        }
    };
    Ok((mask, budgets, est_macs))
}

/// Runs the full pipeline and compares against dense attention.
pub fn run_pipeline(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    cfg: &AttnConfig,
    opts: &PipelineOptions,
) -> Result<PipelineResult> {
    let (mask, budgets, estimation_macs) = select_mask(q, k, cfg, opts)?;
    mask.check_causal_and_diagonal()?;
    let (output, stats) = block_sparse_attention_ordered(q, k, v, &mask, cfg, opts.order)?;
    let (dense_output, dense_macs) = dense_causal_attention_counted(q, k, v, cfg)?;
    let recall = oracle_recall(q, k, &mask, cfg)?;
    let errors = output_errors(&output, &dense_output, cfg.valid_len, 0..cfg.seq_len);
    let sparsity = mask_sparsity(&mask);
    let (b, d) = (cfg.block_size as u64, cfg.head_dim as u64);
    let per_head_dense = dense_macs.total() / cfg.n_q_heads as u64;

    let heads = (0..cfg.n_q_heads)
        .map(|h| {
            let (max_abs_err, mean_cosine, min_cosine) = errors[h];
            HeadMetrics {
                head: h,
                budget: budgets[h],
                sparsity: sparsity.per_head[h],
                recall: recall[h],
                max_abs_err,
                mean_cosine,
                min_cosine,
                sparse_macs: mask.head_count(h) as u64 * 2 * b * b * d,
                dense_macs: per_head_dense,
            }
        })
        .collect::<Vec<_>>();
    if let Some(bad) = heads.iter().find(|m| {
        ![m.sparsity, m.recall, m.max_abs_err, m.mean_cosine, m.min_cosine].iter().all(|x| x.is_finite())
    }) {
        return Err(Error::Validation(format!("head {} produced a non-finite metric", bad.head)));
    }
    Ok(PipelineResult {
        estimator: opts.estimator,
        cfg: *cfg,
        heads,
        mask,
        output,
        dense_output,
        stats,
        estimation_macs,
        dense_qk_macs: dense_macs.qk,
    })
}

/// Cosine similarity between sparse and dense outputs for the final `rows`
/// real query tokens: `(mean, min)` per head.
pub fn tail_cosine(result: &PipelineResult, rows: usize) -> Vec<(f64, f64)> {
    let end = result.cfg.valid_len;
    output_errors(&result.output, &result.dense_output, end, end.saturating_sub(rows)..end)
        .into_iter()
        .map(|(_, mean, min)| (mean, min))
        .collect()
}

/// Closed-form proxy estimation cost for reports.
pub fn formula_cost_ratio(cfg: &AttnConfig) -> f64 {
    estimation_cost_ratio(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::estimate_proxy_scores;
    use crate::workloads::{generate, WorkloadKind, WorkloadSpec};

    fn small_cfg() -> AttnConfig {
        AttnConfig { n_q_heads: 4, n_kv_heads: 2, head_dim: 16, block_size: 16, stride: 4, ..Default::default() }
            .with_seq_len(256)
    }

    #[test]
    fn gamma_one_reproduces_dense() {
        let cfg = AttnConfig { gamma: 1.0, ..small_cfg() };
        let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::RandomSmooth, 3, cfg)).unwrap();
        for kind in EstimatorKind::ALL {
            let opts = PipelineOptions { estimator: kind, ..Default::default() };
            let r = run_pipeline(&q, &k, &v, &cfg, &opts).unwrap();
            for h in &r.heads {
                assert_eq!(h.budget.ratio, 1.0);
                assert_eq!(h.sparsity, 0.0);
                // probabilities are f32, so a full row sums to 1 only to single precision
                assert!((h.recall - 1.0).abs() < 1e-6, "{kind}: {}", h.recall);
                assert!(h.max_abs_err <= 1e-5, "{kind}: {}", h.max_abs_err);
            }
        }
    }

    #[test]
    fn counted_proxy_macs_match_closed_form() {
        for stride in [1, 2, 4] {
            let cfg = AttnConfig { stride, ..small_cfg() };
            let (q, k, _) = generate(&WorkloadSpec::new(WorkloadKind::RandomSmooth, 1, cfg)).unwrap();
            let counted = estimate_proxy_scores(&q, &k, &cfg).unwrap().macs;
            assert_eq!(counted, estimation_macs(EstimatorKind::Proxy, &cfg, 8));
        }
    }

    #[test]
    fn antidiagonal_macs_match_enumeration() {
        let cfg = small_cfg();
        let st = 4;
        let mut pairs = 0u64;
        for t in 0..cfg.seq_len {
            for s in 0..=t {
                if ((t % 16) + (s % 16)) % st == st - 1 {
                    pairs += 1;
                }
            }
        }
        assert_eq!(estimation_macs(EstimatorKind::Antidiagonal, &cfg, st), pairs * 16 * 4);
    }

    #[test]
    fn stats_agree_with_metrics() {
        let cfg = small_cfg();
        let (q, k, v) = generate(&WorkloadSpec::new(WorkloadKind::Mixture, 2, cfg)).unwrap();
        let r = run_pipeline(&q, &k, &v, &cfg, &PipelineOptions::default()).unwrap();
        assert!((r.stats.skipped_ratio - r.mean_sparsity()).abs() < 1e-9);
        assert_eq!(r.stats.blocks_computed as usize, r.mask.selected_count());
        assert_eq!(r.stats.macs, r.heads.iter().map(|h| h.sparse_macs).sum::<u64>());
        for h in &r.heads {
            assert!(h.recall > 0.0 && h.recall <= 1.0 + 1e-9);
            assert!(h.min_cosine <= h.mean_cosine + 1e-12);
        }
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 3.0])).abs() < 1e-12);
    }
}
