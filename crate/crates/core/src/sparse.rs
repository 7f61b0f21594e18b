//! Block-sparse causal attention with an online softmax, and oracle recall.

use rayon::prelude::*;

use crate::config::{AttnConfig, BlockGrid};
use crate::dense::{for_each_prob_row, ProbMatrix};
use crate::error::{Error, Result};
use crate::mask::BlockMask;
use crate::rng::CounterRng;
use crate::tensor::{dot, HeadTensor, Role};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseAttnStats {
    pub blocks_computed: u64,
    /// `QK^T` plus `PV` multiply-accumulates, `b^2 * d` each per block.
    pub macs: u64,
    /// Fraction of causally valid blocks skipped.
    pub skipped_ratio: f64,
    /// Largest total log-rescale of any query row: final running max minus
    /// the running max after its first visited block.
    pub max_row_renorm: f32,
}

/// Order in which the selected key blocks of a row are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockOrder {
    #[default]
    Ascending,
    Descending,
    /// Deterministic shuffle keyed by seed, head and row.
    Shuffled(u64),
}

impl BlockOrder {
    fn arrange(self, cols: &mut [usize], head: usize, row: usize) {
        match self {
            BlockOrder::Ascending => {}
            BlockOrder::Descending => cols.reverse(),
            BlockOrder::Shuffled(seed) => {
                let rng = CounterRng::new(seed).substream((head as u64) << 32 | row as u64);
                for i in (1..cols.len()).rev() {
                    let j = (rng.bits(i as u64) % (i as u64 + 1)) as usize;
                    cols.swap(i, j);
                }
            }
        }
    }
}

fn check_mask(mask: &BlockMask, cfg: &AttnConfig) -> Result<()> {
    let nb = cfg.n_blocks();
    if mask.n_heads() != cfg.n_q_heads || mask.n_rows() != nb || mask.n_cols() != nb {
        return Err(Error::Shape(format!(
            "mask is {}x{}x{}, expected {}x{nb}x{nb}",
            mask.n_heads(),
            mask.n_rows(),
            mask.n_cols(),
            cfg.n_q_heads
        )));
    }
    for h in 0..mask.n_heads() {
        for m in 0..nb {
            if mask.row_count(h, m) == 0 {
                return Err(Error::Validation(format!("mask row {m} of head {h} selects no block")));
            }
            if let Some(n) = (m + 1..nb).find(|&n| mask.get(h, m, n)) {
                return Err(Error::Validation(format!("mask row {m} of head {h} selects future block {n}")));
            }
        }
    }
    Ok(())
}

/// Block-sparse attention visiting selected blocks in ascending column order.
pub fn block_sparse_attention(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    mask: &BlockMask,
    cfg: &AttnConfig,
) -> Result<(HeadTensor, SparseAttnStats)> {
    block_sparse_attention_ordered(q, k, v, mask, cfg, BlockOrder::Ascending)
}

pub fn block_sparse_attention_ordered(
    q: &HeadTensor,
    k: &HeadTensor,
    v: &HeadTensor,
    mask: &BlockMask,
    cfg: &AttnConfig,
    order: BlockOrder,
) -> Result<(HeadTensor, SparseAttnStats)> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    v.check_role(cfg, Role::Value)?;
    check_mask(mask, cfg)?;

    let (b, d, nb) = (cfg.block_size, cfg.head_dim, cfg.n_blocks());
    let scale = cfg.scale();
    let mut out = HeadTensor::zeros(cfg.n_q_heads, cfg.seq_len, d);

    let renorms: Vec<Result<f32>> = out
        .data_mut()
        .par_chunks_mut(b * d)
        .enumerate()
        .map(|(idx, out_rows)| {
            let (h, m) = (idx / nb, idx % nb);
            let kv = cfg.kv_head_of(h);
            let (k_head, v_head) = (k.head(kv), v.head(kv));
            let mut cols = mask.row_cols(h, m);
            order.arrange(&mut cols, h, m);

            // f64 accumulators keep the result independent of block visit order
            let mut run_max = vec![f64::NEG_INFINITY; b];
            let mut first_max = vec![f64::NEG_INFINITY; b];
            let mut denom = vec![0.0f64; b];
            let mut logits = vec![0.0f64; b];
            let mut accs = vec![0.0f64; b * d];
            for &n in &cols {
                for i in 0..b {
                    let t = m * b + i;
                    let limit = cfg.key_limit(t);
                    let keys = (n * b)..((n + 1) * b).min(limit);
                    if keys.is_empty() {
                        continue;
                    }
                    let q_row = q.row(h, t);
                    let mut block_max = f64::NEG_INFINITY;
                    for (j, s) in keys.clone().enumerate() {
                        let l = (dot(q_row, &k_head[s * d..(s + 1) * d]) * scale) as f64;
                        logits[j] = l;
                        block_max = block_max.max(l);
                    }
                    let new_max = run_max[i].max(block_max);
                    let correction = (run_max[i] - new_max).exp();
                    let acc = &mut accs[i * d..(i + 1) * d];
                    if correction != 1.0 {
                        acc.iter_mut().for_each(|a| *a *= correction);
                        denom[i] *= correction;
                    }
                    for (j, s) in keys.enumerate() {
                        let w = (logits[j] - new_max).exp();
                        denom[i] += w;
                        for (a, &vv) in acc.iter_mut().zip(&v_head[s * d..(s + 1) * d]) {
                            *a += w * vv as f64;
                        }
                    }
                    if first_max[i] == f64::NEG_INFINITY {
                        first_max[i] = new_max;
                    }
                    run_max[i] = new_max;
                }
            }
            let mut renorm = 0.0f64;
            for i in 0..b {
                if denom[i] <= 0.0 {
                    return Err(Error::Invariant(format!(
                        "query token {} of head {h} saw no key under the mask",
                        m * b + i
                    )));
                }
                let inv = 1.0 / denom[i];
                for (o, a) in out_rows[i * d..(i + 1) * d].iter_mut().zip(&accs[i * d..(i + 1) * d]) {
                    *o = (a * inv) as f32;
                }
                renorm = renorm.max(run_max[i] - first_max[i]);
            }
            Ok(renorm as f32)
        })
        .collect();

    let mut max_row_renorm = 0.0f32;
    for r in renorms {
        max_row_renorm = max_row_renorm.max(r?);
    }
    let blocks_computed = mask.selected_count() as u64;
    let valid = (cfg.n_q_heads * mask.causal_cells()) as f64;
    let stats = SparseAttnStats {
        blocks_computed,
        macs: blocks_computed * 2 * (b * b * d) as u64,
        skipped_ratio: 1.0 - blocks_computed as f64 / valid,
        max_row_renorm,
    };
    Ok((out, stats))
}

/// Mass of one row's probabilities that falls inside the selected blocks of `m`.
fn covered_mass(probs: &[f32], mask: &BlockMask, h: usize, m: usize, b: usize) -> f64 {
    mask.row_cols(h, m)
        .into_iter()
        .map(|n| {
            let end = ((n + 1) * b).min(probs.len());
            let start = (n * b).min(end);
            probs[start..end].iter().map(|&p| p as f64).sum::<f64>()
        })
        .sum()
}

/// Fraction of true attention mass inside the selected blocks, averaged over
/// query rows, per head.
pub fn attention_recall(mask: &BlockMask, probs: &[ProbMatrix], grid: BlockGrid) -> Result<Vec<f64>> {
    if probs.len() != mask.n_heads() {
        return Err(Error::Shape(format!("{} probability maps for {} mask heads", probs.len(), mask.n_heads())));
    }
    let n = grid.seq_len();
    if mask.n_rows() != grid.n_block_rows || probs.iter().any(|p| p.n() != n) {
        return Err(Error::Shape("probability maps or mask do not match the block grid".into()));
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(h, p)| {
            let total: f64 = (0..n).map(|t| covered_mass(p.row(t), mask, h, t / grid.block_size, grid.block_size)).sum();
            total / n as f64
        })
        .collect())
}

/// [`attention_recall`] computed row by row from Q and K, without
/// materializing probability matrices. Padded query rows are excluded.
pub fn oracle_recall(q: &HeadTensor, k: &HeadTensor, mask: &BlockMask, cfg: &AttnConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    check_mask(mask, cfg)?;
    let b = cfg.block_size;
    Ok((0..cfg.n_q_heads)
        .into_par_iter()
        .map(|h| {
            let mut total = 0.0f64;
            for_each_prob_row(q, k, cfg, h, |t, p| {
                if t < cfg.valid_len {
                    total += covered_mass(p, mask, h, t / b, b);
                }
            });
            total / cfg.valid_len as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::dense::{dense_attention_probs, dense_causal_attention};
    use crate::mask::mask_sparsity;

    fn cfg(heads: usize, kv: usize, n: usize, d: usize, b: usize) -> AttnConfig {
        AttnConfig { n_q_heads: heads, n_kv_heads: kv, head_dim: d, block_size: b, stride: 1, ..Default::default() }
            .with_seq_len(n)
    }

    fn random(heads: usize, n: usize, d: usize, seed: u64) -> HeadTensor {
        let rng = CounterRng::new(seed);
        HeadTensor::from_fn(heads, n, d, |h, t, i| rng.normal(((h * n + t) * d + i) as u64) as f32)
    }

    fn diagonal_mask(heads: usize, nb: usize) -> BlockMask {
        let mut mask = BlockMask::empty(heads, nb, nb);
        for h in 0..heads {
            for m in 0..nb {
                mask.set(h, m, m, true);
            }
        }
        mask
    }

    #[test]
    fn full_mask_matches_dense() {
        let c = cfg(4, 2, 256, 16, 32);
        let (q, k, v) = (random(4, 256, 16, 1), random(2, 256, 16, 2), random(2, 256, 16, 3));
        let dense = dense_causal_attention(&q, &k, &v, &c).unwrap();
        let (sparse, stats) = block_sparse_attention(&q, &k, &v, &BlockMask::full_causal(4, 8), &c).unwrap();
        assert!(sparse.max_abs_diff(&dense) < 1e-5);
        assert_eq!(stats.blocks_computed, 4 * 36);
        assert_eq!(stats.skipped_ratio, 0.0);
        assert_eq!(stats.macs, 4 * 36 * 2 * 32 * 32 * 16);
    }

    #[test]
    fn diagonal_mask_is_block_local_attention() {
        let (n, d, b) = (64, 8, 16);
        let c = cfg(1, 1, n, d, b);
        let (q, k, v) = (random(1, n, d, 4), random(1, n, d, 5), random(1, n, d, 6));
        let mask = diagonal_mask(1, n / b);
        let (out, stats) = block_sparse_attention(&q, &k, &v, &mask, &c).unwrap();
        // brute force: token t attends to s in [block start, t]
        for t in 0..n {
            let start = t / b * b;
            let logits: Vec<f64> = (start..=t)
                .map(|s| q.row(0, t).iter().zip(k.row(0, s)).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for i in 0..d {
                let expected: f64 = w.iter().enumerate().map(|(j, wj)| wj / z * v.row(0, start + j)[i] as f64).sum();
                assert!((out.row(0, t)[i] as f64 - expected).abs() < 1e-6);
            }
        }
        assert!((stats.skipped_ratio - mask_sparsity(&mask).mean).abs() < 1e-9);
    }

    #[test]
    fn visitation_order_does_not_matter() {
        let c = cfg(2, 1, 128, 8, 16);
        let (q, k, v) = (random(2, 128, 8, 7), random(1, 128, 8, 8), random(1, 128, 8, 9));
        let mut mask = BlockMask::full_causal(2, 8);
        mask.set(0, 5, 2, false);
        mask.set(1, 7, 3, false);
        let (a, _) = block_sparse_attention_ordered(&q, &k, &v, &mask, &c, BlockOrder::Ascending).unwrap();
        for order in [BlockOrder::Descending, BlockOrder::Shuffled(1), BlockOrder::Shuffled(2)] {
            let (b, _) = block_sparse_attention_ordered(&q, &k, &v, &mask, &c, order).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-6, "{order:?}");
        }
    }

    #[test]
    fn rejects_empty_rows_future_blocks_and_nan() {
        let c = cfg(1, 1, 32, 4, 8);
        let t = random(1, 32, 4, 1);
        let mut mask = diagonal_mask(1, 4);
        mask.set(0, 2, 2, false);
        assert!(matches!(block_sparse_attention(&t, &t, &t, &mask, &c), Err(Error::Validation(_))));
        let mut mask = diagonal_mask(1, 4);
        mask.set(0, 1, 3, true);
        assert!(matches!(block_sparse_attention(&t, &t, &t, &mask, &c), Err(Error::Validation(_))));
        let mut bad = t.clone();
        bad.row_mut(0, 0)[0] = f32::NAN;
        assert!(matches!(block_sparse_attention(&bad, &t, &t, &diagonal_mask(1, 4), &c), Err(Error::Validation(_))));
    }

    #[test]
    fn recall_full_and_half() {
        let c = cfg(1, 1, 64, 4, 8);
        let q = random(1, 64, 4, 1);
        let k = random(1, 64, 4, 2);
        let probs = vec![dense_attention_probs(&q, &k, &c, 0).unwrap()];
        let full = attention_recall(&BlockMask::full_causal(1, 8), &probs, c.grid()).unwrap();
        assert!((full[0] - 1.0).abs() < 1e-6);

        // uniform attention with the first half of the past blocks plus diagonal
        let z = HeadTensor::zeros(1, 64, 4);
        let uniform = vec![dense_attention_probs(&z, &z, &c, 0).unwrap()];
        let mut mask = BlockMask::empty(1, 8, 8);
        let mut expected = 0.0;
        for m in 0..8 {
            let take = (m + 1usize).div_ceil(2);
            for n in 0..take {
                mask.set(0, m, n, true);
            }
            for t in m * 8..(m + 1) * 8 {
                expected += (take * 8).min(t + 1) as f64 / (t + 1) as f64;
            }
        }
        let r = attention_recall(&mask, &uniform, c.grid()).unwrap()[0];
        assert!((r - expected / 64.0).abs() < 1e-6);
        assert!((r - 0.5).abs() < 0.25);
    }

    #[test]
    fn streaming_recall_matches_materialized() {
        let c = cfg(2, 1, 64, 4, 8);
        let q = random(2, 64, 4, 3);
        let k = random(1, 64, 4, 4);
        let mut mask = diagonal_mask(2, 8);
        mask.set(1, 6, 0, true);
        let probs: Vec<_> = (0..2).map(|h| dense_attention_probs(&q, &k, &c, h).unwrap()).collect();
        let a = attention_recall(&mask, &probs, c.grid()).unwrap();
        let b = oracle_recall(&q, &k, &mask, &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(b[1] > b[0]);
    }

    fn random_mask(heads: usize, nb: usize, seed: u64, density: f64) -> BlockMask {
        let rng = CounterRng::new(seed);
        let mut mask = diagonal_mask(heads, nb);
        for h in 0..heads {
            for m in 0..nb {
                for c in 0..m {
                    if rng.uniform(((h * nb + m) * nb + c) as u64) < density {
                        mask.set(h, m, c, true);
                    }
                }
            }
        }
        mask
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn order_counts_and_recall_inclusion(seed in 0u64..1000, density in 0.0f64..1.0, extra in 0.0f64..1.0, shuffle in 0u64..100) {
            let c = cfg(2, 1, 128, 8, 16);
            let (q, k, v) = (random(2, 128, 8, seed), random(1, 128, 8, seed + 1), random(1, 128, 8, seed + 2));
            let sub = random_mask(2, 8, seed, density);
            let (a, stats) = block_sparse_attention(&q, &k, &v, &sub, &c).unwrap();
            prop_assert_eq!(stats.blocks_computed, sub.selected_count() as u64);
            for order in [BlockOrder::Descending, BlockOrder::Shuffled(shuffle)] {
                let (b, _) = block_sparse_attention_ordered(&q, &k, &v, &sub, &c, order).unwrap();
                prop_assert!(a.max_abs_diff(&b) <= 1e-6);
            }

            let mut sup = sub.clone();
            let more = random_mask(2, 8, seed + 7, extra);
            for h in 0..2 {
                for m in 0..8 {
                    for col in more.row_cols(h, m) {
                        sup.set(h, m, col, true);
                    }
                }
            }
            prop_assert!(sub.is_subset_of(&sup));
            let (r_sub, r_sup) = (oracle_recall(&q, &k, &sub, &c).unwrap(), oracle_recall(&q, &k, &sup, &c).unwrap());
            for (x, y) in r_sub.iter().zip(&r_sup) {
                prop_assert!(y + 1e-12 >= *x);
            }
        }
    }
}
