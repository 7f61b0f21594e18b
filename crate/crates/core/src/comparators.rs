//! Coarse block estimators and head-similarity analyses.
//!
//! `seq_avgpool` pools queries and keys along the sequence before the dot
//! product; `antidiagonal` sums token probabilities along strided
//! anti-diagonals of each block. Both are simplified archetypes of
//! sequence-compressing estimators, kept to contrast with proxy scoring.

use std::fmt;
use std::str::FromStr;

use crate::config::AttnConfig;
use crate::dense::{block_reduce, dense_attention_probs, row_logits, softmax_in_place, BlockScoreMap, ProbMatrix, Reduce};
use crate::error::{Error, Result};
use crate::tensor::{dot, HeadTensor, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Proxy,
    SeqAvgpool,
    Antidiagonal,
    OracleMax,
    OracleSum,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Proxy,
        EstimatorKind::SeqAvgpool,
        EstimatorKind::Antidiagonal,
        EstimatorKind::OracleMax,
        EstimatorKind::OracleSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Proxy => "proxy",
            EstimatorKind::SeqAvgpool => "seq_avgpool",
            EstimatorKind::Antidiagonal => "antidiagonal",
            EstimatorKind::OracleMax => "oracle_max",
            EstimatorKind::OracleSum => "oracle_sum",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

fn check_head(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize) -> Result<()> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    if head >= cfg.n_q_heads {
        return Err(Error::Shape(format!("head {head} out of range for {} query heads", cfg.n_q_heads)));
    }
    Ok(())
}

fn block_means(t: &HeadTensor, head: usize, cfg: &AttnConfig) -> Vec<Vec<f32>> {
    let (b, d) = (cfg.block_size, cfg.head_dim);
    (0..cfg.n_blocks())
        .map(|m| {
            let tokens: Vec<usize> = (m * b..(m + 1) * b).filter(|&t| t < cfg.valid_len).collect();
            let mut acc = vec![0.0f32; d];
            for &tok in &tokens {
                acc.iter_mut().zip(t.row(head, tok)).for_each(|(a, &x)| *a += x);
            }
            let count = tokens.len().max(1) as f32;
            acc.iter_mut().for_each(|a| *a /= count);
            acc
        })
        .collect()
}

/// Mean-pooled queries against mean-pooled keys, softmax over each block row.
pub fn seq_avgpool_scores(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize) -> Result<BlockScoreMap> {
    check_head(q, k, cfg, head)?;
    let nb = cfg.n_blocks();
    let q_bar = block_means(q, head, cfg);
    let k_bar = block_means(k, cfg.kv_head_of(head), cfg);
    let scale = cfg.scale();
    let mut map = BlockScoreMap::causal_zeros(nb);
    let mut row = vec![0.0f32; nb];
    for m in 0..nb {
        for n in 0..=m {
            row[n] = dot(&q_bar[m], &k_bar[n]) * scale;
        }
        softmax_in_place(&mut row[..=m]);
        for n in 0..=m {
            map.set(m, n, row[n]);
        }
    }
    Ok(map)
}

/// Whether local cell `(i, j)` of a block lies on a sampled anti-diagonal.
#[inline]
pub fn on_sampled_antidiagonal(i: usize, j: usize, stride: usize) -> bool {
    (i + j) % stride == stride - 1
}

/// Sum of probabilities along anti-diagonals `i + j = stride - 1 (mod stride)`
/// of each block. Each query row's softmax runs over its sampled visible keys.
pub fn antidiagonal_scores(
    q: &HeadTensor,
    k: &HeadTensor,
    cfg: &AttnConfig,
    head: usize,
    stride: usize,
) -> Result<BlockScoreMap> {
    check_head(q, k, cfg, head)?;
    let (b, d, n) = (cfg.block_size, cfg.head_dim, cfg.seq_len);
    if stride == 0 || b % stride != 0 {
        return Err(Error::Shape(format!("block size {b} is not a multiple of anti-diagonal stride {stride}")));
    }
    let nb = cfg.n_blocks();
    let k_head = k.head(cfg.kv_head_of(head));
    let scale = cfg.scale();
    let mut sums = vec![0.0f32; nb * nb];
    let mut keys = Vec::with_capacity(n);
    let mut logits = vec![0.0f32; n];
    for t in 0..n {
        let i = t % b;
        keys.clear();
        keys.extend((0..cfg.key_limit(t)).filter(|&s| on_sampled_antidiagonal(i, s % b, stride)));
        if keys.is_empty() {
            continue;
        }
        if stride == 1 {
            row_logits(q.row(head, t), k_head, d, keys.len(), scale, &mut logits);
        } else {
            for (l, &s) in logits.iter_mut().zip(&keys) {
                *l = dot(q.row(head, t), &k_head[s * d..(s + 1) * d]) * scale;
            }
        }
        softmax_in_place(&mut logits[..keys.len()]);
        let m = t / b;
        for (&s, &p) in keys.iter().zip(&logits) {
            sums[m * nb + s / b] += p;
        }
    }
    let mut map = BlockScoreMap::causal_zeros(nb);
    for m in 0..nb {
        for c in 0..=m {
            map.set(m, c, sums[m * nb + c]);
        }
    }
    Ok(map)
}

/// Block pooling of the head's exact probabilities.
pub fn oracle_scores(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig, head: usize, mode: Reduce) -> Result<BlockScoreMap> {
    let probs = dense_attention_probs(q, k, cfg, head)?;
    block_reduce(&probs, cfg.grid(), mode)
}

/// Per-head score maps for a non-proxy estimator.
pub fn per_head_scores(
    kind: EstimatorKind,
    q: &HeadTensor,
    k: &HeadTensor,
    cfg: &AttnConfig,
    antidiagonal_stride: usize,
) -> Result<Vec<BlockScoreMap>> {
    use rayon::prelude::*;
    (0..cfg.n_q_heads)
        .into_par_iter()
        .map(|h| match kind {
            EstimatorKind::SeqAvgpool => seq_avgpool_scores(q, k, cfg, h),
            EstimatorKind::Antidiagonal => antidiagonal_scores(q, k, cfg, h, antidiagonal_stride),
            EstimatorKind::OracleMax => oracle_scores(q, k, cfg, h, Reduce::Max),
            EstimatorKind::OracleSum => oracle_scores(q, k, cfg, h, Reduce::Sum),
            EstimatorKind::Proxy => Err(Error::Config("proxy scores are per group, not per head".into())),
        })
        .collect()
}

/// How per-query-row quantities are combined in the head analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowAggregation {
    /// Average over every query row.
    #[default]
    Mean,
    /// Only the final query row, which sees the whole sequence.
    LastRow,
}

impl FromStr for RowAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(RowAggregation::Mean),
            "last-row" | "last_row" => Ok(RowAggregation::LastRow),
            _ => Err(Error::Config(format!("unknown row aggregation '{s}'"))),
        }
    }
}

fn check_probs(probs: &[ProbMatrix]) -> Result<usize> {
    let n = probs.first().map(|p| p.n()).ok_or_else(|| Error::Shape("no heads to analyze".into()))?;
    if probs.iter().any(|p| p.n() != n) {
        return Err(Error::Shape("heads disagree on sequence length".into()));
    }
    Ok(n)
}

/// Indices of the `top_t` largest entries of `row`, ties to the lower index.
fn top_indices(row: &[f32], top_t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    if top_t < idx.len() {
        idx.select_nth_unstable_by(top_t, cmp);
        idx.truncate(top_t);
    }
    idx
}

/// Entry `(i, j)`: attention mass head `j` places on head `i`'s top `top_t`
/// keys, aggregated over query rows.
pub fn head_overlap_matrix(probs: &[ProbMatrix], top_t: usize, agg: RowAggregation) -> Result<Vec<Vec<f64>>> {
    let n = check_probs(probs)?;
    if top_t == 0 || top_t > n {
        return Err(Error::Config(format!("top_t ({top_t}) must lie in 1..={n}")));
    }
    let heads = probs.len();
    let rows: Vec<usize> = match agg {
        RowAggregation::Mean => (0..n).collect(),
        RowAggregation::LastRow => vec![n - 1],
    };
    let mut acc = vec![vec![0.0f64; heads]; heads];
    for &t in &rows {
        for i in 0..heads {
            let top = top_indices(&probs[i].row(t)[..=t], top_t);
            for j in 0..heads {
                let row = probs[j].row(t);
                acc[i][j] += top.iter().map(|&s| row[s] as f64).sum::<f64>();
            }
        }
    }
    for row in acc.iter_mut() {
        row.iter_mut().for_each(|v| *v /= rows.len() as f64);
    }
    Ok(acc)
}

/// Per-head key importance: column means over rows, or the final row.
fn key_scores(p: &ProbMatrix, agg: RowAggregation) -> Vec<f64> {
    let n = p.n();
    match agg {
        RowAggregation::LastRow => p.row(n - 1).iter().map(|&x| x as f64).collect(),
        RowAggregation::Mean => {
            let mut acc = vec![0.0f64; n];
            for t in 0..n {
                acc.iter_mut().zip(p.row(t)).for_each(|(a, &x)| *a += x as f64);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            acc
        }
    }
}

/// Cumulative mass of every head along one shared key ranking (keys sorted by
/// their head-averaged score). Returns `(ranking, curves)` with
/// `curves[h][r]` the mass head `h` puts on the top `r + 1` shared keys.
pub fn shared_ranking_curve(probs: &[ProbMatrix], agg: RowAggregation) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = check_probs(probs)?;
    let scores: Vec<Vec<f64>> = probs.iter().map(|p| key_scores(p, agg)).collect();
    let shared: Vec<f64> = (0..n).map(|s| scores.iter().map(|h| h[s]).sum::<f64>() / probs.len() as f64).collect();
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| shared[b].total_cmp(&shared[a]).then(a.cmp(&b)));
    let curves = scores
        .iter()
        .map(|h| {
            let mut total = 0.0;
            ranking.iter().map(|&s| {
                total += h[s];
                total
            }).collect()
        })
        .collect();
    Ok((ranking, curves))
}

/// Smallest rank count at which a cumulative curve reaches `level`.
pub fn rank_to_reach(curve: &[f64], level: f64) -> Option<usize> {
    curve.iter().position(|&c| c >= level).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::CounterRng;

    fn cfg(heads: usize, n: usize, d: usize, b: usize) -> AttnConfig {
        AttnConfig { n_q_heads: heads, n_kv_heads: heads, head_dim: d, block_size: b, stride: 1, ..Default::default() }
            .with_seq_len(n)
    }

    fn random(heads: usize, n: usize, d: usize, seed: u64) -> HeadTensor {
        let rng = CounterRng::new(seed);
        HeadTensor::from_fn(heads, n, d, |h, t, i| rng.normal(((h * n + t) * d + i) as u64) as f32)
    }

    /// Single-token needle at `pos` with logit `needle`, zero-logit fillers in
    /// its block and `distractor` logits on every other token.
    fn needle_instance(n: usize, d: usize, b: usize, pos: usize, needle: f32, distractor: f32) -> (HeadTensor, HeadTensor) {
        let root = (d as f32).sqrt();
        let q = HeadTensor::from_fn(1, n, d, |_, _, i| if i == 0 { root } else { 0.0 });
        let k = HeadTensor::from_fn(1, n, d, |_, s, i| match i {
            0 if s == pos => needle,
            0 if s / b == pos / b => 0.0,
            0 => distractor,
            _ => 0.0,
        });
        (q, k)
    }

    #[test]
    fn names_round_trip() {
        for kind in EstimatorKind::ALL {
            assert_eq!(kind.name().parse::<EstimatorKind>().unwrap(), kind);
        }
        assert!("xattention".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn single_block_avgpool_is_one() {
        let c = cfg(1, 16, 4, 16);
        let t = random(1, 16, 4, 1);
        let map = seq_avgpool_scores(&t, &t, &c, 0).unwrap();
        assert_eq!(map.n_rows(), 1);
        assert_eq!(map.get(0, 0), 1.0);
    }

    #[test]
    fn avgpool_is_lossless_for_constant_blocks() {
        let (n, d, b) = (64, 4, 8);
        let c = cfg(1, n, d, b);
        let base = random(2, n / b, d, 3);
        let q = HeadTensor::from_fn(1, n, d, |_, t, i| base.row(0, t / b)[i]);
        let k = HeadTensor::from_fn(1, n, d, |_, s, i| base.row(1, s / b)[i]);
        let pooled = seq_avgpool_scores(&q, &k, &c, 0).unwrap();
        let oracle = oracle_scores(&q, &k, &c, 0, Reduce::Mean).unwrap();
        for m in 0..n / b {
            // diagonal block is partially masked in the oracle, compare past blocks only
            let a: Vec<usize> = pooled.ranked_row(m).into_iter().filter(|&c| c < m).collect();
            let o: Vec<usize> = oracle.ranked_row(m).into_iter().filter(|&c| c < m).collect();
            assert_eq!(a, o, "row {m}");
        }
    }

    #[test]
    fn max_pooling_keeps_needle_that_avgpool_dilutes() {
        for b in [16usize, 32, 64] {
            for needle in [(b as f32).ln() + 2.0, 12.0] {
                let n = 8 * b;
                let c = cfg(1, n, 8, b);
                let pos = 2 * b + b / 3;
                let (q, k) = needle_instance(n, 8, b, pos, needle, 1.0);
                let max = oracle_scores(&q, &k, &c, 0, Reduce::Max).unwrap();
                let avg = seq_avgpool_scores(&q, &k, &c, 0).unwrap();
                for m in 3..n / b {
                    let nb = pos / b;
                    let non_local = (0..m).filter(|&c| c != nb);
                    for other in non_local {
                        assert!(max.get(m, nb) > max.get(m, other), "b={b} row {m}");
                    }
                    assert_ne!(avg.ranked_row(m)[0], nb, "b={b} row {m}");
                }
            }
        }
    }

    #[test]
    fn antidiagonal_stride_one_is_block_sum() {
        let c = cfg(1, 64, 8, 16);
        let q = random(1, 64, 8, 5);
        let k = random(1, 64, 8, 6);
        let ad = antidiagonal_scores(&q, &k, &c, 0, 1).unwrap();
        let sum = oracle_scores(&q, &k, &c, 0, Reduce::Sum).unwrap();
        for (a, s) in ad.scores().iter().zip(sum.scores()) {
            assert!((a - s).abs() < 1e-6);
        }
    }

    #[test]
    fn stride_b_keeps_one_antidiagonal() {
        let b = 16;
        let cells: Vec<(usize, usize)> =
            (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).filter(|&(i, j)| on_sampled_antidiagonal(i, j, b)).collect();
        assert_eq!(cells.len(), b);
        assert!(cells.iter().all(|&(i, j)| i + j == b - 1));
        let c = cfg(1, 64, 4, b);
        let t = random(1, 64, 4, 1);
        assert!(matches!(antidiagonal_scores(&t, &t, &c, 0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn antidiagonal_sees_needle_in_every_later_row() {
        let (b, n, stride) = (32, 256, 8);
        let c = cfg(1, n, 8, b);
        for pos in (b..2 * b).chain(3 * b..3 * b + 4) {
            let (q, k) = needle_instance(n, 8, b, pos, 12.0, 0.0);
            let ad = antidiagonal_scores(&q, &k, &c, 0, stride).unwrap();
            for m in pos / b + 1..n / b {
                assert_eq!(ad.ranked_row(m)[0], pos / b, "pos {pos} row {m}");
            }
        }
    }

    #[test]
    fn overlap_trivial_cases() {
        let c = cfg(2, 32, 4, 8);
        let q = random(2, 32, 4, 1);
        let k = random(2, 32, 4, 2);
        let probs: Vec<_> = (0..2).map(|h| dense_attention_probs(&q, &k, &c, h).unwrap()).collect();
        let full = head_overlap_matrix(&probs, 32, RowAggregation::Mean).unwrap();
        for (i, row) in full.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-6);
        }

        let z = HeadTensor::zeros(2, 32, 4);
        let uniform: Vec<_> = (0..2).map(|h| dense_attention_probs(&z, &z, &c, h).unwrap()).collect();
        let half = head_overlap_matrix(&uniform, 16, RowAggregation::LastRow).unwrap();
        for row in &half {
            for v in row {
                assert!((v - 0.5).abs() < 1e-6);
            }
        }
        assert!(head_overlap_matrix(&uniform, 33, RowAggregation::Mean).is_err());
        assert!(head_overlap_matrix(&uniform, 0, RowAggregation::Mean).is_err());
    }

    #[test]
    fn ranking_curves() {
        let c = cfg(2, 32, 4, 8);
        let q = random(2, 32, 4, 8);
        let k = random(2, 32, 4, 9);
        let single = vec![dense_attention_probs(&q, &k, &c, 0).unwrap()];
        let (_, curves) = shared_ranking_curve(&single, RowAggregation::Mean).unwrap();
        let mut own = key_scores(&single[0], RowAggregation::Mean);
        own.sort_by(|a, b| b.total_cmp(a));
        let mut total = 0.0;
        for (r, v) in own.iter().enumerate() {
            total += v;
            assert!((curves[0][r] - total).abs() < 1e-12);
        }
        assert!((curves[0][31] - 1.0).abs() < 1e-6);

        let z = HeadTensor::zeros(2, 32, 4);
        let uniform: Vec<_> = (0..2).map(|h| dense_attention_probs(&z, &z, &c, h).unwrap()).collect();
        let (_, curves) = shared_ranking_curve(&uniform, RowAggregation::LastRow).unwrap();
        for r in 0..32 {
            assert!((curves[1][r] - (r + 1) as f64 / 32.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sparse_head_curve_rises_first() {
        // Same key preferences, head 1 four times sharper.
        let (n, d) = (128, 8);
        let c = cfg(2, n, d, 16);
        let pref = random(1, n, 1, 21);
        let root = (d as f32).sqrt();
        let q = HeadTensor::from_fn(2, n, d, |h, _, i| if i == 0 { root * if h == 0 { 1.0 } else { 4.0 } } else { 0.0 });
        let k = HeadTensor::from_fn(2, n, d, |_, s, i| if i == 0 { 1.5 * pref.row(0, s)[0] } else { 0.0 });
        let probs: Vec<_> = (0..2).map(|h| dense_attention_probs(&q, &k, &c, h).unwrap()).collect();
        let (_, curves) = shared_ranking_curve(&probs, RowAggregation::LastRow).unwrap();
        let dense = rank_to_reach(&curves[0], 0.9).unwrap();
        let sparse = rank_to_reach(&curves[1], 0.9).unwrap();
        assert!(sparse < dense, "sparse {sparse} dense {dense}");
        for r in 0..n {
            assert!(curves[1][r] + 1e-9 >= curves[0][r]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn oracles_and_unit_stride_antidiagonal_agree(seed in 0u64..1000) {
            let c = cfg(2, 64, 8, 16);
            let (q, k) = (random(2, 64, 8, seed), random(2, 64, 8, seed + 1));
            for h in 0..2 {
                let probs = dense_attention_probs(&q, &k, &c, h).unwrap();
                let max = oracle_scores(&q, &k, &c, h, Reduce::Max).unwrap();
                let reduced = block_reduce(&probs, c.grid(), Reduce::Max).unwrap();
                prop_assert_eq!(max.scores(), reduced.scores());
                let sum = oracle_scores(&q, &k, &c, h, Reduce::Sum).unwrap();
                let reduced = block_reduce(&probs, c.grid(), Reduce::Sum).unwrap();
                prop_assert_eq!(sum.scores(), reduced.scores());
                let anti = antidiagonal_scores(&q, &k, &c, h, 1).unwrap();
                for (a, b) in anti.scores().iter().zip(sum.scores()) {
                    prop_assert!((a - b).abs() <= 1e-6);
                }
            }
        }
    }
}
