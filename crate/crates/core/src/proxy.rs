//! Proxy-head block importance estimation.
//!
//! Heads are partitioned into `g` groups aligned with the key heads, so every
//! query head lands in the group of its key head. Each group is collapsed
//! into one proxy head by averaging its queries and keys; the proxy head's
//! token-level attention is computed on a strided subsample of both queries
//! and keys and max-pooled per `b x b` block. The resulting map is shared by
//! all heads of the group.

use rayon::prelude::*;

use crate::config::AttnConfig;
use crate::dense::{row_logits, softmax_in_place, BlockScoreMap};
use crate::error::{Error, Result};
use crate::tensor::{HeadTensor, Role};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub n_groups: usize,
    pub group_of_kv_head: Vec<usize>,
    pub group_of_q_head: Vec<usize>,
}

impl GroupAssignment {
    pub fn q_members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of_q_head.iter().enumerate().filter(move |(_, &g)| g == group).map(|(h, _)| h)
    }

    pub fn kv_members(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.group_of_kv_head.iter().enumerate().filter(move |(_, &g)| g == group).map(|(h, _)| h)
    }
}

/// Contiguous balanced partition of key heads into `cfg.n_proxy_groups`
/// groups; query heads follow their key head.
pub fn assign_groups(cfg: &AttnConfig) -> Result<GroupAssignment> {
    let g = cfg.n_proxy_groups;
    if g == 0 || !cfg.n_kv_heads.is_multiple_of(g) {
        return Err(Error::Config(format!(
            "{} key heads cannot be split into {g} equal proxy groups",
            cfg.n_kv_heads
        )));
    }
    if cfg.n_kv_heads == 0 || !cfg.n_q_heads.is_multiple_of(cfg.n_kv_heads) {
        return Err(Error::Config(format!(
            "{} query heads do not map evenly onto {} key heads",
            cfg.n_q_heads, cfg.n_kv_heads
        )));
    }
    let per_group = cfg.n_kv_heads / g;
    let group_of_kv_head: Vec<usize> = (0..cfg.n_kv_heads).map(|kv| kv / per_group).collect();
    let group_of_q_head = (0..cfg.n_q_heads).map(|h| group_of_kv_head[cfg.kv_head_of(h)]).collect();
    Ok(GroupAssignment { n_groups: g, group_of_kv_head, group_of_q_head })
}

fn mean_heads(t: &HeadTensor, members: &[usize]) -> Vec<f32> {
    let len = t.seq_len() * t.dim();
    let mut acc = vec![0.0f32; len];
    for &h in members {
        for (a, &x) in acc.iter_mut().zip(t.head(h)) {
            *a += x;
        }
    }
    let inv = members.len() as f32;
    acc.iter_mut().for_each(|a| *a /= inv);
    acc
}

/// Averages queries and keys within each group, giving one proxy head per group.
pub fn pool_group_qk(q: &HeadTensor, k: &HeadTensor, groups: &GroupAssignment) -> Result<(HeadTensor, HeadTensor)> {
    if q.n_heads() != groups.group_of_q_head.len() || k.n_heads() != groups.group_of_kv_head.len() {
        return Err(Error::Shape(format!(
            "Q/K have {}/{} heads but the grouping covers {}/{}",
            q.n_heads(),
            k.n_heads(),
            groups.group_of_q_head.len(),
            groups.group_of_kv_head.len()
        )));
    }
    if q.seq_len() != k.seq_len() || q.dim() != k.dim() {
        return Err(Error::Shape("Q and K disagree on sequence length or head dim".into()));
    }
    let mut q_data = Vec::with_capacity(groups.n_groups * q.seq_len() * q.dim());
    let mut k_data = Vec::with_capacity(groups.n_groups * k.seq_len() * k.dim());
    for g in 0..groups.n_groups {
        let qm: Vec<usize> = groups.q_members(g).collect();
        let km: Vec<usize> = groups.kv_members(g).collect();
        if qm.is_empty() || km.is_empty() {
            return Err(Error::Config(format!("proxy group {g} has no member heads")));
        }
        q_data.extend(mean_heads(q, &qm));
        k_data.extend(mean_heads(k, &km));
    }
    Ok((
        HeadTensor::new(groups.n_groups, q.seq_len(), q.dim(), q_data)?,
        HeadTensor::new(groups.n_groups, k.seq_len(), k.dim(), k_data)?,
    ))
}

/// A token-subsampled tensor together with the original index of each kept token.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTensor {
    pub tensor: HeadTensor,
    pub positions: Vec<usize>,
}

/// Keeps tokens `0, stride, 2*stride, ...`.
///
/// Panics if `stride == 0`.
pub fn strided_subsample(t: &HeadTensor, stride: usize) -> SampledTensor {
    assert!(stride >= 1, "stride must be at least 1");
    let positions: Vec<usize> = (0..t.seq_len()).step_by(stride).collect();
    let tensor = HeadTensor::from_fn(t.n_heads(), positions.len(), t.dim(), |h, i, d| t.row(h, positions[i])[d]);
    SampledTensor { tensor, positions }
}

/// Per-group block score maps plus the multiply-accumulates spent on them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyScores {
    pub maps: Vec<BlockScoreMap>,
    pub group_of_q_head: Vec<usize>,
    /// Query-key dot-product MACs of the strided proxy attention.
    pub macs: u64,
}

impl ProxyScores {
    /// The map shared by every head of `head`'s group.
    pub fn for_head(&self, head: usize) -> &BlockScoreMap {
        &self.maps[self.group_of_q_head[head]]
    }
}

/// Strided proxy attention, softmax over the sampled causal keys of each
/// sampled query, max-pooled into `b x b` blocks.
///
/// `q` and `k` are the pooled group tensors after [`strided_subsample`].
pub fn proxy_block_scores(
    q: &SampledTensor,
    k: &SampledTensor,
    cfg: &AttnConfig,
    groups: &GroupAssignment,
) -> Result<ProxyScores> {
    cfg.validate()?;
    let g = groups.n_groups;
    if q.tensor.n_heads() != g || k.tensor.n_heads() != g {
        return Err(Error::Shape(format!(
            "expected {g} pooled heads, got Q={} K={}",
            q.tensor.n_heads(),
            k.tensor.n_heads()
        )));
    }
    if q.tensor.dim() != cfg.head_dim || k.tensor.dim() != cfg.head_dim {
        return Err(Error::Shape("pooled tensors do not match head_dim".into()));
    }
    if q.positions.last().is_some_and(|&p| p >= cfg.seq_len) || k.positions.last().is_some_and(|&p| p >= cfg.seq_len) {
        return Err(Error::Shape("sampled positions exceed seq_len".into()));
    }
    q.tensor.check_finite("pooled Q")?;
    k.tensor.check_finite("pooled K")?;

    let (b, d, nb) = (cfg.block_size, cfg.head_dim, cfg.n_blocks());
    let scale = cfg.scale();
    let per_group: Vec<(BlockScoreMap, u64)> = (0..g)
        .into_par_iter()
        .map(|grp| {
            let mut map = BlockScoreMap::causal_zeros(nb);
            let mut seen = vec![false; nb * nb];
            let k_head = k.tensor.head(grp);
            let mut buf = vec![0.0f32; k.positions.len()];
            let mut macs = 0u64;
            for (i, &t) in q.positions.iter().enumerate() {
                let limit = cfg.key_limit(t);
                // positions are ascending, so the visible sampled keys form a prefix
                let visible = k.positions.partition_point(|&p| p < limit);
                if visible == 0 {
                    continue;
                }
                row_logits(q.tensor.row(grp, i), k_head, d, visible, scale, &mut buf);
                softmax_in_place(&mut buf[..visible]);
                macs += (visible * d) as u64;
                let m = t / b;
                for (j, &p) in buf[..visible].iter().enumerate() {
                    let n = k.positions[j] / b;
                    seen[m * nb + n] = true;
                    if p > map.get(m, n) {
                        map.set(m, n, p);
                    }
                }
            }
            for m in 0..nb {
                for n in 0..=m {
                    if !seen[m * nb + n] {
                        return Err(Error::Invariant(format!(
                            "group {grp} block ({m}, {n}) received no sampled query-key pair"
                        )));
                    }
                }
            }
            Ok((map, macs))
        })
        .collect::<Result<_>>()?;

    let macs = per_group.iter().map(|(_, m)| m).sum();
    Ok(ProxyScores {
        maps: per_group.into_iter().map(|(map, _)| map).collect(),
        group_of_q_head: groups.group_of_q_head.clone(),
        macs,
    })
}

/// Grouping, pooling, strided subsampling and proxy scoring in one call.
pub fn estimate_proxy_scores(q: &HeadTensor, k: &HeadTensor, cfg: &AttnConfig) -> Result<ProxyScores> {
    cfg.validate()?;
    q.check_role(cfg, Role::Query)?;
    k.check_role(cfg, Role::Key)?;
    let groups = assign_groups(cfg)?;
    let (qg, kg) = pool_group_qk(q, k, &groups)?;
    let qs = strided_subsample(&qg, cfg.stride);
    let ks = strided_subsample(&kg, cfg.stride);
    proxy_block_scores(&qs, &ks, cfg, &groups)
}

/// Fraction of full multi-head attention spent on estimation: `g / (n * stride^2)`.
pub fn estimation_cost_ratio(cfg: &AttnConfig) -> f64 {
    cfg.n_proxy_groups as f64 / (cfg.n_q_heads as f64 * (cfg.stride * cfg.stride) as f64)
}
