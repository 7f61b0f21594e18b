//! Seeded synthetic Q/K/V generators.
//!
//! Every tensor element is a pure function of the spec: each (role, head)
//! pair draws from its own [`CounterRng`] substream, so generation is
//! reproducible across runs, threads and implementations.
//!
//! Kinds:
//!
//! - `random_smooth`: Gaussian rows smoothed along the sequence by an AR(1)
//!   filter with correlation length `smoothing` tokens.
//! - `needle`: smooth random fillers, one unit query channel, and `needle_len`
//!   keys per needle position whose logit against every query is exactly
//!   `needle_logit`. A needle span ends early enough to stay inside the block
//!   holding its position. Filler blocks away from the needle get a per-block logit
//!   offset drawn from `[0, distractor)`; blocks holding a needle get none.
//! - `local_window`: queries and keys read the same smooth latent process, so
//!   a query prefers keys within roughly `window` tokens.
//! - `shared_focus_multi_temp`: every head shares one key-preference field
//!   and a local component; query head `h` scales both by `temperatures[h]`.
//!   The field repeats every eight spans of `focus_span` tokens: spans 1, 3,
//!   5 and 7 hold salient tokens (each token salient with probability 1/4) at
//!   levels `0, -focus_gap, -2 focus_gap, -3 focus_gap`; every other key sits
//!   at `-background`.
//! - `mixture`: key head `j` (and its query heads) takes the kind
//!   `[local_window, shared_focus_multi_temp, random_smooth, needle][j % 4]`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::HeadTensor;

const STREAM_Q: u64 = 1;
const STREAM_K: u64 = 2;
const STREAM_V: u64 = 3;
const STREAM_FIELD: u64 = 4;
const STREAM_LOCAL: u64 = 5;
const STREAM_NOISE_Q: u64 = 6;
const STREAM_NOISE_K: u64 = 7;
const STREAM_DISTRACTOR: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkloadKind {
    Needle,
    LocalWindow,
    SharedFocusMultiTemp,
    RandomSmooth,
    Mixture,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::Needle,
        WorkloadKind::LocalWindow,
        WorkloadKind::SharedFocusMultiTemp,
        WorkloadKind::RandomSmooth,
        WorkloadKind::Mixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::Needle => "needle",
            WorkloadKind::LocalWindow => "local_window",
            WorkloadKind::SharedFocusMultiTemp => "shared_focus_multi_temp",
            WorkloadKind::RandomSmooth => "random_smooth",
            WorkloadKind::Mixture => "mixture",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkloadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown workload '{s}'")))
    }
}

/// Kind-specific generator parameters. Unused fields are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadParams {
    /// Start of each needle; empty means one needle at `seq_len / 16 + 3`.
    pub needle_positions: Vec<usize>,
    pub needle_logit: f64,
    /// Consecutive needle keys per position. At least `stride` keeps the
    /// needle visible to strided estimation.
    pub needle_len: usize,
    pub distractor: f64,
    pub window: usize,
    /// Per-query-head logit scale, cycled over heads.
    pub temperatures: Vec<f64>,
    pub smoothing: f64,
    pub focus_span: usize,
    pub focus_scale: f64,
    pub focus_gap: f64,
    pub background: f64,
    pub local_scale: f64,
    pub noise: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams {
            needle_positions: Vec::new(),
            needle_logit: 12.0,
            needle_len: 4,
            distractor: 1.5,
            window: 64,
            temperatures: vec![1.0, 2.0, 4.0, 8.0],
            smoothing: 16.0,
            focus_span: 64,
            focus_scale: 1.0,
            focus_gap: 0.5,
            background: 6.0,
            local_scale: 0.5,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub seed: u64,
    pub cfg: AttnConfig,
    pub params: WorkloadParams,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, seed: u64, cfg: AttnConfig) -> Self {
        WorkloadSpec { kind, seed, cfg, params: WorkloadParams::default() }
    }

    pub fn needle_positions(&self) -> Vec<usize> {
        if self.params.needle_positions.is_empty() {
            vec![self.cfg.seq_len / 16 + 3]
        } else {
            self.params.needle_positions.clone()
        }
    }

    pub fn temperature(&self, q_head: usize) -> f64 {
        let t = &self.params.temperatures;
        t[q_head % t.len()]
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let p = &self.params;
        let n = self.cfg.seq_len;
        if p.temperatures.is_empty() {
            return Err(Error::Validation("temperature list is empty".into()));
        }
        if let Some(t) = p.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Validation(format!("temperature {t} must be positive and finite")));
        }
        if let Some(pos) = self.needle_positions().into_iter().find(|&pos| pos >= n) {
            return Err(Error::Validation(format!("needle position {pos} is outside the sequence of {n} tokens")));
        }
        if p.needle_len == 0 || p.window == 0 || p.focus_span == 0 {
            return Err(Error::Validation("needle_len, window and focus_span must be positive".into()));
        }
        let finite = [
            ("needle_logit", p.needle_logit),
            ("distractor", p.distractor),
            ("smoothing", p.smoothing),
            ("focus_scale", p.focus_scale),
            ("focus_gap", p.focus_gap),
            ("background", p.background),
            ("local_scale", p.local_scale),
            ("noise", p.noise),
        ];
        if let Some((name, v)) = finite.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation(format!("{name} ({v}) must be finite and non-negative")));
        }
        Ok(())
    }

    /// Plain-text `key=value` form, one key per line, readable by [`WorkloadSpec::parse`].
    pub fn to_text(&self) -> String {
        let c = &self.cfg;
        let p = &self.params;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("workload", self.kind.to_string());
        kv("seed", self.seed.to_string());
        kv("n_q_heads", c.n_q_heads.to_string());
        kv("n_kv_heads", c.n_kv_heads.to_string());
        kv("head_dim", c.head_dim.to_string());
        kv("seq_len", c.seq_len.to_string());
        kv("block_size", c.block_size.to_string());
        kv("stride", c.stride.to_string());
        kv("groups", c.n_proxy_groups.to_string());
        kv("gamma", c.gamma.to_string());
        kv("min_budget", c.min_budget_tokens.to_string());
        kv("force_sink_block", c.force_sink_block.to_string());
        kv(
            "needle_positions",
            p.needle_positions.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("needle_logit", p.needle_logit.to_string());
        kv("needle_len", p.needle_len.to_string());
        kv("distractor", p.distractor.to_string());
        kv("window", p.window.to_string());
        kv("temperatures", list(&p.temperatures));
        kv("smoothing", p.smoothing.to_string());
        kv("focus_span", p.focus_span.to_string());
        kv("focus_scale", p.focus_scale.to_string());
        kv("focus_gap", p.focus_gap.to_string());
        kv("background", p.background.to_string());
        kv("local_scale", p.local_scale.to_string());
        kv("noise", p.noise.to_string());
        s
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = WorkloadSpec::new(WorkloadKind::RandomSmooth, 0, AttnConfig::default());
        spec.apply_text(text)?;
        Ok(spec)
    }

    /// Sets one key. `seq_len` also resets `valid_len`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
        }
        fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
        }
        let c = &mut self.cfg;
        let p = &mut self.params;
        match key {
            "workload" => self.kind = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "n_q_heads" => c.n_q_heads = num(key, value)?,
            "n_kv_heads" => c.n_kv_heads = num(key, value)?,
            "head_dim" => c.head_dim = num(key, value)?,
            "seq_len" => *c = c.with_seq_len(num(key, value)?),
            "block_size" => c.block_size = num(key, value)?,
            "stride" => c.stride = num(key, value)?,
            "groups" => c.n_proxy_groups = num(key, value)?,
            "gamma" => c.gamma = num(key, value)?,
            "min_budget" => c.min_budget_tokens = num(key, value)?,
            "force_sink_block" => c.force_sink_block = num(key, value)?,
            "needle_positions" => p.needle_positions = list(key, value)?,
            "needle_logit" => p.needle_logit = num(key, value)?,
            "needle_len" => p.needle_len = num(key, value)?,
            "distractor" => p.distractor = num(key, value)?,
            "window" => p.window = num(key, value)?,
            "temperatures" => p.temperatures = list(key, value)?,
            "smoothing" => p.smoothing = num(key, value)?,
            "focus_span" => p.focus_span = num(key, value)?,
            "focus_scale" => p.focus_scale = num(key, value)?,
            "focus_gap" => p.focus_gap = num(key, value)?,
            "background" => p.background = num(key, value)?,
            "local_scale" => p.local_scale = num(key, value)?,
            "noise" => p.noise = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }
}

/// AR(1) series of `len` rows by `dims` columns with unit marginal variance
/// and lag-one correlation `exp(-1 / corr_len)`; `corr_len == 0` gives white noise.
pub fn smooth_series(rng: &CounterRng, len: usize, dims: usize, corr_len: f64) -> Vec<f64> {
    let rho = if corr_len > 0.0 { (-1.0 / corr_len).exp() } else { 0.0 };
    let innov = (1.0 - rho * rho).sqrt();
    let mut out = vec![0.0f64; len * dims];
    for t in 0..len {
        for i in 0..dims {
            let z = rng.normal((t * dims + i) as u64);
            out[t * dims + i] = if t == 0 { z } else { rho * out[(t - 1) * dims + i] + innov * z };
        }
    }
    out
}

fn gaussian(rng: &CounterRng, n_heads: usize, len: usize, dim: usize) -> HeadTensor {
    let data = (0..n_heads * len * dim).map(|i| rng.normal(i as u64) as f32).collect();
    HeadTensor::new(n_heads, len, dim, data).expect("sized by construction")
}

fn stack(heads: Vec<Vec<f64>>, len: usize, dim: usize) -> HeadTensor {
    let n_heads = heads.len();
    let data = heads.into_iter().flatten().map(|x| x as f32).collect();
    HeadTensor::new(n_heads, len, dim, data).expect("sized by construction")
}

/// Generates `(q, k, v)` for a spec.
pub fn generate(spec: &WorkloadSpec) -> Result<(HeadTensor, HeadTensor, HeadTensor)> {
    spec.validate()?;
    let root = CounterRng::new(spec.seed);
    let cfg = &spec.cfg;
    let v = gaussian(&root.substream(STREAM_V), cfg.n_kv_heads, cfg.seq_len, cfg.head_dim);
    let (q, k) = match spec.kind {
        WorkloadKind::RandomSmooth => random_smooth(spec, &root),
        WorkloadKind::Needle => needle(spec, &root),
        WorkloadKind::LocalWindow => local_window(spec, &root),
        WorkloadKind::SharedFocusMultiTemp => shared_focus(spec, &root),
        WorkloadKind::Mixture => mixture(spec, &root),
    };
    Ok((q, k, v))
}

fn random_smooth(spec: &WorkloadSpec, root: &CounterRng) -> (HeadTensor, HeadTensor) {
    let cfg = &spec.cfg;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let series = |stream: u64, heads: usize| -> HeadTensor {
        let rng = root.substream(stream);
        let heads = (0..heads).map(|h| smooth_series(&rng.substream(h as u64), n, d, spec.params.smoothing)).collect();
        stack(heads, n, d)
    };
    (series(STREAM_Q, cfg.n_q_heads), series(STREAM_K, cfg.n_kv_heads))
}

/// Tokens of the needle at `pos`, shifted left if needed so that they share
/// the block of `pos`.
pub fn needle_span(pos: usize, len: usize, block_size: usize) -> std::ops::Range<usize> {
    let (block_start, block_end) = (pos / block_size * block_size, (pos / block_size + 1) * block_size);
    let start = pos.min(block_end.saturating_sub(len)).max(block_start);
    start..(start + len).min(block_end)
}

fn needle(spec: &WorkloadSpec, root: &CounterRng) -> (HeadTensor, HeadTensor) {
    let cfg = &spec.cfg;
    let p = &spec.params;
    let (n, d, b) = (cfg.seq_len, cfg.head_dim, cfg.block_size);
    let root_d = (d as f64).sqrt();
    let (mut q, mut k) = random_smooth(spec, root);

    let mut needle_key = vec![false; n];
    for pos in spec.needle_positions() {
        needle_key[needle_span(pos, p.needle_len, b)].iter_mut().for_each(|x| *x = true);
    }
    let mut quiet_block = vec![false; n / b];
    for (s, _) in needle_key.iter().enumerate().filter(|(_, x)| **x) {
        quiet_block[s / b] = true;
    }
    let offsets = root.substream(STREAM_DISTRACTOR);
    for h in 0..cfg.n_q_heads {
        for t in 0..n {
            q.row_mut(h, t)[0] = 1.0;
        }
    }
    for h in 0..cfg.n_kv_heads {
        for s in 0..n {
            let row = k.row_mut(h, s);
            if needle_key[s] {
                row.fill(0.0);
                row[0] = (p.needle_logit * root_d) as f32;
            } else {
                let u = if quiet_block[s / b] { 0.0 } else { p.distractor * offsets.uniform((s / b) as u64) };
                row[0] = (u * root_d) as f32;
            }
        }
    }
    (q, k)
}

fn local_window(spec: &WorkloadSpec, root: &CounterRng) -> (HeadTensor, HeadTensor) {
    let cfg = &spec.cfg;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let latent = root.substream(STREAM_LOCAL);
    let k_heads: Vec<Vec<f64>> =
        (0..cfg.n_kv_heads).map(|h| smooth_series(&latent.substream(h as u64), n, d, spec.params.window as f64)).collect();
    let q_heads = (0..cfg.n_q_heads)
        .map(|h| {
            let beta = spec.temperature(h);
            k_heads[cfg.kv_head_of(h)].iter().map(|x| beta * x).collect()
        })
        .collect();
    (stack(q_heads, n, d), stack(k_heads, n, d))
}

/// Key-preference field of the shared-focus workload.
fn focus_field(spec: &WorkloadSpec, root: &CounterRng) -> Vec<f64> {
    let p = &spec.params;
    let rng = root.substream(STREAM_FIELD);
    (0..spec.cfg.seq_len)
        .map(|s| {
            let span = (s / p.focus_span) % 8;
            if span % 2 == 1 && rng.uniform(s as u64) < 0.25 {
                -p.focus_gap * (span / 2) as f64
            } else {
                -p.background
            }
        })
        .collect()
}

fn shared_focus(spec: &WorkloadSpec, root: &CounterRng) -> (HeadTensor, HeadTensor) {
    let cfg = &spec.cfg;
    let p = &spec.params;
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let root_d = (d as f64).sqrt();
    let local_dims = (d - 1) / 2;
    let field = focus_field(spec, root);
    let latent = smooth_series(&root.substream(STREAM_LOCAL), n, local_dims, p.window as f64);
    let noise_q = root.substream(STREAM_NOISE_Q);
    let noise_k = root.substream(STREAM_NOISE_K);

    let k_heads: Vec<Vec<f64>> = (0..cfg.n_kv_heads)
        .map(|h| {
            let rng = noise_k.substream(h as u64);
            let mut data = vec![0.0f64; n * d];
            for s in 0..n {
                let row = &mut data[s * d..(s + 1) * d];
                row[0] = field[s] * root_d;
                row[1..=local_dims].copy_from_slice(&latent[s * local_dims..(s + 1) * local_dims]);
                for (i, x) in row.iter_mut().enumerate().skip(1 + local_dims) {
                    *x = p.noise * rng.normal((s * d + i) as u64);
                }
            }
            data
        })
        .collect();
    let q_heads = (0..cfg.n_q_heads)
        .map(|h| {
            let beta = spec.temperature(h);
            let rng = noise_q.substream(h as u64);
            let mut data = vec![0.0f64; n * d];
            for t in 0..n {
                let row = &mut data[t * d..(t + 1) * d];
                row[0] = beta * p.focus_scale;
                for (i, x) in row[1..=local_dims].iter_mut().enumerate() {
                    *x = beta * p.local_scale * latent[t * local_dims + i];
                }
                for (i, x) in row.iter_mut().enumerate().skip(1 + local_dims) {
                    *x = p.noise * rng.normal((t * d + i) as u64);
                }
            }
            data
        })
        .collect();
    (stack(q_heads, n, d), stack(k_heads, n, d))
}

fn mixture(spec: &WorkloadSpec, root: &CounterRng) -> (HeadTensor, HeadTensor) {
    let cfg = &spec.cfg;
    let parts = [
        local_window(spec, root),
        shared_focus(spec, root),
        random_smooth(spec, root),
        needle(spec, root),
    ];
    let mut q = HeadTensor::zeros(cfg.n_q_heads, cfg.seq_len, cfg.head_dim);
    let mut k = HeadTensor::zeros(cfg.n_kv_heads, cfg.seq_len, cfg.head_dim);
    for h in 0..cfg.n_kv_heads {
        k.head_mut(h).copy_from_slice(parts[h % 4].1.head(h));
    }
    for h in 0..cfg.n_q_heads {
        q.head_mut(h).copy_from_slice(parts[cfg.kv_head_of(h) % 4].0.head(h));
    }
    (q, k)
}
