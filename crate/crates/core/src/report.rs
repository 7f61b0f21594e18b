//! CSV reports.
//!
//! Every report opens with `#`-prefixed metadata lines: the schema line
//! (`# proxyattn report v1` or `# proxyattn head-analysis v1`), an optional
//! `# generated_unix=<seconds>` line, then one `# key=value` line per run
//! parameter. A single header row follows, then data rows. Numbers use the
//! shortest representation that round-trips.

use std::io::{self, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::pipeline::PipelineResult;

pub const REPORT_SCHEMA: &str = "# proxyattn report v1";
pub const ANALYSIS_SCHEMA: &str = "# proxyattn head-analysis v1";

pub const REPORT_COLUMNS: [&str; 18] = [
    "estimator",
    "gamma",
    "stride",
    "groups",
    "min_budget",
    "head",
    "budget_ratio",
    "budget_blocks",
    "sparsity",
    "recall",
    "max_abs_err",
    "mean_cosine",
    "min_cosine",
    "sparse_macs",
    "dense_macs",
    "est_macs",
    "est_cost_ratio",
    "formula_cost_ratio",
];

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Schema line, optional timestamp and `key=value` metadata comments.
pub fn write_preamble<W: Write>(w: &mut W, schema: &str, timestamp: Option<u64>, meta: &[(String, String)]) -> io::Result<()> {
    writeln!(w, "{schema}")?;
    if let Some(ts) = timestamp {
        writeln!(w, "# generated_unix={ts}")?;
    }
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

pub fn write_report_header<W: Write>(w: &mut W) -> io::Result<()> {
    writeln!(w, "{}", REPORT_COLUMNS.join(","))
}

/// One row per head, in head order.
pub fn write_report_rows<W: Write>(w: &mut W, r: &PipelineResult) -> io::Result<()> {
    let c = &r.cfg;
    let est_cost = r.estimation_cost();
    let formula = crate::pipeline::formula_cost_ratio(c);
    for h in &r.heads {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.estimator,
            c.gamma,
            c.stride,
            c.n_proxy_groups,
            c.min_budget_tokens,
            h.head,
            h.budget.ratio,
            h.budget.blocks,
            h.sparsity,
            h.recall,
            h.max_abs_err,
            h.mean_cosine,
            h.min_cosine,
            h.sparse_macs,
            h.dense_macs,
            r.estimation_macs,
            est_cost,
            formula,
        )?;
    }
    Ok(())
}

/// Head analysis in long form: `table,i,j,value`.
///
/// `overlap` rows hold matrix entry `(i, j)`; `curve` rows hold head `i`'s
/// cumulative mass over the top `j` keys of the shared ranking (`j` from 1).
pub fn write_head_analysis<W: Write>(w: &mut W, overlap: &[Vec<f64>], curves: &[Vec<f64>]) -> io::Result<()> {
    writeln!(w, "table,i,j,value")?;
    for (i, row) in overlap.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            writeln!(w, "overlap,{i},{j},{v}")?;
        }
    }
    for (i, curve) in curves.iter().enumerate() {
        for (r, v) in curve.iter().enumerate() {
            writeln!(w, "curve,{i},{},{v}", r + 1)?;
        }
    }
    Ok(())
}
