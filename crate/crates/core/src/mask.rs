//! Per-head top-k block masks from shared scores and per-head budgets.
//!
//! Row `m` of head `i` selects
//! the `K = min(m + 1, max(ceil(ratio_i * (m + 1)), floor))` highest-scoring
//! valid cells, ties to the lower column. The diagonal block is always
//! selected: it counts toward `K` when it ranks in the top `K`, and is added
//! on top of them otherwise. With `force_sink_block`, column 0 is treated
//! the same way.
//!
//! ## PXMK file layout (little-endian)
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `PXMK`                  |
//! | 4      | 4    | version, u32 = 1              |
//! | 8      | 4    | n_heads, u32                  |
//! | 12     | 4    | block rows M, u32             |
//! | 16     | 4    | block columns N/b, u32        |
//! | 20     | ...  | packed bits                   |
//!
//! Bits are the `[head][row][col]` grid in row-major order, packed LSB-first
//! (bit `i` lives in byte `i / 8` at position `i % 8`); the final byte is
//! zero-padded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::AttnConfig;
use crate::dense::BlockScoreMap;
use crate::error::{Error, Result};
use crate::proxy::ProxyScores;
use crate::budget::HeadBudget;

pub const MASK_MAGIC: &[u8; 4] = b"PXMK";
pub const MASK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    n_heads: usize,
    n_rows: usize,
    n_cols: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn empty(n_heads: usize, n_rows: usize, n_cols: usize) -> Self {
        BlockMask { n_heads, n_rows, n_cols, bits: vec![false; n_heads * n_rows * n_cols] }
    }

    /// Every causal block selected.
    pub fn full_causal(n_heads: usize, n_blocks: usize) -> Self {
        let mut mask = Self::empty(n_heads, n_blocks, n_blocks);
        for h in 0..n_heads {
            for m in 0..n_blocks {
                for n in 0..=m {
                    mask.set(h, m, n, true);
                }
            }
        }
        mask
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, h: usize, m: usize, n: usize) -> bool {
        self.bits[(h * self.n_rows + m) * self.n_cols + n]
    }

    #[inline]
    pub fn set(&mut self, h: usize, m: usize, n: usize, on: bool) {
        self.bits[(h * self.n_rows + m) * self.n_cols + n] = on;
    }

    /// Selected columns of one row, ascending.
    pub fn row_cols(&self, h: usize, m: usize) -> Vec<usize> {
        (0..self.n_cols).filter(|&n| self.get(h, m, n)).collect()
    }

    pub fn row_count(&self, h: usize, m: usize) -> usize {
        let start = (h * self.n_rows + m) * self.n_cols;
        self.bits[start..start + self.n_cols].iter().filter(|&&b| b).count()
    }

    pub fn head_count(&self, h: usize) -> usize {
        (0..self.n_rows).map(|m| self.row_count(h, m)).sum()
    }

    pub fn selected_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of causally valid cells per head.
    pub fn causal_cells(&self) -> usize {
        (0..self.n_rows).map(|m| (m + 1).min(self.n_cols)).sum()
    }

    /// Checks no selection lies above the diagonal and every diagonal block is selected.
    pub fn check_causal_and_diagonal(&self) -> Result<()> {
        for h in 0..self.n_heads {
            for m in 0..self.n_rows {
                if m < self.n_cols && !self.get(h, m, m) {
                    return Err(Error::Invariant(format!("head {h} row {m} misses its diagonal block")));
                }
                if let Some(n) = (m + 1..self.n_cols).find(|&n| self.get(h, m, n)) {
                    return Err(Error::Invariant(format!("head {h} row {m} selects future block {n}")));
                }
            }
        }
        Ok(())
    }

    /// `true` when every cell selected here is also selected in `other`.
    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Minimum blocks per row: `ceil(min_budget_tokens / block_size)`.
pub fn min_budget_floor(cfg: &AttnConfig) -> usize {
    cfg.min_budget_tokens.div_ceil(cfg.block_size)
}

/// Blocks to select in a row with `admissible` causal blocks.
pub fn row_budget(ratio: f64, admissible: usize, floor: usize) -> usize {
    // Ratios are k / M; the epsilon keeps exact products like (2/3) * 3 at 2.
    let scaled = (ratio * admissible as f64 - 1e-9).ceil().max(0.0) as usize;
    admissible.min(scaled.max(floor))
}

fn select_row(map: &BlockScoreMap, m: usize, count: usize, force_sink: bool) -> Vec<usize> {
    let mut picked = map.ranked_row(m);
    picked.truncate(count);
    for forced in [Some(m), force_sink.then_some(0)].into_iter().flatten() {
        if !picked.contains(&forced) {
            picked.push(forced);
        }
    }
    picked
}

/// Builds a mask from one score map per head (maps may be shared between heads).
pub fn build_mask_from_maps(maps: &[&BlockScoreMap], budgets: &[HeadBudget], cfg: &AttnConfig) -> Result<BlockMask> {
    let nb = cfg.n_blocks();
    if maps.len() != budgets.len() {
        return Err(Error::Shape(format!("{} score maps for {} budgets", maps.len(), budgets.len())));
    }
    if let Some(map) = maps.iter().find(|m| m.n_rows() != nb || m.n_cols() != nb) {
        return Err(Error::Shape(format!(
            "score map is {}x{}, config expects {nb}x{nb}",
            map.n_rows(),
            map.n_cols()
        )));
    }
    let mut mask = BlockMask::empty(maps.len(), nb, nb);
    for (h, (map, budget)) in maps.iter().zip(budgets).enumerate() {
        if !(budget.ratio > 0.0 && budget.ratio <= 1.0) {
            return Err(Error::Validation(format!("head {h} budget ratio {} outside (0, 1]", budget.ratio)));
        }
        for m in 0..nb {
            let count = row_budget(budget.ratio, m + 1, budget.blocks_per_row_floor);
            for c in select_row(map, m, count, cfg.force_sink_block) {
                mask.set(h, m, c, true);
            }
        }
    }
    Ok(mask)
}

/// Per-head masks from group-shared proxy scores.
pub fn build_mask(scores: &ProxyScores, budgets: &[HeadBudget], cfg: &AttnConfig) -> Result<BlockMask> {
    if budgets.len() != cfg.n_q_heads || scores.group_of_q_head.len() != cfg.n_q_heads {
        return Err(Error::Shape(format!(
            "{} budgets and {} grouped heads for {} query heads",
            budgets.len(),
            scores.group_of_q_head.len(),
            cfg.n_q_heads
        )));
    }
    let maps: Vec<&BlockScoreMap> = (0..cfg.n_q_heads).map(|h| scores.for_head(h)).collect();
    build_mask_from_maps(&maps, budgets, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sparsity {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// `1 - selected / causally valid` per head, and the mean over heads.
pub fn mask_sparsity(mask: &BlockMask) -> Sparsity {
    let valid = mask.causal_cells() as f64;
    let per_head: Vec<f64> = (0..mask.n_heads()).map(|h| 1.0 - mask.head_count(h) as f64 / valid).collect();
    let mean = per_head.iter().sum::<f64>() / per_head.len().max(1) as f64;
    Sparsity { per_head, mean }
}

pub fn write_mask<W: Write>(mask: &BlockMask, mut w: W) -> std::io::Result<()> {
    w.write_all(MASK_MAGIC)?;
    for v in [MASK_VERSION, mask.n_heads as u32, mask.n_rows as u32, mask.n_cols as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut packed = vec![0u8; mask.bits.len().div_ceil(8)];
    for (i, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        packed[i / 8] |= 1 << (i % 8);
    }
    w.write_all(&packed)?;
    w.flush()
}

pub fn read_mask<R: Read>(mut r: R) -> Result<BlockMask> {
    let mut header = [0u8; 20];
    let mut filled = 0;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) => return Err(Error::Format { offset: filled as u64, message: e.to_string() }),
        }
    }
    if filled < 4 || &header[..4] != MASK_MAGIC {
        return Err(Error::Format { offset: 0, message: "missing PXMK magic".into() });
    }
    if filled < header.len() {
        return Err(Error::Format { offset: filled as u64, message: "truncated PXMK header".into() });
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != MASK_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported PXMK version {}", word(4)) });
    }
    let (n_heads, n_rows, n_cols) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let n_bits = n_heads * n_rows * n_cols;
    let mut packed = vec![0u8; n_bits.div_ceil(8)];
    r.read_exact(&mut packed)
        .map_err(|e| Error::Format { offset: 20, message: format!("truncated PXMK payload: {e}") })?;
    let bits = (0..n_bits).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(BlockMask { n_heads, n_rows, n_cols, bits })
}

pub fn write_mask_file(mask: &BlockMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_mask(mask, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<BlockMask> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_mask(BufReader::new(file))
}

/// Selected cells as `head,row,col` lines under a header.
pub fn write_mask_csv<W: Write>(mask: &BlockMask, mut w: W) -> std::io::Result<()> {
    writeln!(w, "head,row,col")?;
    for h in 0..mask.n_heads {
        for m in 0..mask.n_rows {
            for n in mask.row_cols(h, m) {
                writeln!(w, "{h},{m},{n}")?;
            }
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map_from_rows(rows: &[&[f32]]) -> BlockScoreMap {
        let n = rows.len();
        let mut map = BlockScoreMap::causal_zeros(n);
        for (m, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate().take(m + 1) {
                map.set(m, c, v);
            }
        }
        map
    }

    fn budget(ratio: f64, floor: usize) -> HeadBudget {
        HeadBudget { ratio, blocks: 0, blocks_per_row_floor: floor }
    }

    fn cfg_blocks(nb: usize) -> AttnConfig {
        AttnConfig { n_q_heads: 1, n_kv_heads: 1, block_size: 4, stride: 1, ..Default::default() }.with_seq_len(4 * nb)
    }

    #[test]
    fn full_budget_is_full_causal_mask() {
        let map = map_from_rows(&[&[0.3], &[0.1, 0.2], &[0.1, 0.7, 0.2], &[0.4, 0.3, 0.2, 0.1]]);
        let mask = build_mask_from_maps(&[&map], &[budget(1.0, 0)], &cfg_blocks(4)).unwrap();
        assert_eq!(mask, BlockMask::full_causal(1, 4));
        assert_eq!(mask_sparsity(&mask).mean, 0.0);
    }

    #[test]
    fn hand_enumerated_row_selection() {
        let map = map_from_rows(&[&[1.0], &[0.5, 0.5], &[0.1, 0.7, 0.2]]);
        // Column 1 wins; the diagonal (col 2) joins it unless already picked.
        assert_eq!(select_row(&map, 2, 1, false), vec![1, 2]);
        assert_eq!(select_row(&map, 2, 2, false), vec![1, 2]);
        assert_eq!(select_row(&map, 2, 3, false), vec![1, 2, 0]);
        assert_eq!(select_row(&map, 2, 1, true), vec![1, 2, 0]);
        let diag_top = map_from_rows(&[&[1.0], &[0.5, 0.5], &[0.1, 0.2, 0.7]]);
        assert_eq!(select_row(&diag_top, 2, 1, false), vec![2]);
    }

    #[test]
    fn ties_go_to_lower_column() {
        let map = map_from_rows(&[&[0.0], &[0.0, 0.0], &[0.0, 0.0, 0.0], &[0.2, 0.2, 0.2, 0.2]]);
        assert_eq!(select_row(&map, 3, 2, false), vec![0, 1, 3]);
        assert_eq!(select_row(&map, 3, 4, false), vec![0, 1, 2, 3]);
    }

    #[test]
    fn floor_values() {
        let c = |tokens| AttnConfig { min_budget_tokens: tokens, block_size: 64, ..Default::default() };
        assert_eq!(min_budget_floor(&c(2048)), 32);
        assert_eq!(min_budget_floor(&c(0)), 0);
        assert_eq!(min_budget_floor(&c(1024)), 16);
        assert_eq!(min_budget_floor(&c(1)), 1);
    }

    #[test]
    fn row_budget_rounding() {
        assert_eq!(row_budget(2.0 / 3.0, 3, 0), 2);
        assert_eq!(row_budget(0.25, 1, 0), 1);
        assert_eq!(row_budget(0.25, 5, 0), 2);
        assert_eq!(row_budget(0.25, 5, 4), 4);
        assert_eq!(row_budget(0.25, 3, 4), 3);
    }

    #[test]
    fn diagonal_only_sparsity_closed_form() {
        let m = 10;
        let mut mask = BlockMask::empty(2, m, m);
        for h in 0..2 {
            for r in 0..m {
                mask.set(h, r, r, true);
            }
        }
        let s = mask_sparsity(&mask);
        let expected = 1.0 - 2.0 / (m as f64 + 1.0);
        assert!((s.mean - expected).abs() < 1e-12);
        assert_eq!(mask_sparsity(&BlockMask::full_causal(3, 7)).mean, 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let map = map_from_rows(&[&[1.0], &[0.5, 0.5]]);
        assert!(matches!(build_mask_from_maps(&[&map], &[budget(1.0, 0)], &cfg_blocks(4)), Err(Error::Shape(_))));
        assert!(matches!(build_mask_from_maps(&[&map], &[], &cfg_blocks(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn pxmk_layout_and_errors() {
        let mut mask = BlockMask::empty(1, 3, 3);
        mask.set(0, 0, 0, true);
        mask.set(0, 2, 1, true);
        let mut buf = Vec::new();
        write_mask(&mask, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"PXMK");
        assert_eq!(&buf[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0]);
        // bit 0 and bit 7 (row 2, col 1) set, then bit 8 unset
        assert_eq!(&buf[20..], &[0b1000_0001, 0]);
        assert_eq!(read_mask(&buf[..]).unwrap(), mask);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_mask(&bad[..]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(read_mask(&buf[..21]), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_lists_selected_triples() {
        let mask = BlockMask::full_causal(1, 2);
        let mut out = Vec::new();
        write_mask_csv(&mask, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "head,row,col\n0,0,0\n0,1,0\n0,1,1\n");
    }

    fn arb_map(nb: usize) -> impl Strategy<Value = BlockScoreMap> {
        proptest::collection::vec(0.0f32..1.0, nb * nb).prop_map(move |v| {
            let mut map = BlockScoreMap::causal_zeros(nb);
            for m in 0..nb {
                for c in 0..=m {
                    map.set(m, c, v[m * nb + c]);
                }
            }
            map
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn counts_diagonal_and_nesting(map in arb_map(12), r1 in 0.01f64..1.0, r2 in 0.01f64..1.0, floor in 0usize..5) {
            let cfg = cfg_blocks(12);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = build_mask_from_maps(&[&map], &[budget(lo, floor)], &cfg).unwrap();
            let b = build_mask_from_maps(&[&map], &[budget(hi, floor)], &cfg).unwrap();
            a.check_causal_and_diagonal().unwrap();
            for m in 0..12 {
                let adm = m + 1;
                let k = adm.min(((lo * adm as f64) - 1e-9).ceil().max(floor as f64) as usize);
                // oracle: sort (score desc, column asc), keep k, add the diagonal
                let mut cols: Vec<usize> = (0..adm).collect();
                cols.sort_by(|&x, &y| map.get(m, y).partial_cmp(&map.get(m, x)).unwrap().then(x.cmp(&y)));
                let mut expected: Vec<usize> = cols[..k].to_vec();
                if !expected.contains(&m) {
                    expected.push(m);
                }
                expected.sort_unstable();
                prop_assert_eq!(a.row_cols(0, m), expected);
            }
            prop_assert!(a.is_subset_of(&b));
            let again = build_mask_from_maps(&[&map], &[budget(lo, floor)], &cfg).unwrap();
            prop_assert_eq!(a.clone(), again);

            let mut buf = Vec::new();
            write_mask(&a, &mut buf).unwrap();
            prop_assert_eq!(read_mask(&buf[..]).unwrap(), a);
        }
    }
}
