//! Neuron selection policies.
//!
//! * [`topk_select`] / [`threshold_select`]: magnitude baselines.
//! * [`chunk_select`]: multi-scale utility-guided chunk selection. Candidate
//!   windows of several sizes are scored by importance per modeled latency,
//!   sorted, and accepted greedily while they fit the row budget and do not
//!   overlap earlier picks.
//! * [`oracle_select`]: exhaustive search of the importance-per-latency
//!   objective for small instances, used to bound the greedy's quality.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::latency::{estimate_mask_latency, LatencyTable};
use crate::mask::{ImportanceVector, SelectionMask, WeightLayout};

pub const KIB: u64 = 1024;

/// Largest row count [`oracle_select`] will enumerate.
pub const ORACLE_MAX_ROWS: usize = 20;

/// Chunk-size search range and stride cap, all in KiB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSelectParams {
    pub chunk_sz_start_kb: u32,
    pub chunk_sz_end_kb: u32,
    pub chunk_sz_step_kb: u32,
    pub jump_cap_kb: u32,
}

/// [`ChunkSelectParams`] converted to row units for one layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowParams {
    pub r_min: usize,
    pub r_max: usize,
    pub r_step: usize,
    pub jump_cap_rows: usize,
}

impl ChunkSelectParams {
    pub fn new(start_kb: u32, end_kb: u32, step_kb: u32, jump_cap_kb: u32) -> Result<Self> {
        let p = Self {
            chunk_sz_start_kb: start_kb,
            chunk_sz_end_kb: end_kb,
            chunk_sz_step_kb: step_kb,
            jump_cap_kb,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_sz_start_kb == 0
            || self.chunk_sz_step_kb == 0
            || self.jump_cap_kb == 0
            || self.chunk_sz_start_kb > self.chunk_sz_end_kb
        {
            return Err(Error::Input(format!(
                "chunk params need 1 <= start <= end, step >= 1, jump_cap >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Floors KiB quantities to whole rows, never below one row.
    pub fn to_rows(&self, layout: WeightLayout) -> RowParams {
        let rows = |kb: u32| ((kb as u64 * KIB) / layout.row_bytes as u64).max(1) as usize;
        RowParams {
            r_min: rows(self.chunk_sz_start_kb),
            r_max: rows(self.chunk_sz_end_kb),
            r_step: rows(self.chunk_sz_step_kb),
            jump_cap_rows: rows(self.jump_cap_kb),
        }
    }

    /// Tuned start/step and jump cap for known matrix shapes (2-byte
    /// elements), falling back to 8 KiB. `end_kb` normally comes from the
    /// device's saturation size.
    pub fn tuned_default(layout: WeightLayout, device: DeviceClass, end_kb: u32) -> Self {
        let cols = layout.row_bytes / 2;
        let (start, cap) = TUNED_SHAPES
            .iter()
            .find(|s| s.0 == layout.n_rows && s.1 == cols && layout.row_bytes.is_multiple_of(2))
            .map(|s| match device {
                DeviceClass::HighEnd => (s.2, s.3),
                DeviceClass::LowEnd => (s.4, s.5),
            })
            .unwrap_or((8, 8));
        Self {
            chunk_sz_start_kb: start,
            chunk_sz_end_kb: end_kb.max(start),
            chunk_sz_step_kb: start,
            jump_cap_kb: cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceClass {
    HighEnd,
    LowEnd,
}

// (rows, cols, high-end start, high-end cap, low-end start, low-end cap)
const TUNED_SHAPES: &[(usize, usize, u32, u32, u32, u32)] = &[
    (3584, 3584, 20, 20, 24, 36),
    (8960, 1536, 16, 16, 20, 20),
    (896, 4864, 8, 8, 8, 8),
    (4096, 1024, 12, 12, 16, 16),
    (3584, 18944, 8, 8, 8, 8),
    (4096, 4096, 20, 20, 24, 24),
    (18944, 3584, 32, 32, 36, 36),
    (1536, 1536, 16, 12, 16, 12),
    (1536, 256, 8, 8, 8, 8),
    (896, 128, 8, 8, 8, 8),
    (14336, 4096, 32, 32, 40, 36),
    (4864, 896, 12, 16, 20, 16),
    (3584, 512, 8, 12, 8, 12),
    (896, 896, 8, 8, 8, 8),
    (4096, 14336, 8, 8, 8, 8),
    (1536, 8960, 8, 8, 8, 8),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateChunk {
    pub start: usize,
    pub len_rows: usize,
    /// Summed importance over modeled latency.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mask: SelectionMask,
    pub selected_rows: usize,
    pub estimated_latency_us: f64,
    pub total_importance: f64,
    pub objective: f64,
    pub elapsed_us: u64,
}

impl SelectionResult {
    fn finish(
        mask: SelectionMask,
        v: &ImportanceVector,
        layout: WeightLayout,
        table: &LatencyTable,
        started: Instant,
    ) -> Result<Self> {
        let elapsed_us = started.elapsed().as_micros() as u64;
        let estimated_latency_us = estimate_mask_latency(&mask, layout, table)?;
        let total_importance = v.masked_sum(&mask);
        Ok(Self {
            selected_rows: mask.popcount(),
            objective: ratio(total_importance, estimated_latency_us),
            mask,
            estimated_latency_us,
            total_importance,
            elapsed_us,
        })
    }
}

fn ratio(importance: f64, latency: f64) -> f64 {
    if latency > 0.0 {
        importance / latency
    } else {
        0.0
    }
}

/// `round((1 - sparsity) * n_rows)`; sparsity is the dropped fraction.
pub fn budget_from_sparsity(sparsity: f64, n_rows: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Input(format!(
            "sparsity must be in [0, 1], got {sparsity}"
        )));
    }
    Ok(((1.0 - sparsity) * n_rows as f64).round() as usize)
}

fn check_budget(budget: usize, n_rows: usize) -> Result<()> {
    if budget > n_rows {
        return Err(Error::Budget { budget, n_rows });
    }
    Ok(())
}

/// Descending by value, ascending index on ties.
fn by_importance_desc(values: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest values (ties to the lower index), unordered.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_importance_desc(values));
        idx.truncate(k);
    }
    idx
}

/// Exactly `budget` rows at the largest importances, ties to lower index.
pub fn topk_select(v: &ImportanceVector, budget: usize) -> Result<SelectionMask> {
    check_budget(budget, v.len())?;
    SelectionMask::from_indices(v.len(), &top_k_indices(v.values(), budget))
}

/// Rows whose importance strictly exceeds `tau`.
pub fn threshold_select(v: &ImportanceVector, tau: f64) -> Result<SelectionMask> {
    if !(tau >= 0.0) {
        return Err(Error::Input(format!("threshold must be >= 0, got {tau}")));
    }
    Ok(SelectionMask::from_bits(
        v.values().iter().map(|&x| x > tau).collect(),
    ))
}

/// Mean absolute activation per neuron over a token x neuron matrix.
pub fn importance_from_activations(tokens: &[Vec<f64>]) -> Result<ImportanceVector> {
    let first = tokens
        .first()
        .ok_or_else(|| Error::Input("activation matrix has no tokens".into()))?;
    let n = first.len();
    if n == 0 {
        return Err(Error::Input("activation matrix has no neurons".into()));
    }
    let mut acc = vec![0.0f64; n];
    for (t, row) in tokens.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Input(format!(
                "token {t} has {} activations, expected {n}",
                row.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x.abs();
        }
    }
    let count = tokens.len() as f64;
    ImportanceVector::new(acc.into_iter().map(|a| a / count).collect())
}

/// Scores every window of every configured size. Window starts advance by
/// `min(r, jump_cap_rows)` and stop at `n_rows - r`; no clamped tail window.
pub fn generate_candidates(
    layout: WeightLayout,
    params: &ChunkSelectParams,
    table: &LatencyTable,
    prefix: &[f64],
    exec: Exec,
) -> Vec<CandidateChunk> {
    debug_assert_eq!(prefix.len(), layout.n_rows + 1);
    let rp = params.to_rows(layout);
    let n = layout.n_rows;
    let sizes: Vec<usize> = (rp.r_min..=rp.r_max.min(n)).step_by(rp.r_step).collect();
    let per_size = exec.map_range(sizes.len(), |k| {
        let r = sizes[k];
        let stride = r.min(rp.jump_cap_rows);
        let cost = table.lookup(r as u64 * layout.row_bytes as u64);
        (0..=n - r)
            .step_by(stride)
            .map(|i| CandidateChunk {
                start: i,
                len_rows: r,
                score: (prefix[i + r] - prefix[i]) / cost,
            })
            .collect::<Vec<_>>()
    });
    per_size.concat()
}

/// Packs a candidate into a key whose ascending order equals [`candidate_order`].
fn sort_key(score: f64, start: usize, len_rows: usize) -> u128 {
    let bits = score.to_bits();
    let mono = if bits >> 63 == 1 {
        !bits
    } else {
        bits | 1 << 63
    };
    (!mono as u128) << 64 | (start as u128) << 32 | (u32::MAX - len_rows as u32) as u128
}

fn decode_key(key: u128) -> (usize, usize) {
    let start = (key >> 32) as u32 as usize;
    let len_rows = (u32::MAX - key as u32) as usize;
    (start, len_rows)
}

fn candidate_keys(
    layout: WeightLayout,
    params: &ChunkSelectParams,
    table: &LatencyTable,
    prefix: &[f64],
    exec: Exec,
    keys: &mut Vec<u128>,
) {
    let rp = params.to_rows(layout);
    let n = layout.n_rows;
    let sizes: Vec<usize> = (rp.r_min..=rp.r_max.min(n)).step_by(rp.r_step).collect();
    let counts: Vec<usize> = sizes
        .iter()
        .map(|&r| (n - r) / r.min(rp.jump_cap_rows) + 1)
        .collect();
    keys.clear();
    keys.resize(counts.iter().sum(), 0);
    let mut slices = Vec::with_capacity(sizes.len());
    let mut rest = keys.as_mut_slice();
    for &c in &counts {
        let (head, tail) = rest.split_at_mut(c);
        slices.push(head);
        rest = tail;
    }
    let fill = |(r, out): (usize, &mut [u128])| {
        let stride = r.min(rp.jump_cap_rows);
        let cost = table.lookup(r as u64 * layout.row_bytes as u64);
        for (slot, i) in out.iter_mut().zip((0..=n - r).step_by(stride)) {
            *slot = sort_key((prefix[i + r] - prefix[i]) / cost, i, r);
        }
    };
    exec.for_each(sizes.into_iter().zip(slices).collect(), fill);
}

thread_local! {
    static KEY_SCRATCH: std::cell::RefCell<Vec<u128>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Score descending, then start ascending, then length descending.
pub fn candidate_order(a: &CandidateChunk, b: &CandidateChunk) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(b.len_rows.cmp(&a.len_rows))
}

/// Greedy multi-scale chunk selection with the default execution policy.
pub fn chunk_select(
    v: &ImportanceVector,
    budget: usize,
    layout: WeightLayout,
    table: &LatencyTable,
    params: &ChunkSelectParams,
) -> Result<SelectionResult> {
    chunk_select_with(v, budget, layout, table, params, Exec::default())
}

pub fn chunk_select_with(
    v: &ImportanceVector,
    budget: usize,
    layout: WeightLayout,
    table: &LatencyTable,
    params: &ChunkSelectParams,
    exec: Exec,
) -> Result<SelectionResult> {
    let started = Instant::now();
    v.check_len(layout.n_rows)?;
    check_budget(budget, layout.n_rows)?;
    params.validate()?;
    if layout.n_rows > u32::MAX as usize {
        return Err(Error::Input(format!(
            "{} rows exceeds the supported maximum",
            layout.n_rows
        )));
    }

    let mut mask = SelectionMask::zeros(layout.n_rows);
    if budget > 0 {
        let prefix = v.prefix_sums();
        KEY_SCRATCH.with_borrow_mut(|keys| {
            candidate_keys(layout, params, table, &prefix, exec, keys);
            let mut rest = keys.as_mut_slice();
            let mut block = budget.max(1024);
            let mut selected = 0;
            while !rest.is_empty() && selected < budget {
                if rest.len() > block {
                    rest.select_nth_unstable(block);
                }
                let (head, tail) = rest.split_at_mut(block.min(rest.len()));
                exec.sort_unstable(head);
                selected = greedy_fill(
                    &mut mask,
                    head.iter().map(|&k| decode_key(k)),
                    selected,
                    budget,
                );
                rest = tail;
                block *= 2;
            }
        });
    }
    SelectionResult::finish(mask, v, layout, table, started)
}

/// Accepts sorted candidates that fit the remaining budget and overlap no
/// selected row, continuing from `selected` rows already taken. Returns the
/// updated count.
fn greedy_fill(
    mask: &mut SelectionMask,
    sorted: impl Iterator<Item = (usize, usize)>,
    mut selected: usize,
    budget: usize,
) -> usize {
    for (start, len_rows) in sorted {
        if len_rows > budget - selected {
            continue;
        }
        let rows = start..start + len_rows;
        if mask.any_in(rows.clone()) {
            continue;
        }
        mask.set_range(rows);
        selected += len_rows;
        if selected >= budget {
            break;
        }
    }
    selected
}

/// Selected importance divided by estimated latency; 0 for an empty mask.
pub fn objective(
    mask: &SelectionMask,
    v: &ImportanceVector,
    layout: WeightLayout,
    table: &LatencyTable,
) -> Result<f64> {
    v.check_len(layout.n_rows)?;
    let latency = estimate_mask_latency(mask, layout, table)?;
    Ok(ratio(v.masked_sum(mask), latency))
}

/// Lexicographic comparison of the ascending index lists of two bitmasks.
fn index_list_cmp(a: u32, b: u32) -> Ordering {
    if a == b {
        return Ordering::Equal;
    }
    let d = (a ^ b).trailing_zeros();
    let above = !((2u64 << d) - 1) as u32;
    let a_has_d = a >> d & 1 == 1;
    let lacking = if a_has_d { b } else { a };
    // The list lacking index d is a strict prefix when it has nothing above d.
    let holder_is_smaller = lacking & above != 0;
    if a_has_d == holder_is_smaller {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

#[derive(Clone, Copy)]
struct Best {
    objective: f64,
    bits: u32,
}

impl Best {
    fn better_of(self, other: Best) -> Best {
        match other.objective.total_cmp(&self.objective) {
            Ordering::Greater => other,
            Ordering::Less => self,
            Ordering::Equal => {
                if index_list_cmp(other.bits, self.bits) == Ordering::Less {
                    other
                } else {
                    self
                }
            }
        }
    }
}

/// Exhaustive maximizer of importance per latency over all masks with at
/// most `budget` rows. Ties go to the lexicographically smallest index list;
/// the empty mask scores 0.
pub fn oracle_select(
    v: &ImportanceVector,
    budget: usize,
    layout: WeightLayout,
    table: &LatencyTable,
) -> Result<SelectionResult> {
    oracle_select_with(v, budget, layout, table, Exec::default())
}

pub fn oracle_select_with(
    v: &ImportanceVector,
    budget: usize,
    layout: WeightLayout,
    table: &LatencyTable,
    exec: Exec,
) -> Result<SelectionResult> {
    let started = Instant::now();
    let n = layout.n_rows;
    if n > ORACLE_MAX_ROWS {
        return Err(Error::Size {
            n_rows: n,
            max: ORACLE_MAX_ROWS,
        });
    }
    v.check_len(n)?;
    check_budget(budget, n)?;

    let run_cost: Vec<f64> = (0..=n)
        .map(|r| table.lookup(r as u64 * layout.row_bytes as u64))
        .collect();
    let values = v.values();
    let eval = |bits: u32| -> Best {
        let mut importance = 0.0;
        let mut b = bits;
        while b != 0 {
            importance += values[b.trailing_zeros() as usize];
            b &= b - 1;
        }
        let mut latency = 0.0;
        let mut m = bits as u64;
        while m != 0 {
            m >>= m.trailing_zeros();
            let run = (!m).trailing_zeros();
            latency += run_cost[run as usize];
            m >>= run;
        }
        Best {
            objective: ratio(importance, latency),
            bits,
        }
    };

    let total = 1u32 << n;
    let blocks = total.div_ceil(1 << 12) as usize;
    let empty = Best {
        objective: 0.0,
        bits: 0,
    };
    let best = exec
        .map_range(blocks, |blk| {
            let lo = (blk as u32) << 12;
            let hi = (lo + (1 << 12)).min(total);
            (lo.max(1)..hi)
                .filter(|m| m.count_ones() as usize <= budget)
                .map(eval)
                .fold(empty, Best::better_of)
        })
        .into_iter()
        .fold(empty, Best::better_of);

    let bits = (0..n).map(|i| best.bits >> i & 1 == 1).collect();
    SelectionResult::finish(SelectionMask::from_bits(bits), v, layout, table, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{synthesize_table, SyntheticDeviceParams};

    fn iv(v: &[f64]) -> ImportanceVector {
        ImportanceVector::new(v.to_vec()).unwrap()
    }

    fn kb_layout(n: usize) -> WeightLayout {
        WeightLayout::new(n, 1024).unwrap()
    }

    #[test]
    fn topk_examples() {
        let v = iv(&[0.1, 0.9, 0.5, 0.7]);
        assert_eq!(topk_select(&v, 2).unwrap().indices(), vec![1, 3]);
        assert_eq!(topk_select(&v, 0).unwrap().popcount(), 0);
        assert_eq!(topk_select(&v, 4).unwrap(), SelectionMask::ones(4));
        assert!(matches!(topk_select(&v, 5), Err(Error::Budget { .. })));
        // ties resolve to the lower index
        let flat = iv(&[1.0; 6]);
        assert_eq!(topk_select(&flat, 3).unwrap().indices(), vec![0, 1, 2]);
    }

    #[test]
    fn threshold_examples() {
        let v = iv(&[0.1, 0.9, 0.5]);
        assert_eq!(threshold_select(&v, 0.4).unwrap().indices(), vec![1, 2]);
        assert_eq!(threshold_select(&v, 0.0).unwrap().popcount(), 3);
        assert_eq!(threshold_select(&v, 0.9).unwrap().popcount(), 0);
        assert!(threshold_select(&v, -1.0).is_err());
    }

    #[test]
    fn importance_examples() {
        let single = importance_from_activations(&[vec![-2.0, 3.0]]).unwrap();
        assert_eq!(single.values(), &[2.0, 3.0]);
        let v = importance_from_activations(&[vec![1.0, -1.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(v.values(), &[2.0, 1.0]);
        let flip = importance_from_activations(&[vec![4.0], vec![-4.0]]).unwrap();
        assert_eq!(flip.values(), &[4.0]);
        assert!(importance_from_activations(&[]).is_err());
        assert!(importance_from_activations(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn sparsity_to_budget() {
        assert_eq!(budget_from_sparsity(0.4, 10).unwrap(), 6);
        assert_eq!(budget_from_sparsity(0.0, 7).unwrap(), 7);
        assert!(budget_from_sparsity(1.5, 7).is_err());
    }

    #[test]
    fn row_conversion_floors_and_clamps() {
        let p = ChunkSelectParams::new(32, 236, 32, 32).unwrap();
        let rp = p.to_rows(WeightLayout::new(18944, 7168).unwrap());
        assert_eq!(
            rp,
            RowParams {
                r_min: 4,
                r_max: 33,
                r_step: 4,
                jump_cap_rows: 4
            }
        );
        // row larger than s_min clamps to one row
        let p = ChunkSelectParams::new(2, 8, 2, 2).unwrap();
        assert_eq!(p.to_rows(WeightLayout::new(10, 4096).unwrap()).r_min, 1);
        assert!(ChunkSelectParams::new(8, 4, 1, 1).is_err());
        assert!(ChunkSelectParams::new(1, 4, 0, 1).is_err());
    }

    #[test]
    fn candidate_windows_follow_loop_bounds() {
        let layout = kb_layout(10);
        let v = iv(&[1.0; 10]);
        let table = LatencyTable::new("t", vec![(1024, 10.0), (8192, 20.0)], 1.0).unwrap();
        let p = ChunkSelectParams::new(2, 4, 2, 2).unwrap();
        let c = generate_candidates(layout, &p, &table, &v.prefix_sums(), Exec::Sequential);
        let starts = |r: usize| -> Vec<usize> {
            c.iter()
                .filter(|x| x.len_rows == r)
                .map(|x| x.start)
                .collect()
        };
        assert_eq!(starts(2), vec![0, 2, 4, 6, 8]);
        assert_eq!(starts(4), vec![0, 2, 4, 6]);
        assert_eq!(c.len(), 9);
    }

    #[test]
    fn larger_windows_score_higher_with_overhead() {
        let layout = kb_layout(64);
        let v = iv(&[0.5; 64]);
        let table = synthesize_table(&SyntheticDeviceParams {
            fixed_overhead_us: 20.0,
            bandwidth_bytes_per_us: 100.0,
            step_bytes: 1024,
            max_bytes: 64 * 1024,
        })
        .unwrap();
        let p = ChunkSelectParams::new(1, 16, 1, 16).unwrap();
        let c = generate_candidates(layout, &p, &table, &v.prefix_sums(), Exec::Sequential);
        let score_of = |r: usize| c.iter().find(|x| x.len_rows == r).unwrap().score;
        for r in 1..16 {
            assert!(score_of(r + 1) > score_of(r));
        }
    }

    /// Literal transcription of the pseudocode loop, kept independent of
    /// the production path (stable sort over a fully materialized list).
    fn reference_trace(
        v: &[f64],
        budget: usize,
        row_kb: f64,
        s: (f64, f64, f64, f64),
        cost: impl Fn(usize) -> f64,
    ) -> Vec<usize> {
        let conv = |kb: f64| ((kb / row_kb).floor() as usize).max(1);
        let (r_min, r_max, dr, cap) = (conv(s.0), conv(s.1), conv(s.2), conv(s.3));
        let n = v.len();
        let mut cumsum = vec![0.0];
        for x in v {
            cumsum.push(cumsum.last().unwrap() + x);
        }
        let mut cands = Vec::new();
        let mut r = r_min;
        while r <= r_max {
            let stride = r.min(cap);
            let mut i = 0;
            while r <= n && i <= n - r {
                cands.push(((cumsum[i + r] - cumsum[i]) / cost(r), i, r));
                i += stride;
            }
            r += dr;
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(b.2.cmp(&a.2))
        });
        let mut mask = vec![false; n];
        let mut selected = 0;
        for (_, i, r) in cands {
            if mask[i..i + r].iter().any(|&b| b) || r > budget - selected {
                continue;
            }
            mask[i..i + r].iter_mut().for_each(|b| *b = true);
            selected += r;
            if selected >= budget {
                break;
            }
        }
        (0..n).filter(|&i| mask[i]).collect()
    }

    #[test]
    fn greedy_worked_example() {
        let values = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 9.0, 0.0];
        let table = LatencyTable::new(
            "toy",
            vec![(1024, 100.0), (2048, 101.0), (4096, 103.0)],
            1.0,
        )
        .unwrap();
        let cost = |r: usize| table.lookup(r as u64 * 1024);
        let expected = reference_trace(&values, 4, 1.0, (1.0, 4.0, 1.0, 4.0), cost);
        // neuron 6 first (9/100), then the 4-row window no longer fits and
        // the 3-row window at 0 (3/102) takes the remaining budget
        assert_eq!(expected, vec![0, 1, 2, 6]);

        let p = ChunkSelectParams::new(1, 4, 1, 4).unwrap();
        let res = chunk_select(&iv(&values), 4, kb_layout(8), &table, &p).unwrap();
        assert_eq!(res.mask.indices(), expected);
        assert_eq!(res.selected_rows, 4);
        assert_eq!(res.estimated_latency_us, 100.0 + 102.0);
        assert_eq!(res.total_importance, 12.0);
        assert_eq!(res.objective, 12.0 / 202.0);
    }

    #[test]
    fn zero_budget_selects_nothing() {
        let table = LatencyTable::new("t", vec![(1024, 10.0), (2048, 11.0)], 1.0).unwrap();
        let p = ChunkSelectParams::new(1, 2, 1, 1).unwrap();
        let res = chunk_select(&iv(&[1.0, 2.0, 3.0]), 0, kb_layout(3), &table, &p).unwrap();
        assert_eq!(res.selected_rows, 0);
        assert_eq!(res.estimated_latency_us, 0.0);
        assert_eq!(res.objective, 0.0);
        assert!(chunk_select(&iv(&[1.0, 2.0, 3.0]), 4, kb_layout(3), &table, &p).is_err());
    }

    #[test]
    fn uniform_importance_picks_largest_windows() {
        let n = 16;
        let table = synthesize_table(&SyntheticDeviceParams {
            fixed_overhead_us: 50.0,
            bandwidth_bytes_per_us: 500.0,
            step_bytes: 1024,
            max_bytes: 4 * 1024,
        })
        .unwrap();
        let p = ChunkSelectParams::new(1, 4, 1, 4).unwrap();
        let res = chunk_select(&iv(&[1.0; 16]), 12, kb_layout(n), &table, &p).unwrap();
        let chunks = res.mask.chunks();
        assert_eq!(res.selected_rows, 12);
        // three non-overlapping 4-row windows at the first aligned starts
        assert_eq!(res.mask.indices(), (0..12).collect::<Vec<_>>());
        assert_eq!(chunks.len(), 1);
    }

    #[test]
    fn oracle_worked_example() {
        let table =
            LatencyTable::new("t", vec![(1024, 100.0), (2048, 110.0), (3072, 120.0)], 1.0).unwrap();
        let res = oracle_select(&iv(&[5.0, 0.0, 5.0]), 2, kb_layout(3), &table).unwrap();
        // {0}, {2} and {0,2} all reach 0.05; [0] is lexicographically first
        assert_eq!(res.mask.indices(), vec![0]);
        assert_eq!(res.objective, 0.05);
    }

    #[test]
    fn oracle_degenerate_cases() {
        let table = LatencyTable::new("t", vec![(1024, 100.0), (2048, 110.0)], 1.0).unwrap();
        let single = oracle_select(&iv(&[0.0, 0.0, 3.0, 0.0]), 4, kb_layout(4), &table).unwrap();
        assert_eq!(single.mask.indices(), vec![2]);
        let zero = oracle_select(&iv(&[0.0; 5]), 3, kb_layout(5), &table).unwrap();
        assert_eq!(zero.selected_rows, 0);
        assert!(matches!(
            oracle_select(&iv(&[0.0; 21]), 3, kb_layout(21), &table),
            Err(Error::Size { .. })
        ));
    }

    #[test]
    fn index_list_order() {
        let list = |m: u32| (0..32).filter(|i| m >> i & 1 == 1).collect::<Vec<u32>>();
        for a in 0u32..64 {
            for b in 0u32..64 {
                assert_eq!(index_list_cmp(a, b), list(a).cmp(&list(b)), "{a:b} {b:b}");
            }
        }
    }

    #[test]
    fn tuned_defaults_lookup() {
        let p = ChunkSelectParams::tuned_default(
            WeightLayout::new(18944, 7168).unwrap(),
            DeviceClass::HighEnd,
            236,
        );
        assert_eq!(
            (p.chunk_sz_start_kb, p.chunk_sz_step_kb, p.jump_cap_kb),
            (32, 32, 32)
        );
        let p = ChunkSelectParams::tuned_default(
            WeightLayout::new(3584, 7168).unwrap(),
            DeviceClass::LowEnd,
            348,
        );
        assert_eq!(
            (p.chunk_sz_start_kb, p.jump_cap_kb, p.chunk_sz_end_kb),
            (24, 36, 348)
        );
        let p = ChunkSelectParams::tuned_default(
            WeightLayout::new(100, 100).unwrap(),
            DeviceClass::HighEnd,
            64,
        );
        assert_eq!((p.chunk_sz_start_kb, p.jump_cap_kb), (8, 8));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let layout = WeightLayout::new(3000, 2048).unwrap();
        let v = iv(&(0..3000).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        let table = synthesize_table(&SyntheticDeviceParams {
            fixed_overhead_us: 30.0,
            bandwidth_bytes_per_us: 2000.0,
            step_bytes: 4096,
            max_bytes: 256 * 1024,
        })
        .unwrap();
        let p = ChunkSelectParams::new(4, 128, 4, 8).unwrap();
        let a = chunk_select_with(&v, 1800, layout, &table, &p, Exec::Sequential).unwrap();
        let b = chunk_select_with(&v, 1800, layout, &table, &p, Exec::Parallel).unwrap();
        assert_eq!(a.mask, b.mask);
    }
}
