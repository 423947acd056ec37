//! Selection masks, their decomposition into contiguous chunks, and the
//! contiguity distribution that summarizes a mask without its placement.
//!
//! Everything here is pure and index-only; no weight bytes or latencies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a row-major weight matrix as stored on flash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightLayout {
    pub n_rows: usize,
    pub row_bytes: usize,
}

impl WeightLayout {
    pub fn new(n_rows: usize, row_bytes: usize) -> Result<Self> {
        if n_rows == 0 || row_bytes == 0 {
            return Err(Error::Input(format!(
                "layout needs n_rows >= 1 and row_bytes >= 1, got {n_rows}x{row_bytes}"
            )));
        }
        Ok(Self { n_rows, row_bytes })
    }

    pub fn total_bytes(&self) -> u64 {
        self.n_rows as u64 * self.row_bytes as u64
    }

    pub fn chunk_bytes(&self, chunk: Chunk) -> u64 {
        chunk.len as u64 * self.row_bytes as u64
    }

    pub fn chunk_offset(&self, chunk: Chunk) -> u64 {
        chunk.start as u64 * self.row_bytes as u64
    }
}

/// Per-neuron non-negative importance scores.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceVector(Vec<f64>);

impl ImportanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::Input(format!(
                "importance[{i}] = {v} is not a finite non-negative value"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn check_len(&self, n_rows: usize) -> Result<()> {
        if self.len() != n_rows {
            return Err(Error::LengthMismatch {
                expected: n_rows,
                actual: self.len(),
            });
        }
        Ok(())
    }

    /// Running sum with a leading zero; `prefix[i + r] - prefix[i]` is the
    /// importance of rows `i..i + r`.
    pub fn prefix_sums(&self) -> Vec<f64> {
        let mut prefix = Vec::with_capacity(self.0.len() + 1);
        let mut acc = 0.0f64;
        prefix.push(acc);
        for &v in &self.0 {
            acc += v;
            prefix.push(acc);
        }
        prefix
    }

    /// Importance covered by the set bits of `mask`.
    pub fn masked_sum(&self, mask: &SelectionMask) -> f64 {
        self.0
            .iter()
            .zip(mask.bits())
            .filter(|(_, &b)| b)
            .fold(0.0, |acc, (v, _)| acc + v)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v)
    }
}

/// A run of `len` consecutive rows starting at `start` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
}

impl Chunk {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Binary row-selection mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn zeros(n_rows: usize) -> Self {
        Self {
            bits: vec![false; n_rows],
        }
    }

    pub fn ones(n_rows: usize) -> Self {
        Self {
            bits: vec![true; n_rows],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(n_rows: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = Self::zeros(n_rows);
        for &i in indices {
            if i >= n_rows {
                return Err(Error::Bounds {
                    chunk: Chunk::new(i, 1),
                    n_rows,
                });
            }
            mask.bits[i] = true;
        }
        Ok(mask)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// True if any row in `range` is already selected. Stops at the first hit.
    pub fn any_in(&self, range: std::ops::Range<usize>) -> bool {
        self.bits[range].iter().any(|&b| b)
    }

    pub fn set_range(&mut self, range: std::ops::Range<usize>) {
        self.bits[range].fill(true);
    }

    pub(crate) fn check_len(&self, n_rows: usize) -> Result<()> {
        if self.len() != n_rows {
            return Err(Error::LengthMismatch {
                expected: n_rows,
                actual: self.len(),
            });
        }
        Ok(())
    }

    pub fn chunks(&self) -> Vec<Chunk> {
        extract_chunks(self)
    }
}

/// Histogram of maximal-run lengths (rows) to occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContiguityDistribution {
    pub counts: BTreeMap<usize, usize>,
}

impl ContiguityDistribution {
    pub fn from_chunks(chunks: &[Chunk]) -> Self {
        let mut counts = BTreeMap::new();
        for c in chunks {
            *counts.entry(c.len).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn num_chunks(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn total_rows(&self) -> usize {
        self.counts.iter().map(|(s, c)| s * c).sum()
    }

    pub fn stats(&self) -> DistributionStats {
        distribution_stats(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean_chunk_rows: f64,
    pub mode_chunk_rows: usize,
    pub num_chunks: usize,
}

/// Decomposes a mask into its maximal runs of set bits, ascending by start.
pub fn extract_chunks(mask: &SelectionMask) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut run_start = None;
    for (i, &b) in mask.bits.iter().enumerate() {
        match (b, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                chunks.push(Chunk::new(s, i - s));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        chunks.push(Chunk::new(s, mask.len() - s));
    }
    chunks
}

/// Rebuilds a mask from (possibly overlapping or adjacent) chunks.
pub fn mask_from_chunks(chunks: &[Chunk], n_rows: usize) -> Result<SelectionMask> {
    let mut mask = SelectionMask::zeros(n_rows);
    for &chunk in chunks {
        if chunk.len == 0 || chunk.end() > n_rows {
            return Err(Error::Bounds { chunk, n_rows });
        }
        mask.set_range(chunk.rows());
    }
    Ok(mask)
}

pub fn contiguity_distribution(mask: &SelectionMask) -> ContiguityDistribution {
    ContiguityDistribution::from_chunks(&extract_chunks(mask))
}

/// Mean, mode (ties to the smaller size) and count of chunks.
pub fn distribution_stats(d: &ContiguityDistribution) -> DistributionStats {
    let num_chunks = d.num_chunks();
    if num_chunks == 0 {
        return DistributionStats {
            mean_chunk_rows: 0.0,
            mode_chunk_rows: 0,
            num_chunks: 0,
        };
    }
    // BTreeMap iterates ascending, so strict `>` keeps the smallest size on ties.
    let mut mode = (0usize, 0usize);
    for (&size, &count) in &d.counts {
        if count > mode.1 {
            mode = (size, count);
        }
    }
    DistributionStats {
        mean_chunk_rows: d.total_rows() as f64 / num_chunks as f64,
        mode_chunk_rows: mode.0,
        num_chunks,
    }
}
