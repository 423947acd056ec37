//! Offline hot-cold reordering.
//!
//! Calibration samples mark the top `active_fraction` of neurons as active;
//! neurons are then sorted by how often they were active, and the weight
//! rows and runtime importance vectors are permuted to match.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ImportanceVector, SelectionMask, WeightLayout};
use crate::select::top_k_indices;

/// Fractions above/below which a neuron counts as hot/cold.
pub const HOT_FREQUENCY: f64 = 0.99;
pub const COLD_FREQUENCY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub counts: Vec<u64>,
    pub num_samples: u64,
    pub active_fraction: f64,
}

impl FrequencyProfile {
    pub fn new(n_rows: usize, active_fraction: f64) -> Result<Self> {
        if !(active_fraction > 0.0 && active_fraction <= 1.0) {
            return Err(Error::Input(format!(
                "active fraction must be in (0, 1], got {active_fraction}"
            )));
        }
        Ok(Self {
            counts: vec![0; n_rows],
            num_samples: 0,
            active_fraction,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.counts.len()
    }

    /// Counts the top `floor(active_fraction * N)` neurons of one sample.
    pub fn accumulate(&mut self, v: &ImportanceVector) -> Result<()> {
        v.check_len(self.n_rows())?;
        let k = (self.active_fraction * self.n_rows() as f64).floor() as usize;
        for i in top_k_indices(v.values(), k) {
            self.counts[i] += 1;
        }
        self.num_samples += 1;
        Ok(())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.num_samples.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// New index → original index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    forward: Vec<usize>,
}

impl Permutation {
    pub fn new(forward: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; forward.len()];
        for &i in &forward {
            if i >= forward.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Input(format!(
                    "permutation of length {} is not a bijection (index {i})",
                    forward.len()
                )));
            }
        }
        Ok(Self { forward })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
        }
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn invert(&self) -> Self {
        let mut inv = vec![0; self.forward.len()];
        for (new, &orig) in self.forward.iter().enumerate() {
            inv[orig] = new;
        }
        Self { forward: inv }
    }

    /// `self` applied after `first`: new[k] = first[self[k]].
    pub fn then(&self, first: &Permutation) -> Result<Self> {
        if first.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: first.len(),
            });
        }
        Ok(Self {
            forward: self.forward.iter().map(|&k| first.forward[k]).collect(),
        })
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: n,
            });
        }
        Ok(())
    }

    /// `permuted[k] = v[forward[k]]`.
    pub fn apply_importance(&self, v: &ImportanceVector) -> Result<ImportanceVector> {
        self.check_len(v.len())?;
        ImportanceVector::new(self.forward.iter().map(|&i| v.values()[i]).collect())
    }

    pub fn apply_mask(&self, mask: &SelectionMask) -> Result<SelectionMask> {
        self.check_len(mask.len())?;
        Ok(SelectionMask::from_bits(
            self.forward.iter().map(|&i| mask.get(i)).collect(),
        ))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let file: PermutationFile = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if file.n_rows != file.forward.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!(
                    "n_rows {} but forward has {} entries",
                    file.n_rows,
                    file.forward.len()
                ),
            ));
        }
        Self::new(file.forward)
    }

    pub fn to_json(&self) -> String {
        let file = PermutationFile {
            n_rows: self.len(),
            forward: self.forward.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("permutation serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PermutationFile {
    n_rows: usize,
    forward: Vec<usize>,
}

/// Most frequently active neurons first; equal counts keep original order.
pub fn build_permutation(profile: &FrequencyProfile) -> Result<Permutation> {
    if profile.num_samples == 0 {
        return Err(Error::Input("frequency profile has no samples".into()));
    }
    let mut order: Vec<usize> = (0..profile.n_rows()).collect();
    order.sort_by(|&a, &b| profile.counts[b].cmp(&profile.counts[a]));
    Permutation::new(order)
}

/// Row-permutes an in-memory weight matrix: output row k = input row forward[k].
pub fn permute_rows_bytes(
    weights: &[u8],
    layout: WeightLayout,
    perm: &Permutation,
) -> Result<Vec<u8>> {
    check_weights_len(weights.len() as u64, layout, "weights buffer")?;
    perm.check_len(layout.n_rows)?;
    let rb = layout.row_bytes;
    let mut out = Vec::with_capacity(weights.len());
    for &src in perm.forward() {
        out.extend_from_slice(&weights[src * rb..(src + 1) * rb]);
    }
    Ok(out)
}

fn check_weights_len(len: u64, layout: WeightLayout, location: &str) -> Result<()> {
    if len != layout.total_bytes() {
        return Err(Error::format(
            location,
            format!(
                "holds {len} bytes, layout {}x{} needs {}",
                layout.n_rows,
                layout.row_bytes,
                layout.total_bytes()
            ),
        ));
    }
    Ok(())
}

/// Streams `input` to `output` one row at a time in permuted order.
pub fn permute_rows(
    input: &Path,
    output: &Path,
    layout: WeightLayout,
    perm: &Permutation,
) -> Result<()> {
    let file_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::File { path, source }
    };
    let src = File::open(input).map_err(file_err(input))?;
    let len = src.metadata().map_err(file_err(input))?.len();
    check_weights_len(len, layout, &input.display().to_string())?;
    perm.check_len(layout.n_rows)?;

    let mut out = BufWriter::new(File::create(output).map_err(file_err(output))?);
    let mut row = vec![0u8; layout.row_bytes];
    for &k in perm.forward() {
        src.read_exact_at(&mut row, (k * layout.row_bytes) as u64)
            .map_err(file_err(input))?;
        out.write_all(&row).map_err(file_err(output))?;
    }
    out.flush().map_err(file_err(output))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub n_rows: usize,
    pub num_samples: u64,
    pub active_fraction: f64,
    /// Neuron counts per equal-width frequency bin over [0, 1].
    pub histogram: Vec<u64>,
    pub hot_fraction: f64,
    pub cold_fraction: f64,
}

pub fn frequency_report(profile: &FrequencyProfile, bins: usize) -> Result<FrequencyReport> {
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    if profile.num_samples == 0 {
        return Err(Error::Input("frequency profile has no samples".into()));
    }
    let freqs = profile.frequencies();
    let mut histogram = vec![0u64; bins];
    for &f in &freqs {
        histogram[((f * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let n = freqs.len().max(1) as f64;
    Ok(FrequencyReport {
        n_rows: freqs.len(),
        num_samples: profile.num_samples,
        active_fraction: profile.active_fraction,
        histogram,
        hot_fraction: freqs.iter().filter(|&&f| f > HOT_FREQUENCY).count() as f64 / n,
        cold_fraction: freqs.iter().filter(|&&f| f < COLD_FREQUENCY).count() as f64 / n,
    })
}
