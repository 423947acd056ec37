//! Chunk-based read latency model.
//!
//! A [`LatencyTable`] maps a contiguous read size to its profiled latency.
//! The latency of a whole mask is the sum of the latencies of its chunks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::round_sig;
use crate::mask::{extract_chunks, Chunk, ContiguityDistribution, SelectionMask, WeightLayout};

/// Profiled (or synthetic) mapping from read size in bytes to latency in µs.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyTable {
    entries: Vec<(u64, f64)>,
    device_label: String,
    scale_factor: f64,
}

impl LatencyTable {
    /// Validates and builds a table. Entries must be strictly increasing in
    /// size, with positive latencies that never decrease.
    pub fn new(
        device_label: impl Into<String>,
        entries: Vec<(u64, f64)>,
        scale_factor: f64,
    ) -> Result<Self> {
        validate_entries(&entries, true)?;
        if !(scale_factor.is_finite() && scale_factor > 0.0) {
            return Err(Error::Table(format!(
                "scale_factor must be positive, got {scale_factor}"
            )));
        }
        let table = Self {
            entries,
            device_label: device_label.into(),
            scale_factor,
        };
        let violations = table.subadditivity_violations();
        if let Some(&(a, b)) = violations.first() {
            log::warn!(
                "latency table '{}' is not subadditive at {} size pairs (first: {a} + {b} bytes)",
                table.device_label,
                violations.len()
            );
        }
        Ok(table)
    }

    /// Builds a table from raw measurements, replacing non-monotone latency
    /// runs by their pooled mean before validation.
    pub fn from_measurements(
        device_label: impl Into<String>,
        entries: Vec<(u64, f64)>,
    ) -> Result<Self> {
        validate_entries(&entries, false)?;
        let latencies: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let smoothed = isotonic_non_decreasing(&latencies);
        if smoothed != latencies {
            log::warn!("raw latency measurements were non-monotone; applied isotonic smoothing");
        }
        let entries = entries
            .iter()
            .zip(smoothed)
            .map(|(&(s, _), l)| (s, l))
            .collect();
        Self::new(device_label, entries, 1.0)
    }

    pub fn entries(&self) -> &[(u64, f64)] {
        &self.entries
    }

    pub fn device_label(&self) -> &str {
        &self.device_label
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    pub fn max_profiled_bytes(&self) -> u64 {
        self.entries.last().map(|e| e.0).unwrap_or(0)
    }

    pub fn with_scale_factor(mut self, scale_factor: f64) -> Result<Self> {
        if !(scale_factor.is_finite() && scale_factor > 0.0) {
            return Err(Error::Table(format!(
                "scale_factor must be positive, got {scale_factor}"
            )));
        }
        self.scale_factor = scale_factor;
        Ok(self)
    }

    /// Same table with every profiled latency multiplied by `k`.
    pub fn with_latencies_scaled(&self, k: f64) -> Result<Self> {
        let entries = self.entries.iter().map(|&(s, l)| (s, l * k)).collect();
        Self::new(self.device_label.clone(), entries, self.scale_factor)
    }

    /// Unscaled latency: exact entry, piecewise-linear interpolation inside
    /// the table, clamped below the first entry, linear extrapolation past
    /// the last one using the last segment's slope.
    fn raw_lookup(&self, size_bytes: u64) -> f64 {
        let e = &self.entries;
        let (first, last) = (e[0], e[e.len() - 1]);
        if size_bytes <= first.0 {
            return first.1;
        }
        if size_bytes >= last.0 {
            let prev = e[e.len() - 2];
            let slope = (last.1 - prev.1) / (last.0 - prev.0) as f64;
            return last.1 + slope * (size_bytes - last.0) as f64;
        }
        match e.binary_search_by_key(&size_bytes, |x| x.0) {
            Ok(i) => e[i].1,
            Err(i) => {
                let (lo, hi) = (e[i - 1], e[i]);
                let t = (size_bytes - lo.0) as f64 / (hi.0 - lo.0) as f64;
                lo.1 + t * (hi.1 - lo.1)
            }
        }
    }

    /// Latency in µs of one contiguous read of `size_bytes`, including the
    /// table's scale factor.
    pub fn lookup(&self, size_bytes: u64) -> f64 {
        self.raw_lookup(size_bytes.max(1)) * self.scale_factor
    }

    /// Size pairs `(a, b)` of profiled entries with `a <= b`, `a + b` within
    /// the table, where `T[a + b] > T[a] + T[b]`.
    pub fn subadditivity_violations(&self) -> Vec<(u64, u64)> {
        let max = self.max_profiled_bytes();
        let mut out = Vec::new();
        for (i, &(a, la)) in self.entries.iter().enumerate() {
            for &(b, lb) in &self.entries[i..] {
                if a + b > max {
                    break;
                }
                let tol = 1e-9 * (la + lb);
                if self.raw_lookup(a + b) > la + lb + tol {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Size/latency throughput of each profiled entry, in bytes per µs.
    pub fn throughputs(&self) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .map(|&(s, l)| (s, s as f64 / l))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            Error::Table(message) => Error::format(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)
            .map_err(|e| Error::format("latency table", e.to_string()))?;
        Self::new(file.device_label, file.entries, file.scale_factor)
    }

    /// Canonical serialization: fixed field order, latencies at 6
    /// significant digits.
    pub fn to_json(&self) -> String {
        let file = TableFile {
            device_label: self.device_label.clone(),
            scale_factor: round_sig(self.scale_factor, 6),
            entries: self
                .entries
                .iter()
                .map(|&(s, l)| (s, round_sig(l, 6)))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("table serializes");
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
struct TableFile {
    device_label: String,
    scale_factor: f64,
    entries: Vec<(u64, f64)>,
}

fn validate_entries(entries: &[(u64, f64)], require_monotone: bool) -> Result<()> {
    if entries.len() < 2 {
        return Err(Error::Table(format!(
            "need at least 2 entries, got {}",
            entries.len()
        )));
    }
    for (i, &(s, l)) in entries.iter().enumerate() {
        if s == 0 {
            return Err(Error::Table(format!("entry {i}: size must be positive")));
        }
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::Table(format!(
                "entry {i}: latency must be positive, got {l}"
            )));
        }
        if i > 0 {
            let (ps, pl) = entries[i - 1];
            if s <= ps {
                return Err(Error::Table(format!(
                    "entry {i}: sizes must be strictly increasing ({ps} then {s})"
                )));
            }
            if require_monotone && l < pl {
                return Err(Error::Table(format!(
                    "entry {i}: latency decreases from {pl} to {l}"
                )));
            }
        }
    }
    Ok(())
}

/// Pool-adjacent-violators fit of a non-decreasing sequence (unit weights).
pub fn isotonic_non_decreasing(values: &[f64]) -> Vec<f64> {
    // (block mean, block length)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let n = n1 + n2;
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat_n(m, n))
        .collect()
}

/// Estimated latency of reading `chunks`, in µs.
pub fn estimate_chunks_latency(
    chunks: &[Chunk],
    layout: WeightLayout,
    table: &LatencyTable,
) -> f64 {
    ContiguityDistribution::from_chunks(chunks)
        .counts
        .iter()
        .fold(0.0, |acc, (&len, &count)| {
            acc + count as f64 * table.lookup(len as u64 * layout.row_bytes as u64)
        })
}

/// Sum of per-chunk lookups over the maximal runs of `mask`; 0 for an
/// empty mask.
pub fn estimate_mask_latency(
    mask: &SelectionMask,
    layout: WeightLayout,
    table: &LatencyTable,
) -> Result<f64> {
    mask.check_len(layout.n_rows)?;
    Ok(estimate_chunks_latency(
        &extract_chunks(mask),
        layout,
        table,
    ))
}

/// Affine device model: `latency = overhead + size / bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDeviceParams {
    pub fixed_overhead_us: f64,
    pub bandwidth_bytes_per_us: f64,
    pub step_bytes: u64,
    pub max_bytes: u64,
}

impl SyntheticDeviceParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fixed_overhead_us.is_finite()
            && self.fixed_overhead_us > 0.0
            && self.bandwidth_bytes_per_us.is_finite()
            && self.bandwidth_bytes_per_us > 0.0
            && self.step_bytes > 0
            && self.max_bytes >= 2 * self.step_bytes;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "synthetic device params must be positive with max >= 2 * step: {self:?}"
            )))
        }
    }

    pub fn latency_us(&self, size_bytes: u64) -> f64 {
        self.fixed_overhead_us + size_bytes as f64 / self.bandwidth_bytes_per_us
    }

    pub fn label(&self) -> String {
        format!(
            "synthetic(overhead_us={}, bandwidth_MBps={})",
            round_sig(self.fixed_overhead_us, 6),
            round_sig(self.bandwidth_bytes_per_us, 6)
        )
    }
}

/// Table with entries at every multiple of `step_bytes` up to `max_bytes`.
pub fn synthesize_table(p: &SyntheticDeviceParams) -> Result<LatencyTable> {
    p.validate()?;
    let entries = (1..=p.max_bytes / p.step_bytes)
        .map(|k| {
            let s = k * p.step_bytes;
            (s, p.latency_us(s))
        })
        .collect();
    LatencyTable::new(p.label(), entries, 1.0)
}

/// Smallest profiled size whose throughput reaches `fraction` of the
/// table's peak throughput.
pub fn saturation_size(table: &LatencyTable, fraction: f64) -> Result<u64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!(
            "saturation fraction must be in (0, 1], got {fraction}"
        )));
    }
    let thr = table.throughputs();
    let peak = thr.iter().map(|t| t.1).fold(f64::MIN, f64::max);
    Ok(thr
        .iter()
        .find(|t| t.1 >= fraction * peak)
        .map(|t| t.0)
        .expect("peak entry always qualifies"))
}

/// Result of fitting `measured ≈ scale × estimated`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale_factor: f64,
    /// Pearson correlation; `None` when fewer than two points or zero variance.
    pub correlation: Option<f64>,
}

/// Least-squares slope through the origin plus Pearson correlation.
pub fn calibrate_scale(estimates: &[f64], measurements: &[f64]) -> Result<Calibration> {
    if estimates.is_empty() {
        return Err(Error::Input("calibration needs at least one pair".into()));
    }
    if estimates.len() != measurements.len() {
        return Err(Error::LengthMismatch {
            expected: estimates.len(),
            actual: measurements.len(),
        });
    }
    if estimates
        .iter()
        .chain(measurements)
        .any(|v| !(v.is_finite() && *v > 0.0))
    {
        return Err(Error::Input("calibration values must be positive".into()));
    }
    let see: f64 = estimates.iter().map(|e| e * e).sum();
    let sem: f64 = estimates.iter().zip(measurements).map(|(e, m)| e * m).sum();
    Ok(Calibration {
        scale_factor: sem / see,
        correlation: pearson(estimates, measurements),
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> LatencyTable {
        LatencyTable::new("toy", vec![(1024, 50.0), (2048, 60.0)], 1.0).unwrap()
    }

    #[test]
    fn lookup_examples() {
        let t = toy();
        assert_eq!(t.lookup(2048), 60.0);
        assert_eq!(t.lookup(1536), 55.0);
        // slope 10/1024 per byte over 2048 extra bytes: 60 + 20
        assert_eq!(t.lookup(4096), 80.0);
        assert_eq!(t.lookup(1), 50.0);
        assert_eq!(
            t.clone().with_scale_factor(2.0).unwrap().lookup(1536),
            110.0
        );
    }

    #[test]
    fn table_validation() {
        assert!(LatencyTable::new("x", vec![(1024, 50.0)], 1.0).is_err());
        assert!(LatencyTable::new("x", vec![(2048, 50.0), (1024, 60.0)], 1.0).is_err());
        assert!(LatencyTable::new("x", vec![(1024, 0.0), (2048, 60.0)], 1.0).is_err());
        assert!(LatencyTable::new("x", vec![(1024, 70.0), (2048, 60.0)], 1.0).is_err());
        assert!(LatencyTable::new("x", vec![(0, 10.0), (2048, 60.0)], 1.0).is_err());
        assert!(LatencyTable::new("x", vec![(1024, 50.0), (2048, 60.0)], 0.0).is_err());
    }

    #[test]
    fn estimate_examples() {
        let layout = WeightLayout::new(8, 1024).unwrap();
        let mask = SelectionMask::from_indices(8, &[1, 2, 4, 6, 7]).unwrap();
        assert_eq!(estimate_mask_latency(&mask, layout, &toy()).unwrap(), 170.0);
        assert_eq!(
            estimate_mask_latency(&SelectionMask::zeros(8), layout, &toy()).unwrap(),
            0.0
        );
        let t4 = LatencyTable::new(
            "t4",
            vec![(1024, 50.0), (2048, 60.0), (3072, 70.0), (4096, 80.0)],
            1.0,
        )
        .unwrap();
        let full = WeightLayout::new(4, 1024).unwrap();
        assert_eq!(
            estimate_mask_latency(&SelectionMask::ones(4), full, &t4).unwrap(),
            80.0
        );
        assert!(estimate_mask_latency(&SelectionMask::ones(3), full, &t4).is_err());
    }

    #[test]
    fn synthetic_table_shape() {
        let p = SyntheticDeviceParams {
            fixed_overhead_us: 100.0,
            bandwidth_bytes_per_us: 7450.0,
            step_bytes: 4096,
            max_bytes: 262_144,
        };
        let t = synthesize_table(&p).unwrap();
        assert_eq!(t.entries().len(), 64);
        assert_eq!(t.max_profiled_bytes(), 262_144);
        assert!((t.lookup(262_144) - 135.187).abs() < 1e-3);
        let thr = t.throughputs();
        assert!(thr.windows(2).all(|w| w[1].1 > w[0].1));
        assert!(thr.iter().all(|t| t.1 < p.bandwidth_bytes_per_us));
    }

    #[test]
    fn saturation_matches_closed_form() {
        let (o, bw, step, max) = (100.0, 1000.0, 1024u64, 1u64 << 20);
        let t = synthesize_table(&SyntheticDeviceParams {
            fixed_overhead_us: o,
            bandwidth_bytes_per_us: bw,
            step_bytes: step,
            max_bytes: max,
        })
        .unwrap();
        // s/(o + s/bw) >= 0.99 * peak  <=>  s >= 0.99*peak*o / (1 - 0.99*peak/bw)
        let peak = max as f64 / (o + max as f64 / bw);
        let s_star = 0.99 * peak * o / (1.0 - 0.99 * peak / bw);
        let expected = (s_star / step as f64).ceil() as u64 * step;
        let got = saturation_size(&t, 0.99).unwrap();
        assert!(got.abs_diff(expected) <= step, "{got} vs {expected}");
        assert_eq!(saturation_size(&t, 1.0).unwrap(), max);
        assert!(saturation_size(&t, 0.0).is_err());
    }

    #[test]
    fn calibration_examples() {
        let e = [10.0, 20.0, 35.0];
        let c = calibrate_scale(&e, &e).unwrap();
        assert!((c.scale_factor - 1.0).abs() < 1e-15);
        assert!((c.correlation.unwrap() - 1.0).abs() < 1e-12);
        let m: Vec<f64> = e.iter().map(|x| 1.3 * x).collect();
        assert!((calibrate_scale(&e, &m).unwrap().scale_factor - 1.3).abs() < 1e-12);
        assert!(calibrate_scale(&[], &[]).is_err());
        assert!(calibrate_scale(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(calibrate_scale(&[5.0], &[6.0]).unwrap().correlation, None);
    }

    #[test]
    fn calibration_recovers_planted_factor_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for planted in [0.7, 1.0, 1.3, 2.5] {
            let e: Vec<f64> = (0..1000)
                .map(|_| rng.random_range(100.0..10_000.0))
                .collect();
            let m: Vec<f64> = e
                .iter()
                .map(|x| planted * x * (1.0 + rng.random_range(-0.05..0.05)))
                .collect();
            let c = calibrate_scale(&e, &m).unwrap();
            assert!((c.scale_factor / planted - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn isotonic_pools_violations() {
        assert_eq!(
            isotonic_non_decreasing(&[1.0, 3.0, 2.0, 4.0]),
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(
            isotonic_non_decreasing(&[3.0, 2.0, 1.0]),
            vec![2.0, 2.0, 2.0]
        );
        let t = LatencyTable::from_measurements("m", vec![(1, 5.0), (2, 4.0), (3, 9.0)]).unwrap();
        assert_eq!(t.entries(), &[(1, 4.5), (2, 4.5), (3, 9.0)]);
    }

    #[test]
    fn subadditivity_detection() {
        assert!(toy().subadditivity_violations().is_empty());
        // convex latency: T[2] = 30 > T[1] + T[1] = 20
        let convex = LatencyTable::new("c", vec![(1, 10.0), (2, 30.0)], 1.0).unwrap();
        assert_eq!(convex.subadditivity_violations(), vec![(1, 1)]);
    }

    #[test]
    fn json_round_trip_is_canonical() {
        let t = LatencyTable::new("dev", vec![(1024, 50.123456789), (2048, 60.0)], 1.25).unwrap();
        let s = t.to_json();
        let back = LatencyTable::from_json(&s).unwrap();
        assert_eq!(back.entries()[0].1, 50.1235);
        assert_eq!(back.to_json(), s);
        assert!(LatencyTable::from_json(
            r#"{"device_label":"x","scale_factor":1,"entries":[[2048,5],[1024,6]]}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn lookup_is_monotone_and_continuous(
            raw in proptest::collection::vec((1u64..5000, 0.1f64..100.0), 2..12),
            probe in 1u64..100_000,
        ) {
            let mut size = 0u64;
            let mut lat = 0.0f64;
            let entries: Vec<(u64, f64)> = raw.iter().map(|&(ds, dl)| {
                size += ds;
                lat += dl;
                (size, lat)
            }).collect();
            let t = LatencyTable::new("p", entries, 1.0).unwrap();
            prop_assert!(t.lookup(probe) > 0.0);
            prop_assert!(t.lookup(probe + 1) >= t.lookup(probe) - 1e-9);
            for &(s, l) in t.entries() {
                prop_assert_eq!(t.lookup(s), l);
            }
        }

        #[test]
        fn estimate_is_additive_over_chunks(
            bits in proptest::collection::vec(any::<bool>(), 1..300),
            row_bytes in 1usize..5000,
        ) {
            let layout = WeightLayout::new(bits.len(), row_bytes).unwrap();
            let mask = SelectionMask::from_bits(bits);
            let t = toy();
            let total = estimate_mask_latency(&mask, layout, &t).unwrap();
            let parts: f64 = extract_chunks(&mask)
                .into_iter()
                .map(|c| {
                    let single = crate::mask::mask_from_chunks(&[c], layout.n_rows).unwrap();
                    estimate_mask_latency(&single, layout, &t).unwrap()
                })
                .sum();
            prop_assert_eq!(total, parts);
        }
    }
}
