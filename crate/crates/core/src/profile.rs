//! Read-latency microbenchmark that builds a [`LatencyTable`].
//!
//! For each size `s` the profiler places a batch of `s`-byte reads at a
//! fixed stride across the target and times the batch from first submission
//! to last completion with a fixed worker pool. The per-chunk latency is the
//! batch span divided by the number of reads, averaged over trials.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::device::{run_batch, AccessMode, FileDevice, ReadDevice, ReadRequest, DIRECT_ALIGN};
use crate::error::{Error, Result};
use crate::latency::{saturation_size, LatencyTable};

pub const MIB: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    /// Bytes of the target the reads are spread over.
    pub file_bytes: u64,
    pub size_step_bytes: u64,
    pub max_size_bytes: u64,
    pub trials_per_size: usize,
    pub workers: usize,
    pub use_direct_io: bool,
    /// Relative standard deviation above which a size is flagged.
    pub rsd_threshold: f64,
    /// Throughput fraction defining saturation.
    pub saturation_fraction: f64,
    /// Sizes still profiled after the saturation point is reached.
    pub sizes_past_saturation: usize,
    /// Upper bound on reads per trial.
    pub max_reads_per_trial: usize,
    /// Visit sizes in a seeded random order instead of ascending.
    pub randomize_order: bool,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            file_bytes: 128 * MIB,
            size_step_bytes: 1024,
            max_size_bytes: 4 * MIB,
            trials_per_size: 3,
            workers: 6,
            use_direct_io: true,
            rsd_threshold: 0.05,
            saturation_fraction: 0.99,
            sizes_past_saturation: 32,
            max_reads_per_trial: 128,
            randomize_order: false,
            seed: 0,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.file_bytes == 0
            || self.size_step_bytes == 0
            || self.max_size_bytes < 2 * self.size_step_bytes
            || self.trials_per_size == 0
            || self.workers == 0
            || self.max_reads_per_trial == 0
        {
            return Err(Error::Input(format!(
                "profile config needs positive sizes, max >= 2 * step, trials >= 1, workers >= 1: {self:?}"
            )));
        }
        if self.max_size_bytes > self.file_bytes {
            return Err(Error::Input(format!(
                "max size {} exceeds profiled span {}",
                self.max_size_bytes, self.file_bytes
            )));
        }
        Ok(())
    }

    /// Distance between consecutive reads of size `s`: at least twice the
    /// read and at least 1 MiB, rounded up to the sector size.
    pub fn stride_for(&self, size: u64) -> u64 {
        (2 * size).max(MIB).div_ceil(DIRECT_ALIGN) * DIRECT_ALIGN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMeasurement {
    pub size_bytes: u64,
    pub reads_per_trial: usize,
    pub mean_latency_us: f64,
    pub rel_std: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheStatus {
    CacheBypassed,
    MayReflectCacheHits,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    pub status: CacheStatus,
    pub message: String,
}

impl CacheReport {
    pub fn is_warning(&self) -> bool {
        self.status == CacheStatus::MayReflectCacheHits
    }
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub table: LatencyTable,
    pub sizes: Vec<SizeMeasurement>,
    pub saturation_bytes: u64,
    pub cache: CacheReport,
}

impl ProfileReport {
    pub fn flagged(&self) -> impl Iterator<Item = &SizeMeasurement> {
        self.sizes.iter().filter(|m| m.flagged)
    }
}

/// Issues one warm-up read and reports whether timings bypass the OS cache.
pub fn warmup_and_drop_caches_hint(device: &dyn ReadDevice) -> CacheReport {
    if !device.is_empty() {
        let len = device.len().min(DIRECT_ALIGN);
        let _ = crate::device::aligned_read(device, 0, len);
    }
    match device.mode() {
        AccessMode::Direct => CacheReport {
            status: CacheStatus::CacheBypassed,
            message: "cache-bypassed: direct access".into(),
        },
        AccessMode::Buffered => CacheReport {
            status: CacheStatus::MayReflectCacheHits,
            message: "warning: buffered access, measurements may reflect page-cache hits".into(),
        },
        AccessMode::Synthetic => CacheReport {
            status: CacheStatus::Synthetic,
            message: "synthetic device".into(),
        },
    }
}

fn measure_size(
    device: &dyn ReadDevice,
    cfg: &ProfileConfig,
    size: u64,
) -> Result<SizeMeasurement> {
    let stride = cfg.stride_for(size);
    let reads = ((cfg.file_bytes / stride) as usize).clamp(1, cfg.max_reads_per_trial);
    let requests: Vec<ReadRequest> = (0..reads as u64)
        .map(|k| ReadRequest {
            offset: k * stride,
            len: size,
        })
        .collect();
    let mut per_chunk = Vec::with_capacity(cfg.trials_per_size);
    for _ in 0..cfg.trials_per_size {
        let out =
            run_batch(device, &requests, cfg.workers, false).map_err(|(_, e)| Error::Device(e))?;
        per_chunk.push(out.elapsed_us / reads as f64);
    }
    let n = per_chunk.len() as f64;
    let mean = per_chunk.iter().sum::<f64>() / n;
    let var = per_chunk.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let rel_std = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    Ok(SizeMeasurement {
        size_bytes: size,
        reads_per_trial: reads,
        // wall clocks can report zero for tiny reads; keep the table positive
        mean_latency_us: mean.max(1e-3),
        rel_std,
        flagged: rel_std > cfg.rsd_threshold,
    })
}

/// Index of the saturation point among `measured` (ascending by size).
fn saturation_index(measured: &[SizeMeasurement], fraction: f64) -> usize {
    let thr: Vec<f64> = measured
        .iter()
        .map(|m| m.size_bytes as f64 / m.mean_latency_us)
        .collect();
    let peak = thr.iter().copied().fold(f64::MIN, f64::max);
    thr.iter().position(|&t| t >= fraction * peak).unwrap_or(0)
}

/// Profiles `device` and returns the resulting table.
pub fn run_profile(cfg: &ProfileConfig, device: &dyn ReadDevice) -> Result<ProfileReport> {
    cfg.validate()?;
    if device.len() < cfg.file_bytes {
        return Err(Error::Input(format!(
            "target holds {} bytes, profiling needs {}",
            device.len(),
            cfg.file_bytes
        )));
    }
    let cache = warmup_and_drop_caches_hint(device);
    if cache.is_warning() {
        log::warn!("{}", cache.message);
    }

    let mut sizes: Vec<u64> = (1..=cfg.max_size_bytes / cfg.size_step_bytes)
        .map(|k| k * cfg.size_step_bytes)
        .collect();
    if cfg.randomize_order {
        sizes.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    }

    let mut measured: Vec<SizeMeasurement> = Vec::new();
    for size in sizes {
        let m = measure_size(device, cfg, size)?;
        if m.flagged {
            log::warn!(
                "size {} bytes: relative std {:.3} above threshold",
                m.size_bytes,
                m.rel_std
            );
        }
        measured.push(m);
        if !cfg.randomize_order && measured.len() >= 2 {
            let sat = saturation_index(&measured, cfg.saturation_fraction);
            if measured.len() > sat + cfg.sizes_past_saturation {
                break;
            }
        }
    }
    measured.sort_by_key(|m| m.size_bytes);
    let sat = saturation_index(&measured, cfg.saturation_fraction);
    measured.truncate((sat + cfg.sizes_past_saturation + 1).max(2));

    let label = match device.mode() {
        AccessMode::Direct => "profiled(direct)",
        AccessMode::Buffered => "profiled(buffered)",
        AccessMode::Synthetic => "profiled(synthetic)",
    };
    let table = LatencyTable::from_measurements(
        label,
        measured
            .iter()
            .map(|m| (m.size_bytes, m.mean_latency_us))
            .collect(),
    )?;
    let saturation_bytes = saturation_size(&table, cfg.saturation_fraction)?;
    Ok(ProfileReport {
        table,
        sizes: measured,
        saturation_bytes,
        cache,
    })
}

/// Opens `path` in the configured access mode and profiles it.
pub fn run_profile_file(cfg: &ProfileConfig, path: &Path) -> Result<ProfileReport> {
    let device = FileDevice::open(path, cfg.use_direct_io)?;
    run_profile(cfg, &device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{ShimParams, SyntheticDevice};

    fn shim(noise: f64, seed: u64) -> SyntheticDevice {
        SyntheticDevice::new(
            ShimParams {
                overhead_us: 2.0,
                bandwidth_bytes_per_us: 1000.0,
                noise_rel: noise,
                seed,
            },
            64 * MIB,
        )
        .unwrap()
    }

    fn cfg() -> ProfileConfig {
        ProfileConfig {
            file_bytes: 64 * MIB,
            size_step_bytes: 4096,
            max_size_bytes: 2 * MIB,
            trials_per_size: 3,
            workers: 4,
            use_direct_io: false,
            max_reads_per_trial: 32,
            ..Default::default()
        }
    }

    #[test]
    fn recovers_planted_curve() {
        let dev = shim(0.01, 3);
        let report = run_profile(&cfg(), &dev).unwrap();
        assert_eq!(report.cache.status, CacheStatus::Synthetic);
        assert!(report.table.entries().len() > 32);
        for &(s, l) in report.table.entries() {
            let planted = dev.params().service_us(s);
            assert!(
                (l / planted - 1.0).abs() < 0.05,
                "size {s}: {l} vs {planted}"
            );
        }
        let thr = report.table.throughputs();
        assert!(thr.windows(2).all(|w| w[1].1 >= w[0].1 * 0.995));
    }

    #[test]
    fn saturation_matches_closed_form() {
        let dev = shim(0.0, 0);
        let c = cfg();
        let report = run_profile(&c, &dev).unwrap();
        let (o, bw) = (2.0, 1000.0);
        let max = report.table.max_profiled_bytes() as f64;
        let peak = max / (o + max / bw);
        let s_star = 0.99 * peak * o / (1.0 - 0.99 * peak / bw);
        let expected = (s_star / c.size_step_bytes as f64).ceil() * c.size_step_bytes as f64;
        assert!(
            (report.saturation_bytes as f64 - expected).abs() <= c.size_step_bytes as f64,
            "{} vs {expected}",
            report.saturation_bytes
        );
        // 32 sizes past the saturation point
        let sat_idx = report
            .sizes
            .iter()
            .position(|m| m.size_bytes == report.saturation_bytes)
            .unwrap();
        assert_eq!(report.sizes.len() - 1 - sat_idx, 32);
    }

    #[test]
    fn trial_count_does_not_shift_means() {
        let one = run_profile(
            &ProfileConfig {
                trials_per_size: 1,
                ..cfg()
            },
            &shim(0.005, 9),
        )
        .unwrap();
        let three = run_profile(&cfg(), &shim(0.005, 10)).unwrap();
        for (a, b) in one.table.entries().iter().zip(three.table.entries()) {
            assert_eq!(a.0, b.0);
            assert!((a.1 / b.1 - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn repeat_profiles_are_stable() {
        let a = run_profile(&cfg(), &shim(0.01, 1)).unwrap();
        let b = run_profile(&cfg(), &shim(0.01, 2)).unwrap();
        for s in (4096..=a.table.max_profiled_bytes()).step_by(4096 * 7) {
            assert!((a.table.lookup(s) / b.table.lookup(s) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn randomized_order_yields_same_table_shape() {
        let c = ProfileConfig {
            randomize_order: true,
            max_size_bytes: 256 * 1024,
            sizes_past_saturation: 4,
            ..cfg()
        };
        let report = run_profile(&c, &shim(0.0, 0)).unwrap();
        let sizes: Vec<u64> = report.table.entries().iter().map(|e| e.0).collect();
        assert!(sizes.windows(2).all(|w| w[1] == w[0] + 4096));
    }

    #[test]
    fn rejects_small_target_and_bad_config() {
        let small = SyntheticDevice::new(
            ShimParams {
                overhead_us: 1.0,
                bandwidth_bytes_per_us: 1.0,
                noise_rel: 0.0,
                seed: 0,
            },
            MIB,
        )
        .unwrap();
        assert!(matches!(run_profile(&cfg(), &small), Err(Error::Input(_))));
        let bad = ProfileConfig {
            workers: 0,
            ..cfg()
        };
        assert!(run_profile(&bad, &shim(0.0, 0)).is_err());
    }

    #[test]
    fn noisy_sizes_are_flagged_not_fatal() {
        let c = ProfileConfig {
            rsd_threshold: 1e-6,
            max_size_bytes: 64 * 1024,
            ..cfg()
        };
        let report = run_profile(&c, &shim(0.2, 4)).unwrap();
        assert!(report.flagged().count() > 0);
    }

    #[test]
    fn buffered_file_profile_warns() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&vec![7u8; 4 * MIB as usize]).unwrap();
        let c = ProfileConfig {
            file_bytes: 4 * MIB,
            size_step_bytes: 4096,
            max_size_bytes: 32 * 1024,
            trials_per_size: 1,
            workers: 2,
            use_direct_io: false,
            sizes_past_saturation: 2,
            ..Default::default()
        };
        let report = run_profile_file(&c, f.path()).unwrap();
        assert!(report.cache.is_warning());
        assert!(report.table.entries().len() >= 2);
    }

    #[test]
    fn stride_is_aligned_and_spread() {
        let c = ProfileConfig::default();
        assert_eq!(c.stride_for(1024), MIB);
        assert_eq!(c.stride_for(MIB), 2 * MIB);
        assert_eq!(c.stride_for(600 * 1024 + 1) % DIRECT_ALIGN, 0);
    }
}
