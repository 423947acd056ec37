//! Runtime-feasibility sweep over chunk-selection hyperparameters.
//!
//! Every (start, jump cap) grid point is timed on random importance vectors
//! per matrix shape; points whose median runtime exceeds the threshold are
//! infeasible, and the chosen point is the feasible one nearest the origin
//! of the grid that also clears a safety margin.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::latency::{saturation_size, LatencyTable};
use crate::mask::{ImportanceVector, WeightLayout};
use crate::select::{budget_from_sparsity, chunk_select_with, ChunkSelectParams, KIB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub shapes: Vec<WeightLayout>,
    pub start_grid_kb: Vec<u32>,
    pub cap_grid_kb: Vec<u32>,
    /// Largest chunk size; defaults to the table's saturation size.
    pub end_kb: Option<u32>,
    pub threshold_us: f64,
    pub trials: usize,
    pub sparsity_for_timing: f64,
    /// Chosen point must run within this fraction of the threshold if any
    /// feasible point does.
    pub safety_margin: f64,
    pub seed: u64,
    pub exec: ExecChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecChoice {
    Sequential,
    #[default]
    Parallel,
}

impl From<ExecChoice> for Exec {
    fn from(e: ExecChoice) -> Self {
        match e {
            ExecChoice::Sequential => Exec::Sequential,
            ExecChoice::Parallel => Exec::Parallel,
        }
    }
}

pub fn default_grid() -> Vec<u32> {
    (4..=64).step_by(4).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            shapes: Vec::new(),
            start_grid_kb: default_grid(),
            cap_grid_kb: default_grid(),
            end_kb: None,
            threshold_us: 2000.0,
            trials: 30,
            sparsity_for_timing: 0.1,
            safety_margin: 0.8,
            seed: 0,
            exec: ExecChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub start_kb: u32,
    pub cap_kb: u32,
    pub median_us: f64,
    pub feasible: bool,
    /// Trials actually run. Below the configured count when more than half
    /// of the trials had already exceeded the threshold.
    pub trials_run: usize,
}

/// A cap at which a coarser start is infeasible while a finer one is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseFlag {
    pub cap_kb: u32,
    pub feasible_start_kb: u32,
    pub infeasible_start_kb: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSweep {
    pub layout: WeightLayout,
    pub points: Vec<GridPoint>,
    pub chosen: Option<ChunkSelectParams>,
    pub chosen_median_us: Option<f64>,
    pub noise_flags: Vec<NoiseFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub device_label: String,
    pub end_kb: u32,
    pub threshold_us: f64,
    pub shapes: Vec<ShapeSweep>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Lowest `start + cap` (then lowest cap) among feasible points, stepping
/// past points slower than the safety margin when a faster one exists.
fn choose(points: &[GridPoint], threshold_us: f64, margin: f64) -> Option<GridPoint> {
    let mut feasible: Vec<&GridPoint> = points.iter().filter(|p| p.feasible).collect();
    feasible.sort_by_key(|p| (p.start_kb + p.cap_kb, p.cap_kb, p.start_kb));
    feasible
        .iter()
        .find(|p| p.median_us <= margin * threshold_us)
        .or(feasible.first())
        .map(|p| **p)
}

fn noise_flags(points: &[GridPoint]) -> Vec<NoiseFlag> {
    let mut caps: Vec<u32> = points.iter().map(|p| p.cap_kb).collect();
    caps.sort_unstable();
    caps.dedup();
    let mut flags = Vec::new();
    for cap in caps {
        let mut row: Vec<&GridPoint> = points.iter().filter(|p| p.cap_kb == cap).collect();
        row.sort_by_key(|p| p.start_kb);
        for (i, a) in row.iter().enumerate() {
            if !a.feasible {
                continue;
            }
            if let Some(b) = row[i + 1..].iter().find(|b| !b.feasible) {
                flags.push(NoiseFlag {
                    cap_kb: cap,
                    feasible_start_kb: a.start_kb,
                    infeasible_start_kb: b.start_kb,
                });
            }
        }
    }
    flags
}

/// Times one grid point: median full `chunk_select` runtime in µs over the
/// trials run, and how many ran. With `stop_above`, timing ends as soon as a
/// majority of `trials` exceed it, which already fixes the median above it.
#[allow(clippy::too_many_arguments)]
pub fn time_point(
    layout: WeightLayout,
    params: &ChunkSelectParams,
    table: &LatencyTable,
    sparsity: f64,
    trials: usize,
    stop_above: Option<f64>,
    exec: Exec,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let budget = budget_from_sparsity(sparsity, layout.n_rows)?;
    let majority = trials / 2 + 1;
    let mut times = Vec::with_capacity(trials);
    let mut above = 0;
    for _ in 0..trials {
        let v = ImportanceVector::new((0..layout.n_rows).map(|_| rng.random::<f64>()).collect())?;
        let t0 = Instant::now();
        let res = chunk_select_with(&v, budget, layout, table, params, exec)?;
        let us = t0.elapsed().as_secs_f64() * 1e6;
        std::hint::black_box(res);
        times.push(us);
        if stop_above.is_some_and(|limit| us > limit) {
            above += 1;
            if above >= majority {
                break;
            }
        }
    }
    let run = times.len();
    Ok((median(&mut times), run))
}

pub fn sweep(cfg: &SweepConfig, table: &LatencyTable) -> Result<SweepReport> {
    if cfg.trials == 0
        || cfg.start_grid_kb.is_empty()
        || cfg.cap_grid_kb.is_empty()
        || cfg.start_grid_kb.contains(&0)
        || cfg.cap_grid_kb.contains(&0)
        || !(cfg.threshold_us > 0.0)
    {
        return Err(Error::Input(
            "sweep needs trials >= 1, a positive threshold and non-empty positive grids".into(),
        ));
    }
    let end_kb = match cfg.end_kb {
        Some(e) => e,
        None => (saturation_size(table, 0.99)? / KIB).max(1) as u32,
    };
    let exec = Exec::from(cfg.exec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut shapes = Vec::with_capacity(cfg.shapes.len());
    for &layout in &cfg.shapes {
        let mut points = Vec::new();
        for &start in &cfg.start_grid_kb {
            for &cap in &cfg.cap_grid_kb {
                // step size tied to the start size
                let params = ChunkSelectParams::new(start, end_kb.max(start), start, cap)?;
                let (median_us, trials_run) = time_point(
                    layout,
                    &params,
                    table,
                    cfg.sparsity_for_timing,
                    cfg.trials,
                    Some(cfg.threshold_us),
                    exec,
                    &mut rng,
                )?;
                points.push(GridPoint {
                    start_kb: start,
                    cap_kb: cap,
                    median_us,
                    feasible: median_us <= cfg.threshold_us,
                    trials_run,
                });
            }
        }
        let chosen_point = choose(&points, cfg.threshold_us, cfg.safety_margin);
        let noise_flags = noise_flags(&points);
        if !noise_flags.is_empty() {
            log::warn!(
                "shape {}x{}: {} non-monotone feasibility cells (timing noise)",
                layout.n_rows,
                layout.row_bytes,
                noise_flags.len()
            );
        }
        shapes.push(ShapeSweep {
            layout,
            chosen: chosen_point.map(|p| ChunkSelectParams {
                chunk_sz_start_kb: p.start_kb,
                chunk_sz_end_kb: end_kb.max(p.start_kb),
                chunk_sz_step_kb: p.start_kb,
                jump_cap_kb: p.cap_kb,
            }),
            chosen_median_us: chosen_point.map(|p| p.median_us),
            points,
            noise_flags,
        });
    }
    Ok(SweepReport {
        device_label: table.device_label().to_string(),
        end_kb,
        threshold_us: cfg.threshold_us,
        shapes,
    })
}

/// Per-shape parameter file consumed by the `select` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub device_label: String,
    pub end_kb: u32,
    pub shapes: Vec<ShapeParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub n_rows: usize,
    pub row_bytes: usize,
    pub status: ShapeStatus,
    pub params: Option<ChunkSelectParams>,
    pub median_us: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeStatus {
    Feasible,
    Infeasible,
}

impl SweepReport {
    pub fn params_file(&self) -> ParamsFile {
        ParamsFile {
            device_label: self.device_label.clone(),
            end_kb: self.end_kb,
            shapes: self
                .shapes
                .iter()
                .map(|s| ShapeParams {
                    n_rows: s.layout.n_rows,
                    row_bytes: s.layout.row_bytes,
                    status: if s.chosen.is_some() {
                        ShapeStatus::Feasible
                    } else {
                        ShapeStatus::Infeasible
                    },
                    params: s.chosen,
                    median_us: s.chosen_median_us.map(|m| crate::formats::round_sig(m, 6)),
                })
                .collect(),
        }
    }

    pub fn infeasible(&self) -> impl Iterator<Item = &ShapeSweep> {
        self.shapes.iter().filter(|s| s.chosen.is_none())
    }

    /// One row per shape: rows, row bytes, chosen start and jump cap.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>10} {:>9} {:>9} {:>11}\n",
            "rows", "row_bytes", "chunk_sz", "jump_cap", "median_us"
        );
        for s in &self.shapes {
            match (s.chosen, s.chosen_median_us) {
                (Some(p), Some(m)) => out.push_str(&format!(
                    "{:>8} {:>10} {:>9} {:>9} {:>11.1}\n",
                    s.layout.n_rows, s.layout.row_bytes, p.chunk_sz_start_kb, p.jump_cap_kb, m
                )),
                _ => out.push_str(&format!(
                    "{:>8} {:>10} {:>9} {:>9} {:>11}\n",
                    s.layout.n_rows, s.layout.row_bytes, "-", "-", "infeasible"
                )),
            }
        }
        out
    }
}

impl ParamsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("params serialize");
        s.push('\n');
        std::fs::write(path, s).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn params_for(&self, layout: WeightLayout) -> Result<ChunkSelectParams> {
        let entry = self
            .shapes
            .iter()
            .find(|s| s.n_rows == layout.n_rows && s.row_bytes == layout.row_bytes)
            .ok_or_else(|| {
                Error::Input(format!(
                    "no tuned parameters for shape {}x{}",
                    layout.n_rows, layout.row_bytes
                ))
            })?;
        entry.params.ok_or_else(|| {
            Error::Input(format!(
                "shape {}x{} was infeasible in the sweep",
                layout.n_rows, layout.row_bytes
            ))
        })
    }
}
