//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::device::{FileDevice, ReadDevice, ShimParams, SyntheticDevice};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::formats::{
    fmt_real, parse_grid, parse_layout, parse_params, parse_shapes, read_importance, read_mask,
    write_mask,
};
use crate::ioengine::{validate_estimator, DEFAULT_WORKERS};
use crate::latency::{
    estimate_mask_latency, saturation_size, synthesize_table, LatencyTable, SyntheticDeviceParams,
};
use crate::mask::{
    contiguity_distribution, distribution_stats, ImportanceVector, SelectionMask, WeightLayout,
};
use crate::profile::{run_profile, ProfileConfig};
use crate::reorder::{
    build_permutation, frequency_report, permute_rows, FrequencyProfile, Permutation,
};
use crate::select::{
    budget_from_sparsity, chunk_select_with, threshold_select, topk_select, ChunkSelectParams,
    DeviceClass, KIB,
};
use crate::tune::{default_grid, sweep, ExecChoice, ParamsFile, SweepConfig};

#[derive(Debug, Parser)]
#[command(
    name = "flashchunk",
    version,
    about = "Latency-aware chunked neuron selection for flash-resident weights"
)]
pub struct Cli {
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure read latency per chunk size and write a latency table.
    Profile(ProfileArgs),
    /// Select neurons under a row budget and write a mask.
    Select(SelectArgs),
    /// Print the estimated read latency of masks.
    Estimate(EstimateArgs),
    /// Print contiguity distributions of masks side by side.
    Analyze(AnalyzeArgs),
    /// Build a hot-cold permutation and reorder a weights file.
    Reorder(ReorderArgs),
    /// Activation-frequency histogram and hot/cold fractions.
    FreqReport(FreqReportArgs),
    /// Read masks from a weights file and compare measured to estimated latency.
    Bench(BenchArgs),
    /// Time chunk selection over a hyperparameter grid per shape.
    Sweep(SweepArgs),
    /// Write a latency table for an affine synthetic device.
    SynthTable(SynthTableArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ShimArgs {
    /// Use an in-process synthetic device instead of a file.
    #[arg(long)]
    pub shim: bool,
    #[arg(long, default_value_t = 20.0)]
    pub shim_overhead_us: f64,
    #[arg(long, default_value_t = 2000.0)]
    pub shim_bandwidth_mbps: f64,
    /// Relative uniform noise on each request, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub shim_noise: f64,
}

impl ShimArgs {
    fn params(&self, seed: u64) -> ShimParams {
        ShimParams {
            overhead_us: self.shim_overhead_us,
            // 1 MB/s is one byte per microsecond
            bandwidth_bytes_per_us: self.shim_bandwidth_mbps,
            noise_rel: self.shim_noise,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, required_unless_present = "shim")]
    pub file: Option<PathBuf>,
    #[arg(long, default_value_t = 128 * 1024 * 1024)]
    pub file_bytes: u64,
    #[arg(long, default_value_t = 1)]
    pub step_kb: u64,
    #[arg(long, default_value_t = 4096)]
    pub max_kb: u64,
    #[arg(long, default_value_t = 6)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    #[arg(long, conflicts_with = "buffered")]
    pub direct: bool,
    #[arg(long)]
    pub buffered: bool,
    #[arg(long, default_value_t = 0.05)]
    pub rsd_threshold: f64,
    /// Sizes still measured after saturation is reached.
    #[arg(long, default_value_t = 32)]
    pub sizes_past_saturation: usize,
    #[arg(long, default_value_t = 128)]
    pub max_reads_per_trial: usize,
    #[arg(long)]
    pub randomize_order: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub shim: ShimArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-size measurements as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Topk,
    Threshold,
    Chunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeviceArg {
    HighEnd,
    LowEnd,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub importance: PathBuf,
    #[arg(long, conflicts_with = "sparsity")]
    pub budget: Option<usize>,
    /// Fraction of rows dropped.
    #[arg(long)]
    pub sparsity: Option<f64>,
    /// Importance cut-off for the threshold baseline.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub layout: String,
    #[arg(long)]
    pub table: PathBuf,
    /// start,end,step,cap in KB.
    #[arg(long, conflicts_with = "params_file")]
    pub params: Option<String>,
    #[arg(long)]
    pub params_file: Option<PathBuf>,
    /// Device class for built-in per-shape defaults.
    #[arg(long, value_enum, default_value_t = DeviceArg::HighEnd)]
    pub device: DeviceArg,
    #[arg(long, value_enum, default_value_t = Baseline::Chunk)]
    pub baseline: Baseline,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub mask: Vec<PathBuf>,
    #[arg(long)]
    pub layout: String,
    #[arg(long)]
    pub table: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub mask: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReorderArgs {
    /// Directory of importance vectors.
    #[arg(long)]
    pub calibrate: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub active_fraction: f64,
    #[arg(long, requires = "out_weights")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub layout: String,
    #[arg(long, requires = "weights")]
    pub out_weights: Option<PathBuf>,
    #[arg(long)]
    pub out_perm: PathBuf,
}

#[derive(Debug, Args)]
pub struct FreqReportArgs {
    #[arg(long)]
    pub calibrate: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub active_fraction: f64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, required_unless_present = "shim")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub layout: String,
    #[arg(long)]
    pub table: PathBuf,
    /// Directory of mask files.
    #[arg(long)]
    pub masks: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    pub workers: usize,
    #[arg(long, conflicts_with = "buffered")]
    pub direct: bool,
    #[arg(long)]
    pub buffered: bool,
    /// Permutation whose runtime application cost is reported.
    #[arg(long)]
    pub perm: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub shim: ShimArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// One NxB layout per line.
    #[arg(long)]
    pub shapes: PathBuf,
    /// Grid for both start and cap: lo..hi:step or a,b,c (KB).
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub start_grid: Option<String>,
    #[arg(long)]
    pub cap_grid: Option<String>,
    #[arg(long)]
    pub end_kb: Option<u32>,
    #[arg(long, default_value_t = 2.0)]
    pub threshold_ms: f64,
    #[arg(long, default_value_t = 30)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0.8)]
    pub margin: f64,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Full grid as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthTableArgs {
    #[arg(long)]
    pub overhead_us: f64,
    #[arg(long)]
    pub bandwidth_mbps: f64,
    #[arg(long, default_value_t = 1)]
    pub step_kb: u64,
    #[arg(long)]
    pub max_kb: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Profile(a) => cmd_profile(a, out),
        Command::Select(a) => cmd_select(a, out),
        Command::Estimate(a) => cmd_estimate(a, out),
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Reorder(a) => cmd_reorder(a, out),
        Command::FreqReport(a) => cmd_freq_report(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::SynthTable(a) => cmd_synth_table(a, out),
    }
}

fn emit(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invariant(format!("serialization failed: {e}")))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-hidden regular files of `dir`, sorted by name.
fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| Error::File {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn use_direct(direct: bool, buffered: bool) -> bool {
    direct || !buffered
}

fn cmd_profile(a: ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ProfileConfig {
        file_bytes: a.file_bytes,
        size_step_bytes: a.step_kb * KIB,
        max_size_bytes: a.max_kb * KIB,
        trials_per_size: a.trials,
        workers: a.workers,
        use_direct_io: use_direct(a.direct, a.buffered),
        rsd_threshold: a.rsd_threshold,
        sizes_past_saturation: a.sizes_past_saturation,
        max_reads_per_trial: a.max_reads_per_trial,
        randomize_order: a.randomize_order,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let device: Box<dyn ReadDevice> = match (&a.file, a.shim.shim) {
        (_, true) => Box::new(SyntheticDevice::new(a.shim.params(a.seed), cfg.file_bytes)?),
        (Some(path), false) => Box::new(FileDevice::open(path, cfg.use_direct_io)?),
        (None, false) => return Err(Error::Input("profile needs --file or --shim".into())),
    };
    let report = run_profile(&cfg, device.as_ref())?;
    if report.cache.is_warning() {
        eprintln!("{}", report.cache.message);
    }
    report.table.save(&a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report.sizes)?;
    }
    emit(out, format!("cache {}", report.cache.message))?;
    emit(out, format!("sizes_profiled {}", report.sizes.len()))?;
    emit(out, format!("saturation_bytes {}", report.saturation_bytes))?;
    let flagged: Vec<String> = report.flagged().map(|m| m.size_bytes.to_string()).collect();
    emit(out, format!("flagged_sizes {}", flagged.len()))?;
    if !flagged.is_empty() {
        eprintln!(
            "warning: relative std above {} at sizes {}",
            a.rsd_threshold,
            flagged.join(",")
        );
    }
    emit(out, format!("table {}", a.out.display()))
}

fn resolve_params(
    a: &SelectArgs,
    layout: WeightLayout,
    table: &LatencyTable,
) -> Result<ChunkSelectParams> {
    if let Some(p) = &a.params {
        return parse_params(p);
    }
    if let Some(path) = &a.params_file {
        return ParamsFile::load(path)?.params_for(layout);
    }
    let end_kb = (saturation_size(table, 0.99)? / KIB).max(1) as u32;
    let device = match a.device {
        DeviceArg::HighEnd => DeviceClass::HighEnd,
        DeviceArg::LowEnd => DeviceClass::LowEnd,
    };
    Ok(ChunkSelectParams::tuned_default(layout, device, end_kb))
}

fn stats_lines(
    mask: &SelectionMask,
    v: &ImportanceVector,
    layout: WeightLayout,
    table: &LatencyTable,
) -> Result<Vec<(String, String)>> {
    let latency = estimate_mask_latency(mask, layout, table)?;
    let importance = v.masked_sum(mask);
    let objective = if latency > 0.0 {
        importance / latency
    } else {
        0.0
    };
    let stats = distribution_stats(&contiguity_distribution(mask));
    Ok(vec![
        ("selected_rows".into(), mask.popcount().to_string()),
        ("estimated_latency_us".into(), fmt_real(latency)),
        ("total_importance".into(), fmt_real(importance)),
        ("objective".into(), fmt_real(objective)),
        ("num_chunks".into(), stats.num_chunks.to_string()),
        ("mean_chunk_rows".into(), fmt_real(stats.mean_chunk_rows)),
        ("mode_chunk_rows".into(), stats.mode_chunk_rows.to_string()),
    ])
}

fn cmd_select(a: SelectArgs, out: &mut dyn Write) -> Result<()> {
    let layout = parse_layout(&a.layout)?;
    let v = read_importance(&a.importance)?;
    v.check_len(layout.n_rows)?;
    let table = LatencyTable::load(&a.table)?;
    let budget = match (a.budget, a.sparsity) {
        (Some(r), _) => {
            if r > layout.n_rows {
                return Err(Error::Budget {
                    budget: r,
                    n_rows: layout.n_rows,
                });
            }
            Some(r)
        }
        (None, Some(s)) => Some(budget_from_sparsity(s, layout.n_rows)?),
        (None, None) => None,
    };
    let need_budget = || Error::Input("--budget or --sparsity is required".into());
    let t0 = Instant::now();
    let (mask, params) = match a.baseline {
        Baseline::Topk => (topk_select(&v, budget.ok_or_else(need_budget)?)?, None),
        Baseline::Threshold => {
            let tau = a
                .tau
                .ok_or_else(|| Error::Input("--baseline threshold needs --tau".into()))?;
            (threshold_select(&v, tau)?, None)
        }
        Baseline::Chunk => {
            let params = resolve_params(&a, layout, &table)?;
            let exec = if a.sequential {
                Exec::Sequential
            } else {
                Exec::Parallel
            };
            let r = chunk_select_with(
                &v,
                budget.ok_or_else(need_budget)?,
                layout,
                &table,
                &params,
                exec,
            )?;
            (r.mask, Some(params))
        }
    };
    let runtime_us = t0.elapsed().as_secs_f64() * 1e6;

    let mut comments = vec![(
        "baseline".to_string(),
        format!("{:?}", a.baseline).to_lowercase(),
    )];
    if let Some(r) = budget {
        comments.push(("budget".into(), r.to_string()));
    }
    if let Some(p) = params {
        comments.push((
            "params_kb".into(),
            format!(
                "{},{},{},{}",
                p.chunk_sz_start_kb, p.chunk_sz_end_kb, p.chunk_sz_step_kb, p.jump_cap_kb
            ),
        ));
    }
    comments.extend(stats_lines(&mask, &v, layout, &table)?);
    write_mask(&a.out, &mask, &comments)?;
    for (k, val) in &comments {
        emit(out, format!("{k} {val}"))?;
    }
    emit(
        out,
        format!("selection_runtime_us {}", fmt_real(runtime_us)),
    )
}

fn cmd_estimate(a: EstimateArgs, out: &mut dyn Write) -> Result<()> {
    let layout = parse_layout(&a.layout)?;
    let table = LatencyTable::load(&a.table)?;
    for path in &a.mask {
        let mask = read_mask(path)?;
        let est = estimate_mask_latency(&mask, layout, &table)?;
        emit(out, format!("{} {}", path.display(), fmt_real(est)))?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let masks = a
        .mask
        .iter()
        .map(|p| read_mask(p))
        .collect::<Result<Vec<_>>>()?;
    let dists: Vec<_> = masks.iter().map(contiguity_distribution).collect();
    let mut lens: Vec<usize> = dists
        .iter()
        .flat_map(|d| d.counts.keys().copied())
        .collect();
    lens.sort_unstable();
    lens.dedup();

    let mut header = String::from("chunk_rows");
    for p in &a.mask {
        header.push('\t');
        header.push_str(&p.display().to_string());
    }
    emit(out, header)?;
    for len in lens {
        let mut row = len.to_string();
        for d in &dists {
            row.push('\t');
            row.push_str(&d.counts.get(&len).copied().unwrap_or(0).to_string());
        }
        emit(out, row)?;
    }
    let stats: Vec<_> = dists.iter().map(distribution_stats).collect();
    let line = |name: &str, f: &dyn Fn(usize) -> String| {
        let mut s = name.to_string();
        for i in 0..stats.len() {
            s.push('\t');
            s.push_str(&f(i));
        }
        s
    };
    emit(
        out,
        line("selected_rows", &|i| masks[i].popcount().to_string()),
    )?;
    emit(
        out,
        line("num_chunks", &|i| stats[i].num_chunks.to_string()),
    )?;
    emit(
        out,
        line("mean_chunk_rows", &|i| fmt_real(stats[i].mean_chunk_rows)),
    )?;
    emit(
        out,
        line("mode_chunk_rows", &|i| stats[i].mode_chunk_rows.to_string()),
    )
}

fn build_profile(dir: &Path, n_rows: Option<usize>, fraction: f64) -> Result<FrequencyProfile> {
    let files = list_dir(dir)?;
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no importance files in {}",
            dir.display()
        )));
    }
    let mut profile: Option<FrequencyProfile> = None;
    for f in &files {
        let v = read_importance(f)?;
        let p = match &mut profile {
            Some(p) => p,
            None => profile.insert(FrequencyProfile::new(n_rows.unwrap_or(v.len()), fraction)?),
        };
        p.accumulate(&v).map_err(|e| match e {
            Error::LengthMismatch { expected, actual } => Error::format(
                f.display().to_string(),
                format!("vector length {actual}, expected {expected}"),
            ),
            e => e,
        })?;
    }
    Ok(profile.expect("at least one file"))
}

fn cmd_reorder(a: ReorderArgs, out: &mut dyn Write) -> Result<()> {
    let layout = parse_layout(&a.layout)?;
    let profile = build_profile(&a.calibrate, Some(layout.n_rows), a.active_fraction)?;
    let perm = build_permutation(&profile)?;
    perm.save(&a.out_perm)?;
    if let (Some(w), Some(o)) = (&a.weights, &a.out_weights) {
        permute_rows(w, o, layout, &perm)?;
        emit(out, format!("weights {}", o.display()))?;
    }
    let moved = perm
        .forward()
        .iter()
        .enumerate()
        .filter(|(k, &src)| *k != src)
        .count();
    emit(out, format!("samples {}", profile.num_samples))?;
    emit(out, format!("rows_moved {moved}"))?;
    emit(out, format!("permutation {}", a.out_perm.display()))
}

fn cmd_freq_report(a: FreqReportArgs, out: &mut dyn Write) -> Result<()> {
    let profile = build_profile(&a.calibrate, None, a.active_fraction)?;
    let report = frequency_report(&profile, a.bins)?;
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    emit(out, format!("neurons {}", report.n_rows))?;
    emit(out, format!("samples {}", report.num_samples))?;
    emit(
        out,
        format!("hot_percent {}", fmt_real(100.0 * report.hot_fraction)),
    )?;
    emit(
        out,
        format!("cold_percent {}", fmt_real(100.0 * report.cold_fraction)),
    )?;
    emit(out, "bin_low\tbin_high\tneurons")?;
    let w = 1.0 / a.bins as f64;
    for (i, c) in report.histogram.iter().enumerate() {
        emit(
            out,
            format!(
                "{}\t{}\t{}",
                fmt_real(i as f64 * w),
                fmt_real((i + 1) as f64 * w),
                c
            ),
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchReport {
    access_mode: crate::device::AccessMode,
    workers: usize,
    masks: Vec<String>,
    pairs: Vec<crate::ioengine::LatencyPair>,
    correlation: Option<f64>,
    scale_factor: f64,
    permutation_apply_us: Option<f64>,
}

fn cmd_bench(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let layout = parse_layout(&a.layout)?;
    let table = LatencyTable::load(&a.table)?;
    let files = list_dir(&a.masks)?;
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no mask files in {}",
            a.masks.display()
        )));
    }
    let masks = files
        .iter()
        .map(|p| read_mask(p))
        .collect::<Result<Vec<_>>>()?;
    let device: Box<dyn ReadDevice> = match (&a.weights, a.shim.shim) {
        (_, true) => Box::new(SyntheticDevice::new(
            a.shim.params(a.seed),
            layout.total_bytes(),
        )?),
        (Some(path), false) => Box::new(FileDevice::open(path, use_direct(a.direct, a.buffered))?),
        (None, false) => return Err(Error::Input("bench needs --weights or --shim".into())),
    };
    if device.len() < layout.total_bytes() {
        return Err(Error::Input(format!(
            "weights hold {} bytes, layout needs {}",
            device.len(),
            layout.total_bytes()
        )));
    }
    let report = validate_estimator(device.as_ref(), layout, &table, &masks, a.workers)?;

    let permutation_apply_us = match &a.perm {
        Some(path) => {
            let perm = Permutation::load(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let v =
                ImportanceVector::new((0..layout.n_rows).map(|_| rng.random::<f64>()).collect())?;
            let t0 = Instant::now();
            let pv = perm.apply_importance(&v)?;
            let us = t0.elapsed().as_secs_f64() * 1e6;
            std::hint::black_box(pv);
            Some(us)
        }
        None => None,
    };

    emit(out, "mask\testimated_us\tmeasured_us")?;
    for (p, pair) in files.iter().zip(&report.pairs) {
        emit(
            out,
            format!(
                "{}\t{}\t{}",
                p.display(),
                fmt_real(pair.estimated_us),
                fmt_real(pair.measured_us)
            ),
        )?;
    }
    match report.correlation {
        Some(r) => emit(out, format!("correlation {}", fmt_real(r)))?,
        None => emit(out, "correlation undefined")?,
    }
    emit(
        out,
        format!("scale_factor {}", fmt_real(report.scale_factor)),
    )?;
    if let Some(us) = permutation_apply_us {
        emit(out, format!("permutation_apply_us {}", fmt_real(us)))?;
    }
    if device.mode() == crate::device::AccessMode::Buffered {
        eprintln!("warning: buffered access, measurements may reflect page-cache hits");
    }
    if let Some(path) = &a.out {
        write_json(
            path,
            &BenchReport {
                access_mode: device.mode(),
                workers: a.workers,
                masks: files.iter().map(|p| p.display().to_string()).collect(),
                pairs: report
                    .pairs
                    .iter()
                    .map(|p| crate::ioengine::LatencyPair {
                        estimated_us: crate::formats::round_sig(p.estimated_us, 6),
                        measured_us: crate::formats::round_sig(p.measured_us, 6),
                    })
                    .collect(),
                correlation: report.correlation.map(|r| crate::formats::round_sig(r, 6)),
                scale_factor: crate::formats::round_sig(report.scale_factor, 6),
                permutation_apply_us: permutation_apply_us.map(|u| crate::formats::round_sig(u, 6)),
            },
        )?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.shapes).map_err(|source| Error::File {
        path: a.shapes.clone(),
        source,
    })?;
    let shapes = parse_shapes(&text, &a.shapes.display().to_string())?;
    let table = LatencyTable::load(&a.table)?;
    let both = a.grid.as_deref().map(parse_grid).transpose()?;
    let pick = |specific: &Option<String>| -> Result<Vec<u32>> {
        match (specific, &both) {
            (Some(s), _) => parse_grid(s),
            (None, Some(g)) => Ok(g.clone()),
            (None, None) => Ok(default_grid()),
        }
    };
    let cfg = SweepConfig {
        shapes,
        start_grid_kb: pick(&a.start_grid)?,
        cap_grid_kb: pick(&a.cap_grid)?,
        end_kb: a.end_kb,
        threshold_us: a.threshold_ms * 1000.0,
        trials: a.trials,
        sparsity_for_timing: a.sparsity,
        safety_margin: a.margin,
        seed: a.seed,
        exec: if a.sequential {
            ExecChoice::Sequential
        } else {
            ExecChoice::Parallel
        },
    };
    let report = sweep(&cfg, &table)?;
    report.params_file().save(&a.out)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    write!(out, "{}", report.summary_table())?;
    for s in report.infeasible() {
        eprintln!(
            "warning: shape {}x{} has no configuration within {} ms",
            s.layout.n_rows, s.layout.row_bytes, a.threshold_ms
        );
    }
    for s in &report.shapes {
        for f in &s.noise_flags {
            eprintln!(
                "warning: shape {}x{} cap {} KB: start {} KB infeasible but {} KB feasible (timing noise)",
                s.layout.n_rows, s.layout.row_bytes, f.cap_kb, f.infeasible_start_kb, f.feasible_start_kb
            );
        }
    }
    emit(out, format!("params {}", a.out.display()))
}

fn cmd_synth_table(a: SynthTableArgs, out: &mut dyn Write) -> Result<()> {
    let params = SyntheticDeviceParams {
        fixed_overhead_us: a.overhead_us,
        bandwidth_bytes_per_us: a.bandwidth_mbps,
        step_bytes: a.step_kb * KIB,
        max_bytes: a.max_kb * KIB,
    };
    let table = synthesize_table(&params)?;
    table.save(&a.out)?;
    emit(out, format!("entries {}", table.entries().len()))?;
    emit(
        out,
        format!("saturation_bytes {}", saturation_size(&table, 0.99)?),
    )?;
    emit(out, format!("table {}", a.out.display()))
}
