//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BackendPreset, RunConfig};
use crate::engine::{run, SimOutput};
use crate::error::{Error, Result};
use crate::metrics::{to_stable_json, to_stable_jsonl, write_csv};
use crate::workload::{apply_pattern, generate, load_trace, save_trace, Pattern, TraceRecord};

#[derive(Parser, Debug)]
#[command(name = "kvtier", version, about = "Hierarchical KV-cache serving simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate one configuration.
    Run(Common),
    /// Sweep the request rate.
    SweepRate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
    },
    /// Sweep the page size.
    SweepPage {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<u32>,
    },
    /// Run every subset of the listed features.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "deferral,balanced,bubble,io-backend")]
        features: Vec<Feature>,
    },
    /// Baseline against the full system on each access pattern.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "min,shuffle,max")]
        patterns: Vec<String>,
    },
    /// Write the generated workload trace.
    GenTrace(Common),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// h200-pcie5 or gh200-nvlink
    #[arg(long)]
    pub profile: Option<String>,
    /// min, shuffle or max
    #[arg(long)]
    pub pattern: Option<String>,
    /// gpu_assist or dma_copy
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Feature {
    Deferral,
    Balanced,
    Bubble,
    IoBackend,
}

impl Feature {
    fn name(self) -> &'static str {
        match self {
            Feature::Deferral => "deferral",
            Feature::Balanced => "balanced",
            Feature::Bubble => "bubble",
            Feature::IoBackend => "io-backend",
        }
    }

    fn set(self, cfg: &mut RunConfig, on: bool) {
        let s = &mut cfg.engine.scheduler;
        match self {
            Feature::Deferral => s.deferral_enabled = on,
            Feature::Balanced => {
                s.balanced_batching_enabled = on;
                s.dedup_enabled = on;
            }
            Feature::Bubble => s.bubble_fill_enabled = on,
            Feature::IoBackend => {
                let b = if on { BackendPreset::GpuAssist } else { BackendPreset::DmaCopy };
                b.apply(&mut cfg.engine);
                cfg.backend = b;
            }
        }
    }
}

/// One row of a sweep matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub point: String,
    pub hardware: String,
    pub backend: String,
    pub page_size: u32,
    pub rate: f64,
    pub pattern: String,
    pub features: String,
    pub requests: u64,
    pub ttft_mean: f64,
    pub ttft_p50: f64,
    pub ttft_p90: f64,
    pub output_throughput: f64,
    pub stall_fraction: f64,
    pub hit_rate: f64,
    pub compute_tokens: u64,
    pub deferrals: u64,
    pub bundle_hits: u64,
}

fn feature_label(cfg: &RunConfig) -> String {
    let s = &cfg.engine.scheduler;
    let mut on = Vec::new();
    if s.deferral_enabled {
        on.push("deferral");
    }
    if s.balanced_batching_enabled {
        on.push("balanced");
    }
    if s.bubble_fill_enabled {
        on.push("bubble");
    }
    if on.is_empty() {
        "none".into()
    } else {
        on.join("+")
    }
}

fn backend_label(b: BackendPreset) -> &'static str {
    match b {
        BackendPreset::GpuAssist => "gpu_assist",
        BackendPreset::DmaCopy => "dma_copy",
    }
}

/// A fully resolved simulation point.
#[derive(Debug, Clone)]
pub struct Point {
    pub label: String,
    pub cfg: RunConfig,
    pub pattern: Option<Pattern>,
}

impl Point {
    pub fn trace(&self, fixed: Option<&[TraceRecord]>) -> Result<Vec<TraceRecord>> {
        let t = match fixed {
            Some(t) => t.to_vec(),
            None => generate(&self.cfg.workload)?,
        };
        match self.pattern {
            Some(p) => apply_pattern(t, p, self.cfg.workload.seed),
            None => Ok(t),
        }
    }

    pub fn simulate(&self, fixed: Option<&[TraceRecord]>) -> Result<(SimOutput, MatrixRow)> {
        let trace = self.trace(fixed)?;
        let mut engine = self.cfg.engine.clone();
        engine.max_inflight = self.cfg.workload.max_inflight;
        engine.thinking_time_s = self.cfg.workload.thinking_time_s;
        let out = run(&trace, &engine)?;
        let a = &out.report.aggregate;
        let row = MatrixRow {
            point: self.label.clone(),
            hardware: self.cfg.hardware.clone(),
            backend: backend_label(self.cfg.backend).into(),
            page_size: self.cfg.engine.geometry.page_size_tokens,
            rate: self.cfg.workload.rate,
            pattern: match self.pattern.unwrap_or(self.cfg.workload.pattern) {
                Pattern::MinDistance => "min",
                Pattern::Shuffle => "shuffle",
                Pattern::MaxDistance => "max",
            }
            .into(),
            features: feature_label(&self.cfg),
            requests: a.requests,
            ttft_mean: a.ttft_mean,
            ttft_p50: a.ttft_p50,
            ttft_p90: a.ttft_p90,
            output_throughput: a.output_throughput,
            stall_fraction: a.stall_fraction,
            hit_rate: a.hit_rate,
            compute_tokens: a.compute_tokens,
            deferrals: a.deferrals,
            bundle_hits: a.bundle_hits,
        };
        Ok((out, row))
    }
}

fn resolve(c: &Common) -> Result<(RunConfig, Option<Pattern>, Option<Vec<TraceRecord>>)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_profiles("h200-pcie5", BackendPreset::GpuAssist, "loogle")?,
    };
    if let Some(h) = &c.profile {
        cfg = cfg.with_hardware(h)?;
    }
    if let Some(b) = &c.backend {
        cfg = cfg.with_backend(b.parse()?);
    }
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    let pattern = c.pattern.as_deref().map(str::parse).transpose()?;
    let trace = c.trace.as_deref().map(load_trace).transpose()?;
    Ok((cfg, pattern, trace))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn write_run(dir: &Path, out: &SimOutput) -> Result<()> {
    write_file(dir, "report.json", to_stable_json(&out.report)?.as_bytes())?;
    let mut buf = Vec::new();
    write_csv(&out.report.per_batch, &mut buf)?;
    write_file(dir, "batches.csv", &buf)?;
    buf.clear();
    write_csv(&out.report.per_request, &mut buf)?;
    write_file(dir, "requests.csv", &buf)?;
    write_file(dir, "scheduler.jsonl", to_stable_jsonl(&out.scheduler_log)?.as_bytes())
}

/// Runs `points` in parallel and writes the matrix in input order.
pub fn run_matrix(points: &[Point], trace: Option<&[TraceRecord]>) -> Result<Vec<MatrixRow>> {
    let rows: Vec<Result<MatrixRow>> = points.par_iter().map(|p| p.simulate(trace).map(|(_, r)| r)).collect();
    rows.into_iter().collect()
}

fn write_matrix(dir: &Path, rows: &[MatrixRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    write_file(dir, "matrix.csv", &buf)
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run(c) => {
            let (cfg, pattern, trace) = resolve(&c)?;
            let p = Point {
                label: "run".into(),
                cfg,
                pattern,
            };
            let (out, _) = p.simulate(trace.as_deref())?;
            write_run(&c.out, &out)
        }
        Command::GenTrace(c) => {
            let (cfg, pattern, _) = resolve(&c)?;
            let p = Point {
                label: "trace".into(),
                cfg,
                pattern,
            };
            std::fs::create_dir_all(&c.out)?;
            save_trace(&p.trace(None)?, &c.out.join("trace.jsonl"))
        }
        Command::SweepRate { common, rates } => {
            let (cfg, pattern, trace) = resolve(&common)?;
            if trace.is_some() {
                return Err(Error::Config("sweep-rate generates its traces; drop --trace".into()));
            }
            let points: Vec<Point> = rates
                .iter()
                .map(|&r| {
                    let mut c = cfg.clone();
                    c.workload.rate = r;
                    Point {
                        label: format!("rate={r}"),
                        cfg: c,
                        pattern,
                    }
                })
                .collect();
            write_matrix(&common.out, &run_matrix(&points, None)?)
        }
        Command::SweepPage { common, sizes } => {
            let (cfg, pattern, trace) = resolve(&common)?;
            let points: Vec<Point> = sizes
                .iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.engine.geometry.page_size_tokens = s;
                    Point {
                        label: format!("page={s}"),
                        cfg: c,
                        pattern,
                    }
                })
                .collect();
            for p in &points {
                p.cfg.engine.validate()?;
            }
            write_matrix(&common.out, &run_matrix(&points, trace.as_deref())?)
        }
        Command::Ablate { common, features } => {
            let (cfg, pattern, trace) = resolve(&common)?;
            let points = ablation_points(&cfg, &features, pattern);
            write_matrix(&common.out, &run_matrix(&points, trace.as_deref())?)
        }
        Command::Compare { common, patterns } => {
            let (cfg, _, trace) = resolve(&common)?;
            let mut points = Vec::new();
            for name in &patterns {
                let pattern: Pattern = name.parse()?;
                for (label, full) in [("baseline", false), ("full", true)] {
                    let mut c = cfg.clone();
                    for f in [Feature::Deferral, Feature::Balanced, Feature::Bubble, Feature::IoBackend] {
                        f.set(&mut c, full);
                    }
                    points.push(Point {
                        label: format!("{label}/{name}"),
                        cfg: c,
                        pattern: Some(pattern),
                    });
                }
            }
            write_matrix(&common.out, &run_matrix(&points, trace.as_deref())?)
        }
    }
}

/// One point per subset of `features`, in binary counting order.
pub fn ablation_points(cfg: &RunConfig, features: &[Feature], pattern: Option<Pattern>) -> Vec<Point> {
    (0..1u32 << features.len())
        .map(|mask| {
            let mut c = cfg.clone();
            let mut on = Vec::new();
            for (k, f) in features.iter().enumerate() {
                let enabled = mask & (1 << k) != 0;
                f.set(&mut c, enabled);
                if enabled {
                    on.push(f.name());
                }
            }
            Point {
                label: if on.is_empty() { "none".into() } else { on.join("+") },
                cfg: c,
                pattern,
            }
        })
        .collect()
}

/// Exit status for an error: 2 for bad input, 3 for simulation failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Trace(_) | Error::Unsupported(_) | Error::Granularity { .. } => 2,
        _ => 3,
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("kvtier: {e}");
            exit_code(&e)
        }
    }
}
