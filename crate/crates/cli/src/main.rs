use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use curtain_core::pipeline::{EvalMeans, MonitorStats, RunSink};
use curtain_core::render::DEFAULT_V_MAX;
use curtain_core::{render_grid, snapshot, throughput, DynamicOccupancyGrid, Mode, PolicyKind, RunConfig, StepRecord, StrategyId};

#[derive(Parser)]
#[command(name = "curtain", version, about = "Light-curtain placement on dynamic occupancy grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, snapshots and a summary to --out.
    Run {
        /// JSON run config; defaults are used for absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a PPM frame for every snapshot.
        #[arg(long)]
        frames: bool,
    },
    /// Aggregate run directories into per-policy tables.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Render the snapshots of a run directory as PPM frames.
    Render {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, default_value_t = DEFAULT_V_MAX)]
        v_max: f64,
    },
    /// Report filter and placement throughput for a config.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seconds spent timing each kernel.
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Summary {
    policy: PolicyKind,
    mode: Mode,
    seed: u64,
    steps: u64,
    eval: Option<EvalMeans>,
    truncation_rate: f64,
    q: [f64; 4],
    counts: [u64; 4],
    monitor: Option<MonitorStats>,
    elapsed_s: f64,
    filter_rate_hz: f64,
}

struct DirSink {
    metrics: BufWriter<File>,
    snapshots: PathBuf,
    frames: Option<PathBuf>,
}

impl RunSink for DirSink {
    fn record(&mut self, rec: &StepRecord) -> curtain_core::Result<()> {
        serde_json::to_writer(&mut self.metrics, rec)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn snapshot(&mut self, step: u64, grid: &DynamicOccupancyGrid) -> curtain_core::Result<()> {
        let name = format!("step_{step:07}");
        snapshot::write_grid(grid, BufWriter::new(File::create(self.snapshots.join(format!("{name}.grid")))?))?;
        if let Some(dir) = &self.frames {
            render_grid(grid, DEFAULT_V_MAX, 4)?.write_ppm(BufWriter::new(File::create(dir.join(format!("{name}.ppm")))?))?;
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    policy: Option<PolicyKind>,
    steps: Option<u64>,
    mode: Option<Mode>,
    out: PathBuf,
    frames: bool,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.policy = policy.unwrap_or(cfg.policy);
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.mode = mode.unwrap_or(cfg.mode);
    cfg.validate()?;

    let snapshots = out.join("snapshots");
    fs::create_dir_all(&snapshots).with_context(|| format!("creating {}", snapshots.display()))?;
    let frames = if frames {
        let dir = out.join("frames");
        fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut sink = DirSink { metrics: BufWriter::new(File::create(out.join("metrics.jsonl"))?), snapshots, frames };
    let summary = curtain_core::run(&cfg, &mut sink)?;
    sink.metrics.flush()?;
    snapshot::write_grid(&summary.final_grid, BufWriter::new(File::create(out.join("final.grid"))?))?;

    let s = Summary {
        policy: cfg.policy,
        mode: cfg.mode,
        seed: cfg.seed,
        steps: summary.steps,
        eval: summary.eval,
        truncation_rate: summary.truncation_rate(),
        q: summary.bandit.q_values,
        counts: summary.bandit.counts,
        monitor: summary.monitor,
        elapsed_s: summary.elapsed.as_secs_f64(),
        filter_rate_hz: summary.filter_rate,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    match s.eval {
        Some(e) => eprintln!("{} seed {}: {} steps, mean F1 {:.4}, IoU {:.4}", s.policy, s.seed, s.steps, e.f1, e.iou),
        None => eprintln!("{} seed {}: {} steps, no evaluation ticks", s.policy, s.seed, s.steps),
    }
    Ok(())
}

/// Mean and half-width of a normal-approximation 95% interval.
fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn cmd_eval(runs: Vec<PathBuf>) -> Result<()> {
    let mut by_policy: BTreeMap<String, Vec<Summary>> = BTreeMap::new();
    for dir in &runs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let s: Summary = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        by_policy.entry(format!("{}/{}", s.policy, s.mode)).or_default().push(s);
    }

    let mut out = String::new();
    out.push_str("| policy | runs | accuracy | precision | recall | F1 | IoU |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (name, list) in &by_policy {
        let evals: Vec<EvalMeans> = list.iter().filter_map(|s| s.eval).collect();
        if evals.is_empty() {
            out.push_str(&format!("| {name} | {} | - | - | - | - | - |\n", list.len()));
            continue;
        }
        let col = |f: fn(&EvalMeans) -> f64| {
            let (m, h) = mean_ci(&evals.iter().map(f).collect::<Vec<_>>());
            format!("{m:.4} ± {h:.4}")
        };
        out.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} |\n",
            evals.len(),
            col(|e| e.accuracy),
            col(|e| e.precision),
            col(|e| e.recall),
            col(|e| e.f1),
            col(|e| e.iou)
        ));
    }

    let mab: Vec<&Summary> = by_policy.values().flatten().filter(|s| s.policy == PolicyKind::Mab).collect();
    if !mab.is_empty() {
        let total: u64 = mab.iter().flat_map(|s| s.counts).sum();
        out.push_str("\n| arm | selected | mean Q |\n|---|---|---|\n");
        for arm in StrategyId::ALL {
            let k = arm.index();
            let picks: u64 = mab.iter().map(|s| s.counts[k]).sum();
            let q = mab.iter().map(|s| s.q[k]).sum::<f64>() / mab.len() as f64;
            let pct = if total == 0 { 0.0 } else { 100.0 * picks as f64 / total as f64 };
            out.push_str(&format!("| {arm} | {pct:.1}% | {q:.4} |\n"));
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_render(run: PathBuf, fps: f64, scale: usize, v_max: f64) -> Result<()> {
    if !(fps > 0.0) {
        bail!("--fps must be positive");
    }
    let cfg = RunConfig::load(&run.join("config.json")).context("reading run config")?;
    let geom = Arc::new(cfg.geometry.clone());
    let mut snaps: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(run.join("snapshots")).context("listing snapshots")? {
        let path = entry?.path();
        let step = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.strip_prefix("step_")).and_then(|s| s.parse::<u64>().ok());
        if let (Some(step), Some("grid")) = (step, path.extension().and_then(|e| e.to_str())) {
            snaps.push((step, path));
        }
    }
    if snaps.is_empty() {
        snaps.push((cfg.steps, run.join("final.grid")));
    }
    snaps.sort();
    let frames = run.join("frames");
    fs::create_dir_all(&frames)?;
    let dt = cfg.motion_model().dt;
    let mut next_time = f64::NEG_INFINITY;
    let mut written = 0;
    for (step, path) in snaps {
        let t = step as f64 * dt;
        if t + 1e-9 < next_time {
            continue;
        }
        next_time = t + 1.0 / fps;
        let grid = snapshot::read_grid(File::open(&path)?, geom.clone()).with_context(|| format!("reading {}", path.display()))?;
        let img = render_grid(&grid, v_max, scale)?;
        img.write_ppm(BufWriter::new(File::create(frames.join(format!("frame_{written:05}.ppm")))?))?;
        written += 1;
    }
    eprintln!("wrote {written} frames to {}", frames.display());
    Ok(())
}

fn cmd_bench(config: Option<PathBuf>, seconds: f64) -> Result<()> {
    if !(seconds > 0.0) {
        bail!("--seconds must be positive");
    }
    let cfg = load_config(config.as_deref())?;
    let t = throughput::measure(&cfg, Duration::from_secs_f64(seconds))?;
    let g = &cfg.geometry;
    println!("grid {}x{} cells, {} particles per cell, {} rays", g.width_cells, g.height_cells, cfg.particles_per_cell, g.num_rays);
    println!("motion update       {:>9.1} it/s", t.motion_update_hz);
    println!("measurement update  {:>9.1} it/s", t.measurement_update_hz);
    println!("placement           {:>9.1} it/s", t.placement_hz);
    println!("filter cycle        {:>9.1} it/s", t.filter_cycle_hz);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, policy, steps, mode, out, frames } => cmd_run(config, seed, policy, steps, mode, out, frames),
        Command::Eval { runs } => cmd_eval(runs),
        Command::Render { run, fps, scale, v_max } => cmd_render(run, fps, scale, v_max),
        Command::Bench { config, seconds } => cmd_bench(config, seconds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
