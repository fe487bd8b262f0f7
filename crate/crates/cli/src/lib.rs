//! Experiment runner for the `asyncbezier` library.

pub mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use asyncbezier::aggregate::{StrategyConfig, StrategyKind};
use asyncbezier::curve::{compare_profiles, BezierParams};
use asyncbezier::metrics::{mean_std, write_summary_csv, RunRecord, SummaryRow};
use asyncbezier::model::{Dataset, DatasetId, ModelSpec};
use asyncbezier::sim::{run_with, Federation, SimConfig};
use rayon::prelude::*;
use thiserror::Error;

pub use config::ExperimentConfig;

/// Environment variable overriding the configured output directory.
pub const OUT_ENV: &str = "ASYNCBEZIER_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] asyncbezier::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(asyncbezier::Error::Config(_) | asyncbezier::Error::InvalidArgument(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Opens a file that must not exist yet.
fn create_new(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = OpenOptions::new().write(true).create_new(true).open(path).map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Replaces the configured seeds.
    pub seeds: Option<Vec<u64>>,
    /// Write one JSONL event log per run.
    pub events: bool,
    /// Concurrent cells; all cores when absent.
    pub workers: Option<usize>,
}

/// Outcome of a batch of runs, in (strategy, seed) order.
#[derive(Debug)]
pub struct Report {
    pub records: Vec<RunRecord>,
    pub summary_path: PathBuf,
}

impl Report {
    pub fn diverged(&self) -> Vec<String> {
        self.records.iter().filter(|r| r.failed()).map(|r| format!("{} seed {}", r.strategy, r.seed)).collect()
    }

    /// 0 when every run finished, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.diverged().is_empty() {
            0
        } else {
            3
        }
    }
}

struct Cell {
    cfg: SimConfig,
    stem: String,
    seed_index: usize,
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    if workers == Some(0) {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn run_cells(cells: &[Cell], seeds: &[u64], out: &Path, opts: &RunOptions) -> Result<Vec<RunRecord>, CliError> {
    let pool = pool(opts.workers)?;
    let base = &cells[0].cfg;
    let feds: Vec<Federation> = pool.install(|| {
        seeds.par_iter().map(|&s| Federation::synthetic(&base.data, base.n_clients, s)).collect::<Result<_, _>>()
    })?;
    let records: Vec<RunRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| -> Result<RunRecord, CliError> {
                log::info!("running {}", c.stem);
                let fed = &feds[c.seed_index];
                let rec = if opts.events {
                    let path = out.join("events").join(format!("{}.jsonl", c.stem));
                    let mut w = create_new(&path)?;
                    let rec = run_with(&c.cfg, fed, Some(&mut w))?;
                    w.flush().map_err(io_err(&path))?;
                    rec
                } else {
                    run_with(&c.cfg, fed, None)?
                };
                if let Some(f) = &rec.failure {
                    log::warn!("{} diverged: {f}", c.stem);
                }
                Ok(rec)
            })
            .collect::<Result<_, _>>()
    })?;
    for (c, rec) in cells.iter().zip(&records) {
        let json = out.join("runs").join(format!("{}.json", c.stem));
        let mut w = create_new(&json)?;
        w.write_all(rec.to_json()?.as_bytes()).map_err(io_err(&json))?;
        w.flush().map_err(io_err(&json))?;
        let csv = out.join("rounds").join(format!("{}.csv", c.stem));
        let mut w = create_new(&csv)?;
        rec.write_rounds_csv(&mut w)?;
        w.flush().map_err(io_err(&csv))?;
    }
    Ok(records)
}

/// The error threshold for `T_e`: the configured one, else two points above
/// the mean final error of the first FedAsync strategy.
pub fn error_threshold(cfg: &ExperimentConfig, records: &[RunRecord]) -> Option<f64> {
    if cfg.error_threshold.is_some() {
        return cfg.error_threshold;
    }
    let fa = cfg.strategies.iter().find(|s| s.kind == StrategyKind::FedAsync)?;
    let accs: Vec<f64> = records.iter().filter(|r| r.strategy == fa.name).map(|r| r.final_score.acc).collect();
    let (m, _) = mean_std(&accs);
    let e = ((1.0 - m + 0.02) * 1e6).round() / 1e6;
    (e > 0.0 && e < 1.0).then_some(e)
}

fn summarise(
    cfg: &ExperimentConfig,
    strategies: &[StrategyConfig],
    records: &[RunRecord],
    path: &Path,
) -> Result<(), CliError> {
    let e = error_threshold(cfg, records);
    let rows: Vec<SummaryRow> = strategies
        .iter()
        .map(|s| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.strategy == s.name).collect();
            SummaryRow::from_runs(s.name.clone(), &runs, e)
        })
        .collect();
    let mut w = create_new(path)?;
    write_summary_csv(&rows, e, &mut w)?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs every (strategy, seed) cell and writes `runs/`, `rounds/`, optional
/// `events/` and `summary.csv` under `opts.out`.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let seeds = opts.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds to run".into()));
    }
    let summary_path = opts.out.join("summary.csv");
    if summary_path.exists() {
        return Err(CliError::Io {
            path: summary_path,
            source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory already holds results"),
        });
    }
    let mut cells = Vec::new();
    for s in &cfg.strategies {
        for (i, &seed) in seeds.iter().enumerate() {
            cells.push(Cell { cfg: cfg.cell(s, seed), stem: format!("{}_seed{seed}", s.name), seed_index: i });
        }
    }
    let records = run_cells(&cells, &seeds, &opts.out, opts)?;
    summarise(cfg, &cfg.strategies, &records, &summary_path)?;
    Ok(Report { records, summary_path })
}

/// Local budget used for `k` SGD epochs in the epoch study.
pub fn epoch_budget(strategy: &StrategyConfig, k: usize) -> (usize, usize) {
    if strategy.trains_curves() {
        (k, k.min(2))
    } else {
        (k, 0)
    }
}

/// Reruns every strategy at each local epoch count and writes a
/// `k × strategy` accuracy grid to `epoch_grid.csv`, plus per-`k` run
/// directories `k{K}/`.
pub fn cmd_epoch_study(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report, CliError> {
    let seeds = opts.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds to run".into()));
    }
    let grid_path = opts.out.join("epoch_grid.csv");
    if grid_path.exists() {
        return Err(CliError::Io {
            path: grid_path,
            source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "output directory already holds results"),
        });
    }
    let mut all = Vec::new();
    let mut grid: Vec<Vec<(f64, f64)>> = Vec::new();
    for &k in &cfg.epochs {
        let dir = opts.out.join(format!("k{k}"));
        let mut cells = Vec::new();
        for s in &cfg.strategies {
            for (i, &seed) in seeds.iter().enumerate() {
                let mut c = cfg.cell(s, seed);
                (c.curve.k_sgd, c.curve.k_curve) = epoch_budget(s, k);
                cells.push(Cell { cfg: c, stem: format!("{}_seed{seed}", s.name), seed_index: i });
            }
        }
        let records = run_cells(&cells, &seeds, &dir, opts)?;
        summarise(cfg, &cfg.strategies, &records, &dir.join("summary.csv"))?;
        grid.push(
            cfg.strategies
                .iter()
                .map(|s| {
                    let accs: Vec<f64> =
                        records.iter().filter(|r| r.strategy == s.name).map(|r| r.final_score.acc).collect();
                    mean_std(&accs)
                })
                .collect(),
        );
        all.extend(records);
    }
    let mut w = create_new(&grid_path)?;
    let mut header = vec!["k".to_string()];
    for s in &cfg.strategies {
        header.push(format!("{}_mean", s.name));
        header.push(format!("{}_std", s.name));
    }
    let mut text = header.join(",") + "\n";
    for (k, row) in cfg.epochs.iter().zip(&grid) {
        let mut line = vec![k.to_string()];
        for (m, s) in row {
            line.push(fmt6(*m));
            line.push(fmt6(*s));
        }
        text += &(line.join(",") + "\n");
    }
    w.write_all(text.as_bytes()).map_err(io_err(&grid_path))?;
    w.flush().map_err(io_err(&grid_path))?;
    Ok(Report { records: all, summary_path: grid_path })
}

fn fmt6(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// Loss along a stored curve and along the chord between its endpoints.
pub fn cmd_profile<W: Write>(
    curve: &Path,
    data: &Path,
    model: &ModelSpec,
    n_points: usize,
    out: W,
) -> Result<(), CliError> {
    let phi = BezierParams::read_csv(File::open(curve).map_err(io_err(curve))?)?;
    let data = Dataset::from_csv(File::open(data).map_err(io_err(data))?, Some(model.n_classes), DatasetId::Global)?;
    model.validate()?;
    if model.n_features != data.n_features() {
        return Err(CliError::Config(format!(
            "model expects {} features, data has {}",
            model.n_features,
            data.n_features()
        )));
    }
    if model.dim() != phi.dim() {
        return Err(CliError::Config(format!("model has {} parameters, curve has {}", model.dim(), phi.dim())));
    }
    write_profile(&compare_profiles(model, &phi, &data, n_points)?, out)
}

pub fn write_profile<W: Write>(rows: &[(f64, f64, f64)], mut out: W) -> Result<(), CliError> {
    let pe = |e: std::io::Error| CliError::Core(e.into());
    writeln!(out, "t,bezier_loss,linear_loss").map_err(pe)?;
    for (t, b, l) in rows {
        writeln!(out, "{t:.6},{b:.8},{l:.8}").map_err(pe)?;
    }
    out.flush().map_err(pe)
}
