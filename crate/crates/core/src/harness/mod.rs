//! Config-driven experiment runner: train, record, analyze, write
//! artifacts, and compare runs across one ablation axis.

mod config;
pub mod plot;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    residual_mlp, Axis, BnMode, DataSpec, ExperimentConfig, ModelTemplate, SeedConfig, SkipMode,
    LIBRARY_VERSION,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::regularity::{analyze, RegularityReport, Verdict};
use crate::trajectory::{record_run, TrajectoryLog};

pub const THREADS_ENV: &str = "TRAJLENS_THREADS";
pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Svg,
    #[default]
    Both,
}

impl OutputFormat {
    fn csv(self) -> bool {
        self != OutputFormat::Svg
    }
    fn svg(self) -> bool {
        self != OutputFormat::Csv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub steps: usize,
    pub final_mean_loss: f64,
    pub median_rate_factor: Option<f64>,
    pub gamma_min: Option<f64>,
    pub violation_fraction: f64,
    pub avg_loss_gap: f64,
    pub bound_rhs: Option<f64>,
    pub verdict: Verdict,
}

impl RunSummary {
    fn new(run_id: &str, label: &str, seed: u64, r: &RegularityReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            label: label.to_string(),
            seed,
            steps: r.steps,
            final_mean_loss: r.final_epoch_mean_loss().unwrap_or(f64::NAN),
            median_rate_factor: r.median_rate_factor(),
            gamma_min: r.gamma_min,
            violation_fraction: r.violation_fraction,
            avg_loss_gap: r.avg_loss_gap,
            bound_rhs: r.bound_rhs,
            verdict: r.verdict.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub trajectory: PathBuf,
    pub report: PathBuf,
    pub epochs_csv: Option<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub snapshot: PathBuf,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepArtifacts {
    pub axis: String,
    pub runs: Vec<RunArtifacts>,
    pub comparison_csv: Option<PathBuf>,
    pub plots: Vec<PathBuf>,
}

impl SweepArtifacts {
    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.summary.verdict.is_fail())
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn with_context(run_id: &str, e: Error) -> Error {
    Error::Config(format!("run {run_id}: {e}"))
}

/// Trains one fixed config, analyzes the trajectory and writes every
/// artifact under `<output_dir>/runs/<name>/`. `base` resolves relative data
/// paths.
pub fn run(config: &ExperimentConfig, base: &Path, format: OutputFormat) -> Result<RunArtifacts> {
    run_labeled(config, &config.name, base, format)
}

fn run_labeled(
    config: &ExperimentConfig,
    label: &str,
    base: &Path,
    format: OutputFormat,
) -> Result<RunArtifacts> {
    let run_id = sanitize(&config.name);
    let ctx = |e| with_context(&run_id, e);
    config.validate().map_err(ctx)?;
    let dataset = config
        .data
        .load(config.seeds.data_seed, base)
        .map_err(ctx)?;
    let setup = config.training_setup(&dataset).map_err(ctx)?;
    let dir = config.output_dir.join("runs").join(&run_id);
    std::fs::create_dir_all(&dir)?;

    let mut snapshot_cfg = config.clone();
    snapshot_cfg.library_version = Some(LIBRARY_VERSION.to_string());
    let snapshot = dir.join(SNAPSHOT_FILE);
    std::fs::write(&snapshot, snapshot_cfg.to_toml()?)?;

    log::info!(
        "{run_id}: {} epochs, batch size {}",
        setup.epochs,
        setup.batch_size
    );
    let log = record_run(&setup, &dataset).map_err(ctx)?;
    let trajectory = dir.join("trajectory.trj");
    log.write(&trajectory)?;
    let report = analyze(&log, Some(&dataset), &config.analyzer).map_err(ctx)?;
    if report.verdict.is_fail() {
        log::error!("{run_id}: convergence bound violated: {:?}", report.verdict);
    }
    let artifacts = write_report_artifacts(&dir, &report, label, format)?;
    Ok(RunArtifacts {
        trajectory,
        snapshot,
        summary: RunSummary::new(&run_id, label, config.seeds.init_seed, &report),
        dir,
        ..artifacts
    })
}

fn write_report_artifacts(
    dir: &Path,
    report: &RegularityReport,
    label: &str,
    format: OutputFormat,
) -> Result<RunArtifacts> {
    let report_path = dir.join("report.json");
    report.write_json(&report_path)?;
    let csv_path = dir.join("epochs.csv");
    // the CSV doubles as plot input, so it is always written and removed
    // afterwards when only SVG was requested
    report.write_epoch_csv(&csv_path)?;
    let plots = if format.svg() {
        plot::plot_csvs(
            std::slice::from_ref(&csv_path),
            Some(&[label.to_string()]),
            dir,
            "curves",
            false,
        )?
        .to_vec()
    } else {
        Vec::new()
    };
    if !format.csv() {
        std::fs::remove_file(&csv_path)?;
    }
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        trajectory: PathBuf::new(),
        report: report_path,
        epochs_csv: format.csv().then_some(csv_path),
        plots,
        snapshot: PathBuf::new(),
        summary: RunSummary::new("", label, 0, report),
    })
}

fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub const COMPARISON_HEADER: &str =
    "label,run_id,seed,steps,final_mean_loss,median_rate_factor,gamma_min,violation_fraction,avg_loss_gap,bound_rhs,verdict";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn comparison_csv(rows: &[RunSummary]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e},{},{},{:e},{:e},{},{}\n",
            r.label,
            r.run_id,
            r.seed,
            r.steps,
            r.final_mean_loss,
            opt(r.median_rate_factor),
            opt(r.gamma_min),
            r.violation_fraction,
            r.avg_loss_gap,
            opt(r.bound_rhs),
            r.verdict.label()
        ));
    }
    out
}

/// Runs every value of the single varying axis with shared seeds, in
/// parallel up to `TRAJLENS_THREADS`, then writes `<name>_comparison.csv`
/// and the overlay plots into `output_dir`.
pub fn sweep(
    config: &ExperimentConfig,
    base: &Path,
    format: OutputFormat,
) -> Result<SweepArtifacts> {
    let runs = config.expand()?;
    let axis = config
        .varying_axes()
        .first()
        .copied()
        .unwrap_or("none")
        .to_string();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap().min(runs.len()).max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunArtifacts>> = pool.install(|| {
        use rayon::prelude::*;
        runs.par_iter()
            .map(|(label, cfg)| run_labeled(cfg, label, base, OutputFormat::Both))
            .collect()
    });
    let runs: Vec<RunArtifacts> = results.into_iter().collect::<Result<_>>()?;

    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let stem = sanitize(&config.name);
    let summaries: Vec<RunSummary> = runs.iter().map(|r| r.summary.clone()).collect();
    let comparison = out.join(format!("{stem}_comparison.csv"));
    std::fs::write(&comparison, comparison_csv(&summaries))?;
    let plots = if format.svg() {
        let csvs: Vec<PathBuf> = runs.iter().filter_map(|r| r.epochs_csv.clone()).collect();
        let labels: Vec<String> = summaries.iter().map(|s| s.label.clone()).collect();
        plot::plot_csvs(&csvs, Some(&labels), out, &stem, false)?.to_vec()
    } else {
        Vec::new()
    };
    Ok(SweepArtifacts {
        axis,
        runs,
        comparison_csv: format.csv().then_some(comparison),
        plots,
    })
}

/// Re-analyzes a stored trajectory. Replay-mode logs need the dataset, which
/// is rebuilt from `config` (by default the snapshot next to the log).
pub fn reanalyze(
    log_path: &Path,
    config: Option<&ExperimentConfig>,
    base: &Path,
) -> Result<(TrajectoryLog, RegularityReport)> {
    let log = TrajectoryLog::read(log_path)?;
    let snapshot;
    let config = match config {
        Some(c) => Some(c),
        None => {
            let candidate = log_path.with_file_name(SNAPSHOT_FILE);
            snapshot = candidate
                .exists()
                .then(|| ExperimentConfig::load(&candidate))
                .transpose()?;
            snapshot.as_ref()
        }
    };
    let dataset: Option<Dataset> = match config {
        Some(c) if !log.has_updates() => Some(c.data.load(c.seeds.data_seed, base)?),
        _ => None,
    };
    let analyzer = config.map(|c| c.analyzer).unwrap_or_default();
    let report = analyze(&log, dataset.as_ref(), &analyzer)?;
    Ok((log, report))
}

/// Writes report, CSV and plots for an already analyzed log into `dir`.
pub fn write_analysis(
    dir: &Path,
    report: &RegularityReport,
    label: &str,
    format: OutputFormat,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let a = write_report_artifacts(dir, report, label, format)?;
    let mut files = vec![a.report];
    files.extend(a.epochs_csv);
    files.extend(a.plots);
    Ok(files)
}
