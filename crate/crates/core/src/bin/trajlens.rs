use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use trajlens::harness::{self, plot, ExperimentConfig, OutputFormat};
use trajlens::regularity::{RegularityReport, Verdict};

#[derive(Parser)]
#[command(
    name = "trajlens",
    version,
    about = "Record training trajectories and measure their regularity"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Svg,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Svg => OutputFormat::Svg,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets the init, data and sampler seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run(RunArgs),
    /// Run every value of the one varying axis and compare them.
    Sweep(RunArgs),
    /// Re-analyze a stored trajectory.
    Analyze {
        #[arg(long)]
        replay: PathBuf,
        /// Config used to rebuild the dataset for logs without stored
        /// updates (default: the snapshot next to the log).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Overlay per-epoch CSVs into loss and rate-factor plots.
    Plot {
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log_y: bool,
        /// Legend entries, one per CSV.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<String>>,
    },
    /// Check the convergence bound of a stored trajectory.
    Verify {
        #[arg(long)]
        replay: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok((cfg, base_dir(&args.config)))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn print_report(name: &str, r: &RegularityReport) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6e}"));
    println!(
        "{name}: T={} gamma_min={} median_rate_factor={} violations={:.3} avg_loss_gap={:.6e} bound={} -> {}",
        r.steps,
        opt(r.gamma_min),
        opt(r.median_rate_factor()),
        r.violation_fraction,
        r.avg_loss_gap,
        opt(r.bound_rhs),
        r.verdict.label()
    );
    if let Verdict::NotApplicable { reason } = &r.verdict {
        println!("  {reason}");
    }
}

fn exit_for(failed: bool) -> ExitCode {
    if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let (cfg, base) = load_config(&args)?;
            if !cfg.varying_axes().is_empty() {
                bail!(
                    "config varies {}; use `trajlens sweep`",
                    cfg.varying_axes().join(", ")
                );
            }
            let a = harness::run(&cfg, &base, args.format.into())?;
            let report: RegularityReport = serde_json::from_slice(&std::fs::read(&a.report)?)?;
            print_report(&a.summary.run_id, &report);
            println!("artifacts in {}", a.dir.display());
            Ok(exit_for(a.summary.verdict.is_fail()))
        }
        Command::Sweep(args) => {
            let (cfg, base) = load_config(&args)?;
            let s = harness::sweep(&cfg, &base, args.format.into())?;
            for r in &s.runs {
                let report: RegularityReport = serde_json::from_slice(&std::fs::read(&r.report)?)?;
                print_report(&r.summary.run_id, &report);
            }
            if let Some(c) = &s.comparison_csv {
                println!("comparison: {}", c.display());
            }
            Ok(exit_for(s.any_failed()))
        }
        Command::Analyze {
            replay,
            config,
            out,
            format,
        } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let base = config.as_deref().map(base_dir).unwrap_or_default();
            let (_, report) = harness::reanalyze(&replay, cfg.as_ref(), &base)
                .with_context(|| format!("analyzing {}", replay.display()))?;
            let dir =
                out.unwrap_or_else(|| replay.parent().map(Path::to_path_buf).unwrap_or_default());
            let label = replay
                .parent()
                .and_then(|p| p.file_name())
                .map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
            print_report(&label, &report);
            for f in harness::write_analysis(&dir, &report, &label, format.into())? {
                println!("wrote {}", f.display());
            }
            Ok(exit_for(report.verdict.is_fail()))
        }
        Command::Plot {
            csv,
            out,
            log_y,
            labels,
        } => {
            if let Some(l) = &labels {
                if l.len() != csv.len() {
                    bail!("{} labels for {} CSV files", l.len(), csv.len());
                }
            }
            for p in plot::plot_csvs(&csv, labels.as_deref(), &out, "comparison", log_y)? {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { replay, config } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let base = config.as_deref().map(base_dir).unwrap_or_default();
            let (_, report) = harness::reanalyze(&replay, cfg.as_ref(), &base)?;
            print_report(&replay.display().to_string(), &report);
            Ok(exit_for(report.verdict.is_fail()))
        }
    }
}
