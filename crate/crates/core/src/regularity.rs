//! Regularity analysis of a recorded trajectory.
//!
//! For each step the largest `γ` satisfying
//!
//! ```text
//! ⟨θ_k − θ_T, U_k⟩ ≥ (η/2)‖U_k‖² + γ·(ℓ_k − ℓ_inf)
//! ```
//!
//! is `γ_k = (⟨θ_k − θ_T, U_k⟩ − (η/2)‖U_k‖²) / (ℓ_k − ℓ_inf)`. The trajectory
//! satisfies the principle with `γ = min_k γ_k` when that minimum is
//! positive, and then the average loss gap over `T = n·B` steps is bounded by
//! `‖θ_0 − θ_T‖² / (2ηγT)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::sq_dist;
use crate::trajectory::TrajectoryLog;

/// Relative slack allowed when comparing the average loss gap to the bound.
pub const BOUND_REL_TOL: f64 = 1e-6;

fn default_gap_tolerance() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    #[serde(default)]
    pub loss_infimum: f64,
    #[serde(default = "default_gap_tolerance")]
    pub gap_tolerance: f64,
    /// Treat the iterate after this many steps as θ_T and analyze only the
    /// steps before it. `None` uses the whole log.
    #[serde(default)]
    pub window_end: Option<usize>,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            loss_infimum: 0.0,
            gap_tolerance: default_gap_tolerance(),
            window_end: None,
        }
    }
}

impl AnalyzerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gap_tolerance.is_nan() || self.gap_tolerance <= 0.0 {
            return Err(Error::Config(format!(
                "gap_tolerance must be > 0, got {}",
                self.gap_tolerance
            )));
        }
        if !self.loss_infimum.is_finite() {
            return Err(Error::Config("loss_infimum must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepGamma {
    pub coherence: f64,
    pub update_sq_norm: f64,
    pub gap: f64,
    /// `None` when the gap is within tolerance and the step is skipped.
    pub gamma: Option<f64>,
}

/// Largest `γ` for which the regularity inequality holds at one step.
pub fn gamma_step(
    theta_k: &[f64],
    theta_t: &[f64],
    update: &[f64],
    loss: f64,
    eta: f64,
    cfg: &AnalyzerConfig,
) -> Result<StepGamma> {
    if theta_k.len() != theta_t.len() || theta_k.len() != update.len() {
        return Err(Error::Dimension(format!(
            "gamma_step: lengths {}, {}, {} differ",
            theta_k.len(),
            theta_t.len(),
            update.len()
        )));
    }
    let mut coherence = 0.0;
    let mut update_sq_norm = 0.0;
    for ((t, tt), u) in theta_k.iter().zip(theta_t).zip(update) {
        coherence += (t - tt) * u;
        update_sq_norm += u * u;
    }
    gamma_from_scalars(coherence, update_sq_norm, loss, eta, cfg)
}

/// Same as [`gamma_step`] once the two inner products are known.
pub fn gamma_from_scalars(
    coherence: f64,
    update_sq_norm: f64,
    loss: f64,
    eta: f64,
    cfg: &AnalyzerConfig,
) -> Result<StepGamma> {
    let gap = loss - cfg.loss_infimum;
    if !(coherence.is_finite() && update_sq_norm.is_finite() && gap.is_finite()) {
        return Err(Error::NonFinite {
            context: "regularity step".into(),
        });
    }
    let gamma = (gap > cfg.gap_tolerance).then(|| (coherence - 0.5 * eta * update_sq_norm) / gap);
    Ok(StepGamma {
        coherence,
        update_sq_norm,
        gap,
        gamma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// The bound holds; `slack = bound_rhs / avg_loss_gap` (∞ when the gap is 0).
    Pass {
        avg_loss_gap: f64,
        bound_rhs: f64,
        slack: f64,
    },
    /// The bound is violated, which can only come from an implementation
    /// error or from skipped steps carrying negative coherence.
    Fail { avg_loss_gap: f64, bound_rhs: f64 },
    /// Some valid step has `γ_k ≤ 0`; the bound is vacuous.
    PrincipleUnsatisfied { gamma_min: f64 },
    /// Every step was within the gap tolerance.
    NoValidSteps,
    /// The analyzed window does not cover whole epochs.
    NotApplicable { reason: String },
}

impl Verdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Pass { .. } => "PASS",
            Verdict::Fail { .. } => "FAIL",
            Verdict::PrincipleUnsatisfied { .. } => "principle unsatisfied (bound vacuous)",
            Verdict::NoValidSteps => "no valid steps",
            Verdict::NotApplicable { .. } => "not applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub median_gamma: f64,
    pub median_rate_factor: f64,
    pub violations: usize,
    pub valid_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub eta: f64,
    pub steps: usize,
    pub n_batches: usize,
    pub epochs: usize,
    pub loss_infimum: f64,
    pub gap_tolerance: f64,
    pub losses: Vec<f64>,
    pub coherence: Vec<f64>,
    pub update_sq_norms: Vec<f64>,
    /// `None` marks a skipped step (gap within tolerance).
    pub gamma_series: Vec<Option<f64>>,
    pub valid_steps: usize,
    pub skipped_steps: usize,
    pub gamma_min: Option<f64>,
    pub violation_fraction: f64,
    /// `‖θ_0 − θ_T‖²`.
    pub traj_sq_dist: f64,
    pub rate_factor_series: Vec<Option<f64>>,
    pub avg_loss_gap: f64,
    /// `‖θ_0 − θ_T‖² / (2η·γ_min·T)`, present only when `γ_min > 0`.
    pub bound_rhs: Option<f64>,
    pub bound_holds: bool,
    pub verdict: Verdict,
    pub per_epoch: Vec<EpochSummary>,
}

impl RegularityReport {
    pub fn principle_satisfied(&self) -> bool {
        self.gamma_min.is_some_and(|g| g > 0.0)
    }

    /// Median of the valid per-step rate factors.
    pub fn median_rate_factor(&self) -> Option<f64> {
        median(self.rate_factor_series.iter().flatten().copied().collect())
    }

    pub fn median_gamma(&self) -> Option<f64> {
        median(self.gamma_series.iter().flatten().copied().collect())
    }

    pub fn final_epoch_mean_loss(&self) -> Option<f64> {
        self.per_epoch.last().map(|e| e.mean_loss)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(epoch_csv(&self.per_epoch).as_bytes())?;
        Ok(())
    }
}

/// Runs the coherence pass (stored updates or replay) and assembles the
/// report.
pub fn analyze(
    log: &TrajectoryLog,
    dataset: Option<&Dataset>,
    cfg: &AnalyzerConfig,
) -> Result<RegularityReport> {
    cfg.validate()?;
    let eta = log.meta.eta;
    let end = cfg.window_end.unwrap_or(log.len());
    if end == 0 || end > log.len() {
        return Err(Error::Config(format!(
            "analysis window end {end} outside 1..={}",
            log.len()
        )));
    }
    let theta_end = if end == log.len() {
        log.theta_t.clone()
    } else {
        let mut captured = None;
        log.visit(dataset, |k, theta, u, _| {
            if k + 1 == end {
                captured = Some(
                    theta
                        .iter()
                        .zip(u)
                        .map(|(t, ui)| t - eta * ui)
                        .collect::<Vec<f64>>(),
                );
            }
            Ok(())
        })?;
        captured.expect("window end within log")
    };

    let mut steps = Vec::with_capacity(end);
    log.visit(dataset, |k, theta, u, loss| {
        if k < end {
            let s =
                gamma_step(theta, &theta_end, u, loss, eta, cfg).map_err(|e| Error::Analysis {
                    step: k,
                    message: e.to_string(),
                })?;
            steps.push((loss, s));
        }
        Ok(())
    })?;

    let traj_sq_dist = sq_dist(&log.theta0, &theta_end)?;
    Ok(assemble(eta, log.meta.n_batches, traj_sq_dist, &steps, cfg))
}

/// Analyzes a trajectory given directly as `θ_0`, the applied updates and
/// the per-step losses, with `θ_T` obtained by applying every update.
pub fn analyze_sequence(
    theta0: &[f64],
    updates: &[Vec<f64>],
    losses: &[f64],
    eta: f64,
    n_batches: usize,
    cfg: &AnalyzerConfig,
) -> Result<RegularityReport> {
    cfg.validate()?;
    if updates.len() != losses.len() || updates.is_empty() {
        return Err(Error::Dimension(format!(
            "{} updates but {} losses",
            updates.len(),
            losses.len()
        )));
    }
    let mut theta_t = theta0.to_vec();
    for u in updates {
        crate::optim::step_in_place(&mut theta_t, u, eta)?;
    }
    let mut theta = theta0.to_vec();
    let mut steps = Vec::with_capacity(updates.len());
    for (k, (u, &loss)) in updates.iter().zip(losses).enumerate() {
        let s = gamma_step(&theta, &theta_t, u, loss, eta, cfg).map_err(|e| Error::Analysis {
            step: k,
            message: e.to_string(),
        })?;
        steps.push((loss, s));
        crate::optim::step_in_place(&mut theta, u, eta)?;
    }
    Ok(assemble(
        eta,
        n_batches,
        sq_dist(theta0, &theta_t)?,
        &steps,
        cfg,
    ))
}

/// Builds a report from per-step results. Exposed so synthetic step tuples
/// can be analyzed without a training run.
pub fn assemble(
    eta: f64,
    n_batches: usize,
    traj_sq_dist: f64,
    steps: &[(f64, StepGamma)],
    cfg: &AnalyzerConfig,
) -> RegularityReport {
    let t = steps.len();
    let losses: Vec<f64> = steps.iter().map(|(l, _)| *l).collect();
    let gamma_series: Vec<Option<f64>> = steps.iter().map(|(_, s)| s.gamma).collect();
    let valid: Vec<f64> = gamma_series.iter().flatten().copied().collect();
    let gamma_min = valid.iter().copied().reduce(f64::min);
    let violations = valid.iter().filter(|&&g| g <= 0.0).count();
    let violation_fraction = if valid.is_empty() {
        0.0
    } else {
        violations as f64 / valid.len() as f64
    };
    let rate_factor_series = gamma_series
        .iter()
        .map(|g| g.map(|g| g / traj_sq_dist))
        .collect();
    let avg_loss_gap = steps.iter().map(|(_, s)| s.gap).sum::<f64>() / t as f64;
    let bound_rhs = gamma_min
        .filter(|&g| g > 0.0)
        .map(|g| bound_rhs(traj_sq_dist, eta, g, t));
    let epochs = t.div_ceil(n_batches.max(1));

    let mut report = RegularityReport {
        eta,
        steps: t,
        n_batches,
        epochs,
        loss_infimum: cfg.loss_infimum,
        gap_tolerance: cfg.gap_tolerance,
        losses,
        coherence: steps.iter().map(|(_, s)| s.coherence).collect(),
        update_sq_norms: steps.iter().map(|(_, s)| s.update_sq_norm).collect(),
        gamma_series,
        valid_steps: valid.len(),
        skipped_steps: t - valid.len(),
        gamma_min,
        violation_fraction,
        traj_sq_dist,
        rate_factor_series,
        avg_loss_gap,
        bound_rhs,
        bound_holds: false,
        verdict: Verdict::NoValidSteps,
        per_epoch: Vec::new(),
    };
    report.per_epoch = epoch_rollup(&report);
    report.verdict = verify_bound(&report);
    report.bound_holds = matches!(report.verdict, Verdict::Pass { .. });
    report
}

/// `‖θ_0 − θ_T‖² / (2ηγT)`.
pub fn bound_rhs(traj_sq_dist: f64, eta: f64, gamma: f64, steps: usize) -> f64 {
    traj_sq_dist / (2.0 * eta * gamma * steps as f64)
}

/// Checks `(1/T)Σ(ℓ_k − ℓ_inf) ≤ ‖θ_0 − θ_T‖²/(2η·γ_min·T)` up to
/// [`BOUND_REL_TOL`]. Requires the analyzed steps to cover whole epochs.
pub fn verify_bound(report: &RegularityReport) -> Verdict {
    if report.n_batches == 0 || !report.steps.is_multiple_of(report.n_batches) {
        return Verdict::NotApplicable {
            reason: format!(
                "T = {} is not a whole number of epochs of {} batches",
                report.steps, report.n_batches
            ),
        };
    }
    let Some(gamma_min) = report.gamma_min else {
        return Verdict::NoValidSteps;
    };
    if gamma_min <= 0.0 {
        return Verdict::PrincipleUnsatisfied { gamma_min };
    }
    let rhs = bound_rhs(report.traj_sq_dist, report.eta, gamma_min, report.steps);
    let lhs = report.avg_loss_gap;
    if lhs <= rhs * (1.0 + BOUND_REL_TOL) {
        Verdict::Pass {
            avg_loss_gap: lhs,
            bound_rhs: rhs,
            slack: if lhs > 0.0 { rhs / lhs } else { f64::INFINITY },
        }
    } else {
        Verdict::Fail {
            avg_loss_gap: lhs,
            bound_rhs: rhs,
        }
    }
}

/// Per-epoch mean loss, median γ_k, median rate factor and violation count.
/// Epoch `e` holds steps `e·n .. (e+1)·n`.
pub fn epoch_rollup(report: &RegularityReport) -> Vec<EpochSummary> {
    let n = report.n_batches.max(1);
    (0..report.steps.div_ceil(n))
        .map(|e| {
            let range = e * n..((e + 1) * n).min(report.steps);
            let losses = &report.losses[range.clone()];
            let gammas: Vec<f64> = report.gamma_series[range.clone()]
                .iter()
                .flatten()
                .copied()
                .collect();
            let rates: Vec<f64> = report.rate_factor_series[range]
                .iter()
                .flatten()
                .copied()
                .collect();
            EpochSummary {
                epoch: e,
                mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                median_gamma: median(gammas.clone()).unwrap_or(f64::NAN),
                median_rate_factor: median(rates).unwrap_or(f64::NAN),
                violations: gammas.iter().filter(|&&g| g <= 0.0).count(),
                valid_steps: gammas.len(),
            }
        })
        .collect()
}

pub const EPOCH_CSV_HEADER: &str = "epoch,mean_loss,median_gamma,median_rate_factor,violations";

pub fn epoch_csv(rows: &[EpochSummary]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{}\n",
            r.epoch, r.mean_loss, r.median_gamma, r.median_rate_factor, r.violations
        ));
    }
    out
}

pub(crate) fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}
