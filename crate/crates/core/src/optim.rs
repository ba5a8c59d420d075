//! Update generators for `θ_{k+1} = θ_k − η·U_k`.
//!
//! `U` is always the update actually applied, so for momentum and Adam it is
//! the velocity / normalized moment rather than the raw gradient. The
//! learning rate is kept out of `U` and applied by [`step`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.5;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-2;

fn default_mu() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_eps() -> f64 {
    DEFAULT_ADAM_EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    /// Heavy ball: `v ← μv + g`, `U = v`.
    SgdMomentum {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    /// Bias-corrected Adam with `ε` outside the square root.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::SgdMomentum { mu: DEFAULT_MOMENTUM }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_ADAM_EPS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SgdMomentum { .. } => "sgd_momentum",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub eta: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, eta: f64) -> Result<Self> {
        let cfg = Self { kind, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be a positive real, got {}",
                self.eta
            )));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        match self.kind {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::SgdMomentum { mu } => unit("mu", mu),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("eps must be > 0, got {eps}")))
                }
            }
        }
    }

    pub fn init_state(&self, d: usize) -> OptimizerState {
        match self.kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::SgdMomentum { .. } => OptimizerState::Momentum {
                velocity: vec![0.0; d],
            },
            OptimizerKind::Adam { .. } => OptimizerState::Adam {
                m: vec![0.0; d],
                v: vec![0.0; d],
                t: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Momentum { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    fn len(&self) -> Option<usize> {
        match self {
            OptimizerState::Sgd => None,
            OptimizerState::Momentum { velocity } => Some(velocity.len()),
            OptimizerState::Adam { m, .. } => Some(m.len()),
        }
    }
}

/// Produces the update `U` for `gradient` and advances `state` in place.
pub fn compute_update(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    gradient: &[f64],
) -> Result<Vec<f64>> {
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
        });
    }
    if let Some(d) = state.len() {
        if d != gradient.len() {
            return Err(Error::Dimension(format!(
                "optimizer state holds {d} coordinates, gradient has {}",
                gradient.len()
            )));
        }
    }
    match (config.kind, state) {
        (OptimizerKind::Sgd, OptimizerState::Sgd) => Ok(gradient.to_vec()),
        (OptimizerKind::SgdMomentum { mu }, OptimizerState::Momentum { velocity }) => {
            for (v, &g) in velocity.iter_mut().zip(gradient) {
                *v = mu * *v + g;
            }
            Ok(velocity.clone())
        }
        (OptimizerKind::Adam { beta1, beta2, eps }, OptimizerState::Adam { m, v, t }) => {
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            let mut update = Vec::with_capacity(gradient.len());
            for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(gradient) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                update.push(m_hat / (v_hat.sqrt() + eps));
            }
            Ok(update)
        }
        (kind, _) => Err(Error::Config(format!(
            "optimizer state does not match optimizer kind {}",
            kind.name()
        ))),
    }
}

/// `θ_{k+1} = θ_k − η·U`.
pub fn step(theta: &[f64], update: &[f64], eta: f64) -> Result<Vec<f64>> {
    if theta.len() != update.len() {
        return Err(Error::Dimension(format!(
            "step: θ has {} coordinates, U has {}",
            theta.len(),
            update.len()
        )));
    }
    Ok(theta
        .iter()
        .zip(update)
        .map(|(&t, &u)| t - eta * u)
        .collect())
}

/// In-place variant of [`step`]; produces bit-identical results.
pub fn step_in_place(theta: &mut [f64], update: &[f64], eta: f64) -> Result<()> {
    if theta.len() != update.len() {
        return Err(Error::Dimension(format!(
            "step: θ has {} coordinates, U has {}",
            theta.len(),
            update.len()
        )));
    }
    for (t, &u) in theta.iter_mut().zip(update) {
        *t -= eta * u;
    }
    Ok(())
}
