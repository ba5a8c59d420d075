//! Recording of optimization trajectories and deterministic replay.
//!
//! A run is fully determined by its [`TrainingSetup`] and the dataset. In
//! [`StorageMode::Full`] every update `U_k` is stored; in
//! [`StorageMode::Replay`] only scalars are kept and the updates are
//! regenerated on demand by re-running training, which must reproduce the
//! stored losses bit for bit.

mod format;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BatchPlan, Dataset, ReshuffleSampler};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::optim::{compute_update, step_in_place, OptimizerConfig};
use crate::tensor::{sq_norm, Dtype};

pub use format::{decode, encode, FORMAT_VERSION, MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMode {
    #[default]
    Full,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub sampler: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            sampler: seed,
        }
    }
}

/// Everything besides the dataset that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetup {
    pub network: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Seeds,
    #[serde(default)]
    pub storage: StorageMode,
    #[serde(default)]
    pub dtype: Dtype,
    /// Store θ_k every `checkpoint_stride` steps (0 disables).
    #[serde(default)]
    pub checkpoint_stride: usize,
    /// Stop after this many iterations instead of `n·epochs`.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainingSetup {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub xi: usize,
    /// ℓ(θ_k; z_ξk), train mode, before the update.
    pub loss: f64,
    pub update: Option<Vec<f64>>,
    pub update_sq_norm: f64,
    /// ⟨θ_k − θ_T, U_k⟩, filled by [`TrajectoryLog::fill_coherence`].
    pub coherence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogMeta {
    pub d: usize,
    pub steps: usize,
    pub n_batches: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub seeds: Seeds,
    pub spec_digest: [u8; 32],
    pub data_digest: [u8; 32],
    pub storage: StorageMode,
    pub dtype: Dtype,
    pub checkpoint_stride: usize,
}

impl LogMeta {
    /// Whether the run covers whole epochs, `T = n·B`.
    pub fn whole_epochs(&self) -> bool {
        self.steps == self.n_batches * self.epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub meta: LogMeta,
    pub setup: TrainingSetup,
    pub theta0: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<(usize, Vec<f64>)>,
}

/// What the training loop exposes at every iteration.
pub struct StepEvent<'a> {
    pub k: usize,
    pub xi: usize,
    pub loss: f64,
    pub theta: &'a [f64],
    pub update: &'a [f64],
    pub theta_next: &'a [f64],
}

/// Runs training and hands every step to `on_step`. Returns `(θ_0, θ_T,
/// n_batches)`.
fn drive(
    setup: &TrainingSetup,
    dataset: &Dataset,
    mut on_step: impl FnMut(StepEvent<'_>) -> Result<()>,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    setup.validate()?;
    let mut network = Network::new(setup.network.clone())?;
    let params0 = network.init_params(setup.seeds.init)?;
    let plan = BatchPlan::new(dataset, setup.batch_size, setup.seeds.data)?;
    let mut sampler = ReshuffleSampler::for_plan(&plan, setup.seeds.sampler)?;
    let opt = setup.optimizer;
    let mut state = opt.init_state(params0.len());
    let total = setup.max_steps.unwrap_or(plan.len() * setup.epochs);

    let theta0 = params0.values().to_vec();
    let mut params = params0;
    let mut prev = theta0.clone();
    for k in 0..total {
        let xi = sampler.next_index();
        let batch = plan.batch(xi);
        let (loss, grad, pass) =
            network
                .loss_and_gradient(&params, batch)
                .map_err(|e| match e {
                    Error::Divergence { batch, loss, .. } => Error::Divergence {
                        iteration: Some(k),
                        batch,
                        loss,
                    },
                    other => other,
                })?;
        network.commit_batch_stats(&pass);
        let update = compute_update(&opt, &mut state, grad.values()).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteGradient { iteration: k },
            other => other,
        })?;
        prev.copy_from_slice(params.values());
        step_in_place(params.values_mut(), &update, opt.eta)?;
        on_step(StepEvent {
            k,
            xi,
            loss,
            theta: &prev,
            update: &update,
            theta_next: params.values(),
        })?;
    }
    Ok((theta0, params.into_values(), plan.len()))
}

/// Pass 1: trains and records per-step scalars (and updates in full mode).
pub fn record_run(setup: &TrainingSetup, dataset: &Dataset) -> Result<TrajectoryLog> {
    let mut steps = Vec::new();
    let mut checkpoints = Vec::new();
    let store_updates = setup.storage == StorageMode::Full;
    let stride = setup.checkpoint_stride;
    let (theta0, theta_t, n_batches) = drive(setup, dataset, |ev| {
        if stride > 0 && ev.k % stride == 0 {
            checkpoints.push((ev.k, ev.theta.to_vec()));
        }
        steps.push(StepRecord {
            k: ev.k,
            xi: ev.xi,
            loss: ev.loss,
            update: store_updates.then(|| ev.update.to_vec()),
            update_sq_norm: sq_norm(ev.update),
            coherence: None,
        });
        Ok(())
    })?;
    let meta = LogMeta {
        d: theta0.len(),
        steps: steps.len(),
        n_batches,
        epochs: setup.epochs,
        batch_size: setup.batch_size,
        eta: setup.optimizer.eta,
        seeds: setup.seeds,
        spec_digest: setup.network.digest(),
        data_digest: dataset.digest(),
        storage: setup.storage,
        dtype: setup.dtype,
        checkpoint_stride: stride,
    };
    if !meta.whole_epochs() {
        log::warn!(
            "trajectory has T = {} steps but n·B = {}; the convergence bound does not apply",
            meta.steps,
            meta.n_batches * meta.epochs
        );
    }
    let mut log = TrajectoryLog {
        meta,
        setup: setup.clone(),
        theta0,
        theta_t,
        steps,
        checkpoints,
    };
    if log.meta.dtype == Dtype::F32 {
        log.round_to_storage();
    }
    Ok(log)
}

fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn has_updates(&self) -> bool {
        self.steps.iter().all(|s| s.update.is_some())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.meta.whole_epochs() {
            w.push(format!(
                "T = {} differs from n·B = {}·{}",
                self.meta.steps, self.meta.n_batches, self.meta.epochs
            ));
        }
        w
    }

    /// Applies the f32 storage precision to every stored vector so that the
    /// in-memory log equals what a decode would return.
    fn round_to_storage(&mut self) {
        round_f32(&mut self.theta0);
        round_f32(&mut self.theta_t);
        for s in &mut self.steps {
            if let Some(u) = s.update.as_mut() {
                round_f32(u);
            }
        }
        for (_, c) in &mut self.checkpoints {
            round_f32(c);
        }
    }

    pub fn sum_update_sq_norms(&self) -> f64 {
        self.steps.iter().map(|s| s.update_sq_norm).sum()
    }

    /// Calls `visitor(k, θ_k, U_k, ℓ_k)` for every step, in order. Uses stored
    /// updates when present, otherwise replays training on `dataset`.
    pub fn visit(
        &self,
        dataset: Option<&Dataset>,
        mut visitor: impl FnMut(usize, &[f64], &[f64], f64) -> Result<()>,
    ) -> Result<()> {
        if self.has_updates() {
            let eta = self.meta.eta;
            let mut theta = self.theta0.clone();
            for s in &self.steps {
                let u = s.update.as_deref().expect("checked above");
                visitor(s.k, &theta, u, s.loss)?;
                step_in_place(&mut theta, u, eta)?;
            }
            Ok(())
        } else {
            let dataset = dataset.ok_or_else(|| {
                Error::Config("log stores no updates; a dataset is required to replay it".into())
            })?;
            self.replay(dataset, visitor)
        }
    }

    /// Re-executes training from the setup and seeds, checking every
    /// regenerated loss and the final iterate against the stored values.
    pub fn replay(
        &self,
        dataset: &Dataset,
        mut visitor: impl FnMut(usize, &[f64], &[f64], f64) -> Result<()>,
    ) -> Result<()> {
        if dataset.digest() != self.meta.data_digest {
            return Err(Error::Config(
                "replay dataset differs from the recorded one".into(),
            ));
        }
        if self.setup.network.digest() != self.meta.spec_digest {
            return Err(Error::Config(
                "log setup does not match its spec digest".into(),
            ));
        }
        let (_, mut theta_t, _) = drive(&self.setup, dataset, |ev| {
            let stored = self.steps.get(ev.k).ok_or(Error::ReplayDivergence {
                step: ev.k,
                stored: f64::NAN,
                regenerated: ev.loss,
            })?;
            if stored.loss.to_bits() != ev.loss.to_bits() || stored.xi != ev.xi {
                return Err(Error::ReplayDivergence {
                    step: ev.k,
                    stored: stored.loss,
                    regenerated: ev.loss,
                });
            }
            visitor(ev.k, ev.theta, ev.update, ev.loss)
        })?;
        if self.meta.dtype == Dtype::F32 {
            round_f32(&mut theta_t);
        }
        if let Some(i) =
            (0..theta_t.len()).find(|&i| theta_t[i].to_bits() != self.theta_t[i].to_bits())
        {
            return Err(Error::ReplayDivergence {
                step: self.steps.len(),
                stored: self.theta_t[i],
                regenerated: theta_t[i],
            });
        }
        Ok(())
    }

    /// Second pass: stores ⟨θ_k − θ_T, U_k⟩ on every step record.
    pub fn fill_coherence(&mut self, dataset: Option<&Dataset>) -> Result<()> {
        let mut values = Vec::with_capacity(self.steps.len());
        let theta_t = self.theta_t.clone();
        self.visit(dataset, |_, theta, u, _| {
            let mut acc = 0.0;
            for ((t, tt), uu) in theta.iter().zip(&theta_t).zip(u) {
                acc += (t - tt) * uu;
            }
            values.push(acc);
            Ok(())
        })?;
        for (s, c) in self.steps.iter_mut().zip(values) {
            s.coherence = Some(c);
        }
        Ok(())
    }

    /// Largest violation of `θ_k − θ_{k+1} = η·U_k`, measured as
    /// `|Δ_i − ηU_i| / (1 + |θ_{k,i}|)`, and whether re-applying every stored
    /// update reproduces the next iterate bit for bit. `None` without stored
    /// updates.
    pub fn update_identity(&self) -> Option<UpdateIdentity> {
        if !self.has_updates() {
            return None;
        }
        let eta = self.meta.eta;
        let mut theta = self.theta0.clone();
        let mut max_scaled = 0.0f64;
        let mut exact_differences = 0usize;
        let mut total = 0usize;
        let mut sum_u = vec![0.0; theta.len()];
        for s in &self.steps {
            let u = s.update.as_ref().expect("checked");
            let next: Vec<f64> = theta.iter().zip(u).map(|(&t, &ui)| t - eta * ui).collect();
            for i in 0..theta.len() {
                let diff = theta[i] - next[i];
                let applied = eta * u[i];
                max_scaled = max_scaled.max((diff - applied).abs() / (1.0 + theta[i].abs()));
                exact_differences += (diff.to_bits() == applied.to_bits()) as usize;
                total += 1;
                sum_u[i] += u[i];
            }
            theta = next;
        }
        let reconstructed: Vec<f64> = self
            .theta0
            .iter()
            .zip(&sum_u)
            .map(|(t, s)| t - eta * s)
            .collect();
        let err = crate::tensor::sq_dist(&reconstructed, &self.theta_t)
            .expect("same length")
            .sqrt();
        let norm_t = sq_norm(&self.theta_t).sqrt();
        let replay_exact = theta
            .iter()
            .zip(&self.theta_t)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        Some(UpdateIdentity {
            max_scaled_error: max_scaled,
            exact_differences,
            coordinates_checked: total,
            reconstruction_error: err / (1.0 + norm_t),
            stepwise_replay_exact: replay_exact,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, encode(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        decode(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateIdentity {
    /// `max |(θ_k − θ_{k+1})_i − ηU_{k,i}| / (1 + |θ_{k,i}|)`.
    pub max_scaled_error: f64,
    /// Coordinates where the floating-point difference equals `ηU` exactly.
    pub exact_differences: usize,
    pub coordinates_checked: usize,
    /// `‖θ_0 − ηΣU_k − θ_T‖ / (1 + ‖θ_T‖)`.
    pub reconstruction_error: f64,
    /// `θ_{k+1} == θ_k − ηU_k` recomputed from the stored `U_k` at every step.
    pub stepwise_replay_exact: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Task};
    use crate::network::{LayerSpec, LossKind};
    use crate::optim::OptimizerKind;
    use crate::tensor::Tensor;

    /// One sample, x = 1, y = 0, a single weight with no bias:
    /// ℓ(θ) = θ², so gradient descent is the 1-D quadratic.
    fn quadratic_dataset(n: usize) -> Dataset {
        Dataset::new(
            Tensor::filled(vec![n, 1], 1.0),
            Tensor::zeros(vec![n, 1]),
            Task::Regression,
        )
        .unwrap()
    }

    fn linear_setup(epochs: usize, storage: StorageMode) -> TrainingSetup {
        TrainingSetup {
            network: NetworkSpec {
                input_shape: vec![1],
                layers: vec![LayerSpec::dense(1, 1)],
                skip_edges: vec![],
                loss: LossKind::Mse,
            },
            optimizer: OptimizerConfig::new(OptimizerKind::Sgd, 0.05).unwrap(),
            epochs,
            batch_size: 1,
            seeds: Seeds::all(3),
            storage,
            dtype: Dtype::F64,
            checkpoint_stride: 0,
            max_steps: None,
        }
    }

    #[test]
    fn counts_whole_epochs() {
        let ds = quadratic_dataset(10);
        let log = record_run(&linear_setup(5, StorageMode::Full), &ds).unwrap();
        assert_eq!(log.len(), 50);
        assert!(log.meta.whole_epochs());
        assert!(log.warnings().is_empty());
        let id = log.update_identity().unwrap();
        assert!(id.max_scaled_error <= 1e-12);
        assert!(id.reconstruction_error <= 1e-10);
        assert!(id.stepwise_replay_exact);
    }

    #[test]
    fn truncated_run_is_flagged() {
        let ds = quadratic_dataset(4);
        let mut setup = linear_setup(2, StorageMode::Replay);
        setup.max_steps = Some(5);
        let log = record_run(&setup, &ds).unwrap();
        assert_eq!(log.len(), 5);
        assert!(!log.meta.whole_epochs());
        assert_eq!(log.warnings().len(), 1);
    }

    #[test]
    fn replay_matches_full() {
        let ds = quadratic_dataset(6);
        let full = record_run(&linear_setup(3, StorageMode::Full), &ds).unwrap();
        let replay = record_run(&linear_setup(3, StorageMode::Replay), &ds).unwrap();
        assert!(replay.update_identity().is_none());
        let a: Vec<u64> = full.steps.iter().map(|s| s.loss.to_bits()).collect();
        let b: Vec<u64> = replay.steps.iter().map(|s| s.loss.to_bits()).collect();
        assert_eq!(a, b);

        let mut calls = 0;
        let mut sum_sq = 0.0;
        replay
            .replay(&ds, |k, _, u, _| {
                assert_eq!(k, calls);
                calls += 1;
                sum_sq += sq_norm(u);
                Ok(())
            })
            .unwrap();
        assert_eq!(calls, replay.len());
        assert!((sum_sq - replay.sum_update_sq_norms()).abs() <= 1e-12 * sum_sq.max(1.0));
    }

    #[test]
    fn tampered_loss_is_a_replay_divergence() {
        let ds = quadratic_dataset(6);
        let mut log = record_run(&linear_setup(2, StorageMode::Replay), &ds).unwrap();
        log.steps[4].loss = f64::from_bits(log.steps[4].loss.to_bits() ^ 1);
        match log.replay(&ds, |_, _, _, _| Ok(())) {
            Err(Error::ReplayDivergence { step: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        let other = quadratic_dataset(7);
        assert!(log.replay(&other, |_, _, _, _| Ok(())).is_err());
    }

    #[test]
    fn coherence_pass_agrees_between_modes() {
        let ds = quadratic_dataset(6);
        let mut full = record_run(&linear_setup(3, StorageMode::Full), &ds).unwrap();
        let mut replay = record_run(&linear_setup(3, StorageMode::Replay), &ds).unwrap();
        full.fill_coherence(None).unwrap();
        replay.fill_coherence(Some(&ds)).unwrap();
        for (a, b) in full.steps.iter().zip(&replay.steps) {
            assert_eq!(
                a.coherence.unwrap().to_bits(),
                b.coherence.unwrap().to_bits()
            );
        }
        assert!(replay.clone().fill_coherence(None).is_err());
    }

    #[test]
    fn checkpoints_every_stride() {
        let ds = quadratic_dataset(5);
        let mut setup = linear_setup(2, StorageMode::Replay);
        setup.checkpoint_stride = 3;
        let log = record_run(&setup, &ds).unwrap();
        let ks: Vec<usize> = log.checkpoints.iter().map(|(k, _)| *k).collect();
        assert_eq!(ks, vec![0, 3, 6, 9]);
        assert_eq!(log.checkpoints[0].1, log.theta0);
    }
}
