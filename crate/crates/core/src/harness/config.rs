use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, load_idx, make_synthetic, Dataset, SyntheticKind, Task};
use crate::error::{Error, Result};
use crate::network::{Activation, LayerSpec, NetworkSpec, SkipEdge};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::regularity::AnalyzerConfig;
use crate::tensor::Dtype;
use crate::trajectory::{Seeds, StorageMode, TrainingSetup};

/// A config field that is either fixed or lists the values of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis<T> {
    Fixed(T),
    Sweep(Vec<T>),
}

impl<T: Clone> Axis<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            Axis::Fixed(v) => vec![v.clone()],
            Axis::Sweep(v) => v.clone(),
        }
    }

    pub fn varies(&self) -> bool {
        matches!(self, Axis::Sweep(v) if v.len() > 1)
    }

    fn single(&self) -> Option<T> {
        match self {
            Axis::Fixed(v) => Some(v.clone()),
            Axis::Sweep(v) if v.len() == 1 => Some(v[0].clone()),
            Axis::Sweep(_) => None,
        }
    }
}

impl<T> From<T> for Axis<T> {
    fn from(v: T) -> Self {
        Axis::Fixed(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    All,
    FirstPerBlock,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    All,
    /// Only the first residual block of each stage keeps its skip.
    FirstPerBlock,
    /// Only the last `keep_last` residual blocks keep their skips.
    LastM,
    None,
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::All => "all",
            BnMode::FirstPerBlock => "first_per_block",
            BnMode::None => "none",
        })
    }
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::All => "all",
            SkipMode::FirstPerBlock => "first_per_block",
            SkipMode::LastM => "last_m",
            SkipMode::None => "none",
        })
    }
}

fn default_width() -> usize {
    64
}
fn default_blocks() -> usize {
    4
}
fn default_blocks_per_stage() -> usize {
    2
}
fn default_keep_last() -> usize {
    2
}
fn default_activation() -> Axis<Activation> {
    Axis::Fixed(Activation::Relu)
}
fn default_bn() -> Axis<BnMode> {
    Axis::Fixed(BnMode::All)
}
fn default_skip() -> Axis<SkipMode> {
    Axis::Fixed(SkipMode::All)
}

/// Residual MLP family. Each residual block is
/// `dense → [bn] → act → dense → [bn]`, summed with the block input and
/// followed by `act`; blocks are grouped into stages of `blocks_per_stage`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_blocks_per_stage")]
    pub blocks_per_stage: usize,
    #[serde(default = "default_keep_last")]
    pub keep_last: usize,
    #[serde(default = "default_activation")]
    pub activation: Axis<Activation>,
    #[serde(default = "default_bn")]
    pub bn_mode: Axis<BnMode>,
    #[serde(default = "default_skip")]
    pub skip_mode: Axis<SkipMode>,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        Self {
            width: default_width(),
            blocks: default_blocks(),
            blocks_per_stage: default_blocks_per_stage(),
            keep_last: default_keep_last(),
            activation: default_activation(),
            bn_mode: default_bn(),
            skip_mode: default_skip(),
        }
    }
}

/// Builds the residual MLP for one point of the ablation grid.
pub fn residual_mlp(
    inputs: usize,
    outputs: usize,
    template: &ModelTemplate,
    activation: Activation,
    bn: BnMode,
    skip: SkipMode,
    task: Task,
) -> Result<NetworkSpec> {
    if template.width == 0 || template.blocks_per_stage == 0 {
        return Err(Error::Config(
            "width and blocks_per_stage must be positive".into(),
        ));
    }
    let w = template.width;
    let mut layers = vec![
        LayerSpec::dense(inputs, w),
        LayerSpec::activation(activation),
    ];
    let mut skip_edges = Vec::new();
    for b in 0..template.blocks {
        let start = layers.len();
        layers.push(LayerSpec::dense(w, w));
        if bn != BnMode::None {
            layers.push(LayerSpec::batch_norm(w));
        }
        layers.push(LayerSpec::activation(activation));
        layers.push(LayerSpec::dense(w, w));
        if bn == BnMode::All {
            layers.push(LayerSpec::batch_norm(w));
        }
        let end = layers.len() - 1;
        let keep = match skip {
            SkipMode::All => true,
            SkipMode::FirstPerBlock => b % template.blocks_per_stage == 0,
            SkipMode::LastM => b + template.keep_last >= template.blocks,
            SkipMode::None => false,
        };
        if keep {
            skip_edges.push(SkipEdge::identity(start, end));
        }
        layers.push(LayerSpec::activation(activation));
    }
    layers.push(LayerSpec::dense(w, outputs));
    let spec = NetworkSpec {
        input_shape: vec![inputs],
        layers,
        skip_edges,
        loss: task.loss(),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        dims: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_true")]
        classification: bool,
    },
}

fn default_true() -> bool {
    true
}

impl DataSpec {
    /// Loads or generates the dataset. Relative paths resolve against `base`.
    pub fn load(&self, seed: u64, base: &Path) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic { generator, n, dims } => {
                make_synthetic(*generator, *n, *dims, seed)
            }
            DataSpec::Idx { images, labels } => load_idx(&base.join(images), &base.join(labels)),
            DataSpec::Csv {
                path,
                classification,
            } => load_csv(&base.join(path), *classification),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub init_seed: u64,
    pub data_seed: u64,
    pub sampler_seed: u64,
}

impl From<SeedConfig> for Seeds {
    fn from(s: SeedConfig) -> Self {
        Seeds {
            init: s.init_seed,
            data: s.data_seed,
            sampler: s.sampler_seed,
        }
    }
}

impl SeedConfig {
    pub fn all(seed: u64) -> Self {
        Self {
            init_seed: seed,
            data_seed: seed,
            sampler_seed: seed,
        }
    }
}

fn default_batch_size() -> usize {
    128
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("trajlens-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelTemplate,
    pub optimizer: Axis<OptimizerConfig>,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub seeds: SeedConfig,
    #[serde(default)]
    pub analyzer: AnalyzerConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub storage: StorageMode,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub checkpoint_stride: usize,
    /// Written into run snapshots; ignored on load apart from a warning on
    /// mismatch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_version: Option<String>,
}

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

impl ExperimentConfig {
    /// Residual MLP (4 blocks, width 64) on 2048 two-spirals points, batch
    /// 128 (16 batches per epoch), 60 epochs of SGD.
    pub fn desk_default(name: &str, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            data: DataSpec::Synthetic {
                generator: SyntheticKind::TwoSpirals {
                    noise: 0.05,
                    turns: 1.5,
                },
                n: 2048,
                dims: 2,
            },
            model: ModelTemplate::default(),
            optimizer: Axis::Fixed(OptimizerConfig {
                kind: OptimizerKind::Sgd,
                eta: 0.05,
            }),
            epochs: 60,
            batch_size: 128,
            seeds: SeedConfig::all(seed),
            analyzer: AnalyzerConfig::default(),
            output_dir: default_output_dir(),
            storage: StorageMode::Full,
            dtype: Dtype::F64,
            checkpoint_stride: 0,
            library_version: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(v) = &cfg.library_version {
            if v != LIBRARY_VERSION {
                log::warn!("config was written by library version {v}, running {LIBRARY_VERSION}");
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = SeedConfig::all(seed);
        self
    }

    /// Names of the axes that list more than one value.
    pub fn varying_axes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.model.activation.varies() {
            v.push("activation");
        }
        if self.model.bn_mode.varies() {
            v.push("bn_mode");
        }
        if self.model.skip_mode.varies() {
            v.push("skip_mode");
        }
        if self.optimizer.varies() {
            v.push("optimizer");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        for opt in self.optimizer.values() {
            opt.validate()?;
        }
        for a in self.model.activation.values() {
            a.validate()?;
        }
        if matches!(&self.model.activation, Axis::Sweep(v) if v.is_empty())
            || matches!(&self.model.bn_mode, Axis::Sweep(v) if v.is_empty())
            || matches!(&self.model.skip_mode, Axis::Sweep(v) if v.is_empty())
            || matches!(&self.optimizer, Axis::Sweep(v) if v.is_empty())
        {
            return Err(Error::Config("an axis lists no values".into()));
        }
        self.analyzer.validate()
    }

    /// Splits a sweep into fixed configs, one per value of the single
    /// varying axis, each labeled by that value. Everything else, seeds
    /// included, is shared.
    pub fn expand(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        self.validate()?;
        let axes = self.varying_axes();
        if axes.len() > 1 {
            return Err(Error::Config(format!(
                "a sweep varies exactly one axis, found {}: {}",
                axes.len(),
                axes.join(", ")
            )));
        }
        let Some(&axis) = axes.first() else {
            return Ok(vec![(self.name.clone(), self.fixed())]);
        };
        let mut out = Vec::new();
        let base = self.fixed_except(axis);
        match axis {
            "activation" => {
                for a in self.model.activation.values() {
                    let mut c = base.clone();
                    c.model.activation = Axis::Fixed(a);
                    out.push((a.to_string(), c));
                }
            }
            "bn_mode" => {
                for m in self.model.bn_mode.values() {
                    let mut c = base.clone();
                    c.model.bn_mode = Axis::Fixed(m);
                    out.push((m.to_string(), c));
                }
            }
            "skip_mode" => {
                for m in self.model.skip_mode.values() {
                    let mut c = base.clone();
                    c.model.skip_mode = Axis::Fixed(m);
                    out.push((m.to_string(), c));
                }
            }
            _ => {
                for o in self.optimizer.values() {
                    let mut c = base.clone();
                    c.optimizer = Axis::Fixed(o);
                    out.push((o.kind.name().to_string(), c));
                }
            }
        }
        let mut labels: Vec<&String> = out.iter().map(|(l, _)| l).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != out.len() {
            // e.g. two sgd entries with different η
            for (i, (label, c)) in out.iter_mut().enumerate() {
                let eta = c.optimizer.single().map(|o| o.eta).unwrap_or_default();
                *label = format!("{label}-{i}-eta{eta}");
            }
        }
        for (label, c) in out.iter_mut() {
            c.name = format!("{}-{}", self.name, label);
        }
        Ok(out)
    }

    fn fixed_except(&self, axis: &str) -> ExperimentConfig {
        let mut c = self.clone();
        if axis != "activation" {
            c.model.activation = Axis::Fixed(c.model.activation.single().expect("not varying"));
        }
        if axis != "bn_mode" {
            c.model.bn_mode = Axis::Fixed(c.model.bn_mode.single().expect("not varying"));
        }
        if axis != "skip_mode" {
            c.model.skip_mode = Axis::Fixed(c.model.skip_mode.single().expect("not varying"));
        }
        if axis != "optimizer" {
            c.optimizer = Axis::Fixed(c.optimizer.single().expect("not varying"));
        }
        c
    }

    fn fixed(&self) -> ExperimentConfig {
        self.fixed_except("")
    }

    /// The single optimizer of a non-sweep config.
    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        self.optimizer
            .single()
            .ok_or_else(|| Error::Config("config lists several optimizers; use sweep".into()))
    }

    /// Network and training setup for a non-sweep config on `dataset`.
    pub fn training_setup(&self, dataset: &Dataset) -> Result<TrainingSetup> {
        self.validate()?;
        if !self.varying_axes().is_empty() {
            return Err(Error::Config(format!(
                "config varies {}; use sweep",
                self.varying_axes().join(", ")
            )));
        }
        if dataset.sample_shape().len() != 1 {
            return Err(Error::Config(format!(
                "residual MLP needs flat samples, got shape {:?}",
                dataset.sample_shape()
            )));
        }
        let inputs = dataset.sample_shape()[0];
        let outputs = match dataset.task {
            Task::Classification { classes } => classes,
            Task::Regression => dataset.target_shape().iter().product(),
        };
        let network = residual_mlp(
            inputs,
            outputs,
            &self.model,
            self.model.activation.single().expect("fixed"),
            self.model.bn_mode.single().expect("fixed"),
            self.model.skip_mode.single().expect("fixed"),
            dataset.task,
        )?;
        let setup = TrainingSetup {
            network,
            optimizer: self.optimizer_config()?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seeds: self.seeds.into(),
            storage: self.storage,
            dtype: self.dtype,
            checkpoint_stride: self.checkpoint_stride,
            max_steps: None,
        };
        setup.validate()?;
        Ok(setup)
    }
}
