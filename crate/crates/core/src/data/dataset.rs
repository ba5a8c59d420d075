use std::f64::consts::PI;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::Batch;
use crate::network::{Activation, LayerSpec, LossKind, Mode, Network, NetworkSpec, ParamVector};
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 0xDA7A;
const TEACHER_STREAM_SEED_OFFSET: u64 = 0x7EAC_4E55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn loss(self) -> LossKind {
        match self {
            Task::Classification { .. } => LossKind::CrossEntropySoftmax,
            Task::Regression => LossKind::Mse,
        }
    }
}

/// `N` samples stacked along the first axis. Classification targets are
/// class indices stored as reals, shape `[N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub task: Task,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, task: Task) -> Result<Self> {
        let n = *inputs
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("dataset inputs need a sample axis".into()))?;
        if targets.shape().first() != Some(&n) {
            return Err(Error::Dimension(format!(
                "{n} input samples but targets have shape {:?}",
                targets.shape()
            )));
        }
        if inputs.rank() < 2 {
            return Err(Error::Dimension("dataset inputs must be N×features".into()));
        }
        if let Task::Classification { classes } = task {
            if targets.rank() != 1 {
                return Err(Error::Dimension(
                    "classification targets must be a vector".into(),
                ));
            }
            if let Some(bad) = targets
                .data()
                .iter()
                .find(|&&t| t < 0.0 || t.fract() != 0.0 || t as usize >= classes)
            {
                return Err(Error::Dimension(format!(
                    "label {bad} outside [0, {classes})"
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn target_shape(&self) -> &[usize] {
        &self.targets.shape()[1..]
    }

    /// Gathers the listed samples into a batch.
    pub fn gather(&self, indices: &[usize], batch_index: usize) -> Result<Batch> {
        let in_w: usize = self.sample_shape().iter().product();
        let t_w: usize = self.target_shape().iter().product();
        let mut xs = Vec::with_capacity(indices.len() * in_w);
        let mut ts = Vec::with_capacity(indices.len() * t_w);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dimension(format!("sample {i} out of range")));
            }
            xs.extend_from_slice(&self.inputs.data()[i * in_w..(i + 1) * in_w]);
            ts.extend_from_slice(&self.targets.data()[i * t_w..(i + 1) * t_w]);
        }
        let mut in_shape = vec![indices.len()];
        in_shape.extend_from_slice(self.sample_shape());
        let mut t_shape = vec![indices.len()];
        t_shape.extend_from_slice(self.target_shape());
        Ok(Batch {
            inputs: Tensor::new(in_shape, xs)?,
            targets: Tensor::new(t_shape, ts)?,
            index: batch_index,
        })
    }

    /// SHA-256 of shapes and little-endian values; used to bind a trajectory
    /// log to the data it was trained on.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in [&self.inputs, &self.targets] {
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        match self.task {
            Task::Classification { classes } => h.update((classes as u64).to_le_bytes()),
            Task::Regression => h.update(u64::MAX.to_le_bytes()),
        }
        h.finalize().into()
    }
}

fn default_classes() -> usize {
    3
}
fn default_separation() -> f64 {
    3.0
}
fn default_spiral_noise() -> f64 {
    0.05
}
fn default_turns() -> f64 {
    1.5
}
fn default_outputs() -> usize {
    1
}
fn default_hidden() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic unit Gaussians around `classes` centers at distance
    /// `separation` from the origin.
    GaussianBlobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// Two interleaved arms; extra dimensions beyond the first two carry
    /// pure noise.
    TwoSpirals {
        #[serde(default = "default_spiral_noise")]
        noise: f64,
        #[serde(default = "default_turns")]
        turns: f64,
    },
    /// Targets produced by a fixed random `dims → hidden (tanh) → outputs`
    /// teacher, plus optional Gaussian noise.
    RandomRegression {
        #[serde(default = "default_outputs")]
        outputs: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default)]
        noise: f64,
    },
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn make_synthetic(kind: SyntheticKind, n: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dims == 0 {
        return Err(Error::Config(
            "synthetic data needs n > 0 and dims > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);

    match kind {
        SyntheticKind::GaussianBlobs {
            classes,
            separation,
        } => {
            if classes < 2 {
                return Err(Error::Config(
                    "gaussian_blobs needs at least 2 classes".into(),
                ));
            }
            let mut centers = Vec::with_capacity(classes * dims);
            for _ in 0..classes {
                let dir: Vec<f64> = (0..dims).map(|_| gauss(&mut rng)).collect();
                let norm = dir
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                centers.extend(dir.iter().map(|v| separation * v / norm));
            }
            let mut xs = Vec::with_capacity(n * dims);
            let mut ys = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                for j in 0..dims {
                    xs.push(centers[c * dims + j] + gauss(&mut rng));
                }
                ys.push(c as f64);
            }
            Dataset::new(
                Tensor::new(vec![n, dims], xs)?,
                Tensor::new(vec![n], ys)?,
                Task::Classification { classes },
            )
        }
        SyntheticKind::TwoSpirals { noise, turns } => {
            if dims < 2 {
                return Err(Error::Config("two_spirals needs dims >= 2".into()));
            }
            let mut xs = Vec::with_capacity(n * dims);
            let mut ys = Vec::with_capacity(n);
            let uniform = Uniform::new(0.0, 1.0).expect("valid range");
            for i in 0..n {
                let c = i % 2;
                let u: f64 = uniform.sample(&mut rng);
                let t = u.sqrt();
                let angle = 2.0 * PI * turns * t + c as f64 * PI;
                xs.push(t * angle.cos() + noise * gauss(&mut rng));
                xs.push(t * angle.sin() + noise * gauss(&mut rng));
                for _ in 2..dims {
                    xs.push(noise * gauss(&mut rng));
                }
                ys.push(c as f64);
            }
            Dataset::new(
                Tensor::new(vec![n, dims], xs)?,
                Tensor::new(vec![n], ys)?,
                Task::Classification { classes: 2 },
            )
        }
        SyntheticKind::RandomRegression {
            outputs,
            hidden,
            noise,
        } => {
            let (teacher, params) = regression_teacher(dims, hidden, outputs, seed)?;
            let xs: Vec<f64> = (0..n * dims).map(|_| gauss(&mut rng)).collect();
            let inputs = Tensor::new(vec![n, dims], xs)?;
            let mut targets = teacher_predict(&teacher, &params, &inputs)?;
            if noise > 0.0 {
                for v in targets.data_mut() {
                    *v += noise * gauss(&mut rng);
                }
            }
            Dataset::new(inputs, targets, Task::Regression)
        }
    }
}

/// The fixed teacher behind `random_regression` for a given seed.
pub fn regression_teacher(
    dims: usize,
    hidden: usize,
    outputs: usize,
    seed: u64,
) -> Result<(Network, ParamVector)> {
    let spec = NetworkSpec {
        input_shape: vec![dims],
        layers: vec![
            LayerSpec::dense(dims, hidden),
            LayerSpec::activation(Activation::Tanh),
            LayerSpec::dense(hidden, outputs),
        ],
        skip_edges: vec![],
        loss: LossKind::Mse,
    };
    let net = Network::new(spec)?;
    let params = net.init_params(seed.wrapping_add(TEACHER_STREAM_SEED_OFFSET))?;
    Ok((net, params))
}

/// Teacher outputs for `inputs` (eval mode; the teacher has no BN).
pub fn teacher_predict(teacher: &Network, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let out_w: usize = teacher.output_shape().iter().product();
    let batch = Batch {
        inputs: inputs.clone(),
        targets: Tensor::zeros(vec![n, out_w]),
        index: 0,
    };
    Ok(teacher.forward(params, &batch, Mode::Eval)?.output)
}
