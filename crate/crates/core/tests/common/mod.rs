#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use trajlens::network::{
    Activation, Batch, LayerSpec, LossKind, Mode, Network, NetworkSpec, SkipEdge,
};
use trajlens::tensor::Tensor;

pub const ACTIVATIONS: [Activation; 5] = [
    Activation::Identity,
    Activation::Sigmoid,
    Activation::Tanh,
    Activation::Relu,
    Activation::LeakyRelu(0.01),
];

pub const FAMILIES: [&str; 6] = ["mlp", "mlp_bn", "residual", "projection", "conv", "conv_bn"];

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Network family `i % 6` with activation `i / 6 % 5` and random widths.
pub fn random_case(i: usize) -> (NetworkSpec, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let family = FAMILIES[i % FAMILIES.len()];
    let act = ACTIVATIONS[(i / FAMILIES.len()) % ACTIVATIONS.len()];
    let loss = if i.is_multiple_of(2) {
        LossKind::CrossEntropySoftmax
    } else {
        LossKind::Mse
    };
    let batch = rng.random_range(2..5);
    let classes = rng.random_range(2..4);
    let a = LayerSpec::activation(act);
    let (input_shape, layers, skip_edges) = match family {
        "mlp" | "mlp_bn" => {
            let d = rng.random_range(2..5);
            let h = rng.random_range(2..6);
            let mut layers = vec![LayerSpec::dense(d, h)];
            if family == "mlp_bn" {
                layers.push(LayerSpec::batch_norm(h));
            }
            layers.extend([a.clone(), LayerSpec::dense(h, classes)]);
            (vec![d], layers, vec![])
        }
        "residual" => {
            let d = rng.random_range(2..5);
            let h = rng.random_range(2..5);
            let layers = vec![
                LayerSpec::dense(d, h),
                a.clone(),
                LayerSpec::dense(h, h),
                LayerSpec::batch_norm(h),
                a.clone(),
                LayerSpec::dense(h, h),
                a.clone(),
                LayerSpec::dense(h, classes),
            ];
            (
                vec![d],
                layers,
                vec![SkipEdge::identity(2, 5), SkipEdge::identity(1, 1)],
            )
        }
        "projection" => {
            let d = rng.random_range(2..5);
            let h = rng.random_range(2..5);
            let layers = vec![
                LayerSpec::dense(d, h),
                a.clone(),
                LayerSpec::dense(h, classes),
            ];
            (
                vec![d],
                layers,
                vec![SkipEdge {
                    from: 0,
                    to: 2,
                    projection: true,
                }],
            )
        }
        _ => {
            let c = rng.random_range(1..3);
            let hw = rng.random_range(3..6);
            let k = rng.random_range(1..4).min(hw);
            let stride = if (hw - k) % 2 == 0 {
                rng.random_range(1..3)
            } else {
                1
            };
            let padding = rng.random_range(0..2);
            let cout = rng.random_range(1..3);
            let out = (hw + 2 * padding - k) / stride + 1;
            let mut layers = vec![LayerSpec::conv2d(c, cout, k, stride, padding)];
            if family == "conv_bn" {
                layers.push(LayerSpec::batch_norm(cout));
            }
            layers.extend([
                a.clone(),
                LayerSpec::Flatten,
                LayerSpec::dense(cout * out * out, classes),
            ]);
            (vec![c, hw, hw], layers, vec![])
        }
    };
    let spec = NetworkSpec {
        input_shape: input_shape.clone(),
        layers,
        skip_edges,
        loss,
    };
    let sample: usize = input_shape.iter().product();
    let mut shape = vec![batch];
    shape.extend(&input_shape);
    let inputs = Tensor::new(shape, normals(&mut rng, batch * sample)).unwrap();
    let targets = match loss {
        LossKind::CrossEntropySoftmax => Tensor::new(
            vec![batch],
            (0..batch)
                .map(|_| rng.random_range(0..classes) as f64)
                .collect(),
        )
        .unwrap(),
        LossKind::Mse => {
            Tensor::new(vec![batch, classes], normals(&mut rng, batch * classes)).unwrap()
        }
    };
    (
        spec,
        Batch {
            inputs,
            targets,
            index: 0,
        },
    )
}

pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
/// every coordinate, with central differences of step `1e-6·(1 + |θ_i|)`.
pub fn gradcheck(spec: &NetworkSpec, batch: &Batch, seed: u64) -> f64 {
    let net = Network::new(spec.clone()).unwrap();
    let mut params = net.init_params(seed).unwrap();
    // shifts and biases start at 0; perturb so every segment is generic
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in params.values_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let (_, grad, _) = net.loss_and_gradient(&params, batch).unwrap();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let x = params.values()[i];
        let h = 1e-6 * (1.0 + x.abs());
        params.values_mut()[i] = x + h;
        let up = net.forward(&params, batch, Mode::Train).unwrap().loss;
        params.values_mut()[i] = x - h;
        let down = net.forward(&params, batch, Mode::Train).unwrap().loss;
        params.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.values()[i];
        let rel =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

use trajlens::data::{Dataset, Task};
use trajlens::optim::{OptimizerConfig, OptimizerKind};
use trajlens::tensor::Dtype;
use trajlens::trajectory::{Seeds, StorageMode, TrainingSetup};

/// Eight 2-d points with dyadic coordinates and a linear regression target.
pub fn golden_dataset() -> Dataset {
    let xs: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) / 8.0).collect();
    let ys: Vec<f64> = xs
        .chunks(2)
        .map(|p| 0.5 * p[0] - 0.25 * p[1] + 0.125)
        .collect();
    Dataset::new(
        Tensor::new(vec![8, 2], xs).unwrap(),
        Tensor::new(vec![8, 1], ys).unwrap(),
        Task::Regression,
    )
    .unwrap()
}

/// Dense–ReLU–dense with MSE: no transcendental function anywhere.
pub fn golden_setup(storage: StorageMode, dtype: Dtype) -> TrainingSetup {
    TrainingSetup {
        network: NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::dense(2, 3),
                LayerSpec::activation(Activation::Relu),
                LayerSpec::dense(3, 1),
            ],
            skip_edges: vec![],
            loss: LossKind::Mse,
        },
        optimizer: OptimizerConfig::new(OptimizerKind::Sgd, 0.125).unwrap(),
        epochs: 3,
        batch_size: 2,
        seeds: Seeds::all(7),
        storage,
        dtype,
        checkpoint_stride: 4,
        max_steps: None,
    }
}

/// Small classification setup touching BN, skips and a nonlinearity.
pub fn blob_setup(kind: OptimizerKind, eta: f64, storage: StorageMode) -> (TrainingSetup, Dataset) {
    use trajlens::data::{make_synthetic, SyntheticKind};
    let ds = make_synthetic(
        SyntheticKind::GaussianBlobs {
            classes: 3,
            separation: 2.0,
        },
        120,
        4,
        11,
    )
    .unwrap();
    let setup = TrainingSetup {
        network: NetworkSpec {
            input_shape: vec![4],
            layers: vec![
                LayerSpec::dense(4, 8),
                LayerSpec::batch_norm(8),
                LayerSpec::activation(Activation::Tanh),
                LayerSpec::dense(8, 8),
                LayerSpec::activation(Activation::Relu),
                LayerSpec::dense(8, 3),
            ],
            skip_edges: vec![SkipEdge::identity(3, 4)],
            loss: LossKind::CrossEntropySoftmax,
        },
        optimizer: OptimizerConfig::new(kind, eta).unwrap(),
        epochs: 5,
        batch_size: 20,
        seeds: Seeds::all(5),
        storage,
        dtype: Dtype::F64,
        checkpoint_stride: 0,
        max_steps: None,
    };
    (setup, ds)
}

use trajlens::optim::{compute_update, step};

pub const STEPS: usize = 1000;

/// A gradient stream with sign changes and varying magnitude.
pub fn oracle_grad(k: usize, i: usize) -> f64 {
    let t = k as f64;
    ((0.37 + 0.11 * i as f64) * t).sin() * (1.0 + 0.5 * (0.013 * t).cos()) + 0.05 * i as f64
}

pub fn run_optimizer(kind: OptimizerKind, eta: f64) -> Vec<Vec<f64>> {
    let cfg = OptimizerConfig::new(kind, eta).unwrap();
    let mut state = cfg.init_state(3);
    let mut theta = vec![0.5, -1.0, 2.0];
    let mut out = Vec::new();
    for k in 0..STEPS {
        let g: Vec<f64> = (0..3).map(|i| oracle_grad(k, i)).collect();
        let u = compute_update(&cfg, &mut state, &g).unwrap();
        theta = step(&theta, &u, eta).unwrap();
        out.push(theta.clone());
    }
    out
}

pub fn reference_optimizer(opt: &str, eta: f64) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); STEPS];
    for (i, start) in [0.5f64, -1.0, 2.0].into_iter().enumerate() {
        let mut theta = start;
        let (mut v, mut m, mut s) = (0.0f64, 0.0f64, 0.0f64);
        for (k, row) in out.iter_mut().enumerate() {
            let g = oracle_grad(k, i);
            let u = match opt {
                "sgd" => g,
                "momentum" => {
                    v = 0.5 * v + g;
                    v
                }
                _ => {
                    m = 0.9 * m + 0.1 * g;
                    s = 0.999 * s + 0.001 * g * g;
                    let n = (k + 1) as i32;
                    let mhat = m / (1.0 - 0.9f64.powi(n));
                    let shat = s / (1.0 - 0.999f64.powi(n));
                    mhat / (shat.sqrt() + 1e-2)
                }
            };
            theta -= eta * u;
            row.push(theta);
        }
    }
    out
}

pub fn max_rel(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
        .fold(0.0, f64::max)
}
