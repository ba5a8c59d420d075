//! End-to-end acceptance checks. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero when any fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use trajlens::data::{epoch_permutation, BatchPlan, Dataset, ReshuffleSampler, Task};
use trajlens::harness::{self, Axis, BnMode, ExperimentConfig, OutputFormat, RunSummary};
use trajlens::network::{Activation, LayerSpec, LossKind, NetworkSpec};
use trajlens::optim::{OptimizerConfig, OptimizerKind};
use trajlens::regularity::{
    analyze, analyze_sequence, gamma_from_scalars, AnalyzerConfig, Verdict,
};
use trajlens::tensor::{Dtype, Tensor};
use trajlens::trajectory::{decode, encode, record_run, Seeds, StorageMode, TrainingSetup};

struct Outcome {
    lines: Vec<(bool, String)>,
}

impl Outcome {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        println!("[{}] {id}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.lines.push((ok, id.to_string()));
    }
}

fn ac1(out: &mut Outcome) {
    let t = Instant::now();
    let cases = 2 * common::FAMILIES.len() * common::ACTIVATIONS.len();
    let mut worst = 0.0f64;
    let mut worst_case = 0;
    for i in 0..cases {
        let (spec, batch) = common::random_case(i);
        let e = common::gradcheck(&spec, &batch, i as u64);
        if e > worst {
            worst = e;
            worst_case = i;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    out.check(
        "AC1 gradient check",
        cases >= 50 && worst <= 1e-5 && secs <= 60.0,
        format!(
            "{cases} configurations, max rel error {worst:.2e} (case {worst_case}), {secs:.1}s"
        ),
    );
}

fn ac2(out: &mut Outcome) {
    let cases = [
        ("sgd", OptimizerKind::Sgd, 0.01),
        ("momentum", OptimizerKind::SgdMomentum { mu: 0.5 }, 0.01),
        (
            "adam",
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-2,
            },
            0.001,
        ),
    ];
    for (name, kind, eta) in cases {
        let err = common::max_rel(
            &common::run_optimizer(kind, eta),
            &common::reference_optimizer(name, eta),
        );
        out.check(
            &format!("AC2 optimizer oracle ({name})"),
            err <= 1e-12,
            format!("{} steps, max rel error {err:.2e}", common::STEPS),
        );
    }
}

fn ac3(out: &mut Outcome) {
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::momentum(),
        OptimizerKind::adam(),
    ] {
        let (setup, ds) = common::blob_setup(kind, 0.05, StorageMode::Full);
        let log = record_run(&setup, &ds).unwrap();
        let id = log.update_identity().unwrap();
        let name = kind.name();
        let recon = id.reconstruction_error <= 1e-10;
        if kind == OptimizerKind::Sgd {
            out.check(
                "AC3 update identity (sgd, stepwise θ_{k+1} = θ_k − ηU_k bit-exact)",
                id.stepwise_replay_exact && recon,
                format!(
                    "stepwise exact: {}, reconstruction error {:.2e}",
                    id.stepwise_replay_exact, id.reconstruction_error
                ),
            );
            out.check(
                "AC3 update identity (sgd, literal fl(θ_k − θ_{k+1}) == fl(ηU_k))",
                id.exact_differences == id.coordinates_checked,
                format!(
                    "{}/{} coordinates bit-exact, max scaled deviation {:.2e}",
                    id.exact_differences, id.coordinates_checked, id.max_scaled_error
                ),
            );
        } else {
            out.check(
                &format!("AC3 update identity ({name})"),
                id.stepwise_replay_exact && id.max_scaled_error <= 1e-12 && recon,
                format!(
                    "max scaled deviation {:.2e}, reconstruction error {:.2e}",
                    id.max_scaled_error, id.reconstruction_error
                ),
            );
        }
    }
}

/// GD on ℓ(θ) = θ²/2 with θ_0 = 1.
fn quadratic(eta: f64, steps: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut theta = 1.0f64;
    let mut updates = Vec::new();
    let mut losses = Vec::new();
    for _ in 0..steps {
        updates.push(vec![theta]);
        losses.push(0.5 * theta * theta);
        theta -= eta * theta;
    }
    (updates, losses)
}

fn ac4(out: &mut Outcome) {
    for eta in [0.01, 0.1, 0.5] {
        let t = Instant::now();
        let (updates, losses) = quadratic(eta, 200);
        let r = analyze_sequence(
            &[1.0],
            &updates,
            &losses,
            eta,
            200,
            &AnalyzerConfig::default(),
        )
        .unwrap();
        let secs = t.elapsed().as_secs_f64();
        let target = 2.0 - eta;
        let mut worst = 0.0f64;
        let mut worst_k = 0;
        for (k, g) in r.gamma_series.iter().enumerate() {
            if let Some(g) = g {
                if (g - target).abs() > worst {
                    worst = (g - target).abs();
                    worst_k = k;
                }
            }
        }
        let gmin_err = r.gamma_min.map_or(f64::INFINITY, |g| (g - target).abs());
        out.check(
            &format!("AC4 closed-form gamma (eta={eta})"),
            worst <= 1e-6 && gmin_err <= 1e-6 && secs < 1.0,
            format!(
                "{} valid steps, max |γ_k − (2−η)| = {worst:.2e} at k={worst_k}, |γ_min − (2−η)| = {gmin_err:.2e}",
                r.valid_steps
            ),
        );
    }
}

/// Full-batch linear least squares: a case where the principle holds, so
/// the bound is checked non-vacuously.
fn linear_control() -> (TrainingSetup, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 64;
    let xs = common::normals(&mut rng, n * 3);
    let w = [0.7, -1.2, 0.4];
    let ys: Vec<f64> = xs
        .chunks(3)
        .map(|x| {
            x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + 0.1 * rng.random_range(-1.0..1.0)
        })
        .collect();
    let ds = Dataset::new(
        Tensor::new(vec![n, 3], xs).unwrap(),
        Tensor::new(vec![n, 1], ys).unwrap(),
        Task::Regression,
    )
    .unwrap();
    let setup = TrainingSetup {
        network: NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::dense(3, 1)],
            skip_edges: vec![],
            loss: LossKind::Mse,
        },
        optimizer: OptimizerConfig::new(OptimizerKind::Sgd, 0.05).unwrap(),
        epochs: 100,
        batch_size: n,
        seeds: Seeds::all(2),
        storage: StorageMode::Full,
        dtype: Dtype::F64,
        checkpoint_stride: 0,
        max_steps: None,
    };
    (setup, ds)
}

fn suite_config(file: &str, seed: u64, out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(file);
    let mut cfg = ExperimentConfig::load(&path).unwrap().with_seed(seed);
    cfg.name = format!("{}-s{seed}", cfg.name);
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Summaries keyed by (sweep, seed) then label.
type Results = BTreeMap<(String, u64), BTreeMap<String, RunSummary>>;

fn run_suite(out: &Path) -> (Results, f64) {
    let t = Instant::now();
    let mut results = Results::new();
    let mut sweeps: Vec<(String, ExperimentConfig, u64)> = Vec::new();
    for file in [
        "sweep_activation.toml",
        "sweep_batchnorm.toml",
        "sweep_skip.toml",
        "sweep_optimizer.toml",
    ] {
        let key = file
            .trim_start_matches("sweep_")
            .trim_end_matches(".toml")
            .to_string();
        sweeps.push((key, suite_config(file, 0, out), 0));
    }
    for seed in [1, 2] {
        let mut a = suite_config("sweep_activation.toml", seed, out);
        a.model.activation = Axis::Sweep(vec![Activation::Relu, Activation::Sigmoid]);
        let mut b = suite_config("sweep_batchnorm.toml", seed, out);
        b.model.bn_mode = Axis::Sweep(vec![BnMode::All, BnMode::None]);
        let mut o = suite_config("sweep_optimizer.toml", seed, out);
        o.optimizer = Axis::Sweep(
            o.optimizer
                .values()
                .into_iter()
                .filter(|c| c.kind != OptimizerKind::momentum())
                .collect(),
        );
        sweeps.push(("activation".into(), a, seed));
        sweeps.push(("batchnorm".into(), b, seed));
        sweeps.push(("optimizer".into(), o, seed));
    }
    for (key, cfg, seed) in sweeps {
        let s = harness::sweep(&cfg, Path::new("."), OutputFormat::Both).unwrap();
        let entry = results.entry((key, seed)).or_default();
        for r in s.runs {
            entry.insert(r.summary.label.clone(), r.summary);
        }
    }
    (results, t.elapsed().as_secs_f64())
}

fn ac5(out: &mut Outcome, results: &Results) {
    let mut applicable = 0;
    let mut total = 0;
    let mut failures = Vec::new();
    for runs in results.values() {
        for r in runs.values() {
            total += 1;
            match &r.verdict {
                Verdict::Pass { .. } => applicable += 1,
                Verdict::Fail { .. } => {
                    applicable += 1;
                    failures.push(r.run_id.clone());
                }
                _ => {}
            }
        }
    }
    out.check(
        "AC5 convergence bound on the default suite",
        failures.is_empty(),
        format!("{total} runs, {applicable} with gamma_min > 0 and T = nB, failures: {failures:?}"),
    );

    let (setup, ds) = linear_control();
    let log = record_run(&setup, &ds).unwrap();
    let r = analyze(&log, None, &AnalyzerConfig::default()).unwrap();
    let (updates, losses) = quadratic(0.1, 200);
    let q = analyze_sequence(
        &[1.0],
        &updates,
        &losses,
        0.1,
        200,
        &AnalyzerConfig::default(),
    )
    .unwrap();
    let pass = |v: &Verdict| matches!(v, Verdict::Pass { .. });
    out.check(
        "AC5 convergence bound on controls with gamma_min > 0",
        pass(&r.verdict) && pass(&q.verdict),
        format!(
            "full-batch least squares: {:?}; quadratic η=0.1: {:?}",
            r.verdict, q.verdict
        ),
    );
}

fn ac6(out: &mut Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = AnalyzerConfig::default();
    let (mut eq_ok, mut strict_ok, mut any_sign_ok) = (0, 0, 0);
    let n = 1000;
    for _ in 0..n {
        let eta: f64 = rng.random_range(1e-4..1.0);
        let u2: f64 = rng.random_range(0.0..10.0);
        let loss: f64 = rng.random_range(1e-3..10.0);
        let rhs = |g: f64| 0.5 * eta * u2 + g * loss;

        let coherence = 0.5 * eta * u2 + rng.random_range(0.0..10.0);
        let g = gamma_from_scalars(coherence, u2, loss, eta, &cfg)
            .unwrap()
            .gamma
            .unwrap();
        eq_ok += ((coherence - rhs(g)).abs() <= 1e-13 * coherence) as usize;
        strict_ok += (coherence < rhs(g * (1.0 + 1e-6) + 1e-9)) as usize;

        let c2: f64 = rng.random_range(-10.0..10.0);
        let g2 = gamma_from_scalars(c2, u2, loss, eta, &cfg)
            .unwrap()
            .gamma
            .unwrap();
        let scale = c2.abs() + 0.5 * eta * u2 + (g2 * loss).abs();
        any_sign_ok += ((c2 - rhs(g2)).abs() <= 1e-13 * scale
            && c2 < rhs(g2 + g2.abs() * 1e-6 + 1e-9)
            && c2 < rhs(g2 + 1e-6 * (1.0 + g2.abs()))) as usize;
    }
    out.check(
        "AC6 maximality of gamma_k",
        eq_ok == n && strict_ok == n && any_sign_ok == n,
        format!(
            "{n} tuples with γ_k ≥ 0: equality {eq_ok}, violated above {strict_ok}; {n} tuples of either sign: {any_sign_ok}"
        ),
    );
}

fn ac7(out: &mut Outcome) {
    let mut ok = true;
    let mut combos = 0;
    for n in 1..=64 {
        for epochs in 1..=10 {
            for seed in [0u64, 17] {
                combos += 1;
                let seq: Vec<usize> = ReshuffleSampler::new(n, 1, seed)
                    .unwrap()
                    .take(n * epochs)
                    .collect();
                let mut counts = vec![0; n];
                for (e, chunk) in seq.chunks(n).enumerate() {
                    let mut sorted = chunk.to_vec();
                    sorted.sort_unstable();
                    ok &= sorted == (0..n).collect::<Vec<_>>();
                    ok &= chunk == epoch_permutation(seed, n, e as u64).as_slice();
                    chunk.iter().for_each(|&x| counts[x] += 1);
                }
                ok &= counts.iter().all(|&c| c == epochs);
            }
        }
    }
    let ds = common::golden_dataset();
    let plan = BatchPlan::new(&ds, 3, 1).unwrap();
    ok &= plan.len() == 2;
    out.check(
        "AC7 reshuffle sampler",
        ok,
        format!(
            "{combos} (n, B, seed) combinations: one permutation per epoch, B visits per batch"
        ),
    );
}

fn sha(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn ac8(out: &mut Outcome, dir: &Path) {
    let mut exact = true;
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::momentum(),
        OptimizerKind::adam(),
    ] {
        let (setup, ds) = common::blob_setup(kind, 0.05, StorageMode::Replay);
        let log = record_run(&setup, &ds).unwrap();
        exact &= log.replay(&ds, |_, _, _, _| Ok(())).is_ok();
    }
    let mut cfg = ExperimentConfig::desk_default("determinism", 4);
    cfg.epochs = 5;
    cfg.output_dir = dir.join("a");
    let a = harness::run(&cfg, Path::new("."), OutputFormat::Csv).unwrap();
    let mut snap = ExperimentConfig::load(&a.snapshot).unwrap();
    snap.output_dir = dir.join("b");
    let b = harness::run(&snap, Path::new("."), OutputFormat::Csv).unwrap();
    let (ha, hb) = (sha(&a.trajectory), sha(&b.trajectory));
    out.check(
        "AC8 determinism and replay",
        exact && ha == hb,
        format!(
            "replay bit-exact for sgd/momentum/adam: {exact}; snapshot rerun sha256 {} == {}",
            &ha[..16],
            &hb[..16]
        ),
    );
}

fn ac9(out: &mut Outcome, results: &Results, secs: f64) {
    let rate = |s: &RunSummary| s.median_rate_factor.unwrap_or(f64::NAN);
    let get = |key: &str, seed: u64, label: &str| results[&(key.to_string(), seed)][label].clone();
    let mut counts = [0usize; 3];
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let relu = get("activation", seed, "relu");
        let sig = get("activation", seed, "sigmoid");
        let a = relu.final_mean_loss < sig.final_mean_loss && rate(&relu) > rate(&sig);
        let all = get("batchnorm", seed, "all");
        let none = get("batchnorm", seed, "none");
        let b = rate(&none) < rate(&all);
        let sgd = get("optimizer", seed, "sgd");
        let adam = get("optimizer", seed, "adam");
        let c = rate(&adam) > rate(&sgd);
        for (i, ok) in [a, b, c].into_iter().enumerate() {
            counts[i] += ok as usize;
        }
        detail.push(format!(
            "seed {seed}: relu/sigmoid loss {:.3}/{:.3} rate {:.3}/{:.3}; bn all/none rate {:.3}/{:.3}; adam/sgd rate {:.3}/{:.3}",
            relu.final_mean_loss,
            sig.final_mean_loss,
            rate(&relu),
            rate(&sig),
            rate(&all),
            rate(&none),
            rate(&adam),
            rate(&sgd)
        ));
    }
    for line in &detail {
        println!("    {line}");
    }
    let names = [
        "(a) relu vs sigmoid",
        "(b) batch norm kept vs removed",
        "(c) adam vs sgd at eta=0.001",
    ];
    for (i, name) in names.iter().enumerate() {
        out.check(
            &format!("AC9 {name}"),
            counts[i] >= 2,
            format!("holds for {}/3 seeds", counts[i]),
        );
    }
    out.check(
        "AC9 runtime",
        secs <= 900.0,
        format!("suite took {secs:.0}s on this machine"),
    );
}

fn ac10(out: &mut Outcome, dir: &Path) {
    let mut lossless = true;
    let mut crc = true;
    for storage in [StorageMode::Full, StorageMode::Replay] {
        for dtype in [Dtype::F64, Dtype::F32] {
            let log = record_run(
                &common::golden_setup(storage, dtype),
                &common::golden_dataset(),
            )
            .unwrap();
            let bytes = encode(&log).unwrap();
            let p: PathBuf = dir.join(format!("{storage:?}{dtype:?}.trj"));
            log.write(&p).unwrap();
            lossless &= decode(&std::fs::read(&p).unwrap()).unwrap() == log;
            for pos in (0..bytes.len()).step_by(37) {
                let mut bad = bytes.clone();
                bad[pos] ^= 0x04;
                crc &= decode(&bad).is_err();
            }
        }
    }
    let log = record_run(
        &common::golden_setup(StorageMode::Full, Dtype::F64),
        &common::golden_dataset(),
    )
    .unwrap();
    let golden =
        std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/small_f64.trj"))
            .unwrap();
    let same = encode(&log).unwrap() == golden;
    out.check(
        "AC10 format fidelity",
        lossless && crc && same,
        format!("roundtrip lossless: {lossless}; corruption rejected: {crc}; golden bytes match: {same}"),
    );
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut out = Outcome { lines: Vec::new() };
    ac1(&mut out);
    ac2(&mut out);
    ac3(&mut out);
    ac4(&mut out);
    let (results, secs) = run_suite(&dir.path().join("suite"));
    ac5(&mut out, &results);
    ac6(&mut out);
    ac7(&mut out);
    ac8(&mut out, dir.path());
    ac9(&mut out, &results, secs);
    ac10(&mut out, dir.path());
    let failed: Vec<&String> = out
        .lines
        .iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, id)| id)
        .collect();
    println!(
        "acceptance: {} passed, {} failed",
        out.lines.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        for id in failed {
            println!("  failed: {id}");
        }
        std::process::exit(1);
    }
}
