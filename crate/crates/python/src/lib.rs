//! Python bindings: datasets, trajectory recording and analysis, and the
//! experiment harness.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajlens::data::{self, Dataset, SyntheticKind, Task};
use trajlens::harness::{self, ExperimentConfig, OutputFormat, RunArtifacts};
use trajlens::regularity::{self, AnalyzerConfig, RegularityReport};
use trajlens::tensor::Tensor;
use trajlens::trajectory::{self, TrainingSetup, TrajectoryLog};
use trajlens::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Config(_)
        | Error::Dimension(_)
        | Error::NonFinite { .. }
        | Error::Layout(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    /// Synthetic data: `kind` is `gaussian_blobs`, `two_spirals` or
    /// `random_regression`.
    #[staticmethod]
    #[pyo3(signature = (kind, n, dims, seed, classes=3, separation=3.0, noise=None, turns=1.5, outputs=1, hidden=16))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        kind: &str,
        n: usize,
        dims: usize,
        seed: u64,
        classes: usize,
        separation: f64,
        noise: Option<f64>,
        turns: f64,
        outputs: usize,
        hidden: usize,
    ) -> PyResult<Self> {
        let kind = match kind {
            "gaussian_blobs" => SyntheticKind::GaussianBlobs {
                classes,
                separation,
            },
            "two_spirals" => SyntheticKind::TwoSpirals {
                noise: noise.unwrap_or(0.05),
                turns,
            },
            "random_regression" => SyntheticKind::RandomRegression {
                outputs,
                hidden,
                noise: noise.unwrap_or(0.0),
            },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown synthetic kind {other:?}"
                )))
            }
        };
        data::make_synthetic(kind, n, dims, seed)
            .map(Self)
            .map_err(py_err)
    }

    /// Rows of features plus class indices (`classes` given) or regression
    /// target rows.
    #[staticmethod]
    #[pyo3(signature = (inputs, targets, classes=None))]
    fn from_rows(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        classes: Option<usize>,
    ) -> PyResult<Self> {
        let n = inputs.len();
        let d = inputs.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || inputs.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err(
                "inputs must be a non-empty rectangular list of rows",
            ));
        }
        let x = Tensor::new(vec![n, d], inputs.concat()).map_err(py_err)?;
        let (y, task) = match classes {
            Some(classes) => {
                if targets.iter().any(|t| t.len() != 1) {
                    return Err(PyValueError::new_err(
                        "class targets must be one value per row",
                    ));
                }
                (
                    Tensor::new(vec![targets.len()], targets.concat()).map_err(py_err)?,
                    Task::Classification { classes },
                )
            }
            None => {
                let o = targets.first().map_or(0, Vec::len);
                if targets.iter().any(|t| t.len() != o) {
                    return Err(PyValueError::new_err("targets must be rectangular"));
                }
                (
                    Tensor::new(vec![targets.len(), o], targets.concat()).map_err(py_err)?,
                    Task::Regression,
                )
            }
        };
        Dataset::new(x, y, task).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, classification=true))]
    fn load_csv(path: PathBuf, classification: bool) -> PyResult<Self> {
        data::load_csv(&path, classification)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        data::load_idx(&images, &labels).map(Self).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.0.sample_shape().to_vec()
    }

    fn digest(&self) -> String {
        hex(&self.0.digest())
    }
}

#[pyclass(name = "Report", frozen)]
struct PyReport(RegularityReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }
    #[getter]
    fn gamma_series(&self) -> Vec<Option<f64>> {
        self.0.gamma_series.clone()
    }
    #[getter]
    fn rate_factor_series(&self) -> Vec<Option<f64>> {
        self.0.rate_factor_series.clone()
    }
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.0.losses.clone()
    }
    #[getter]
    fn coherence(&self) -> Vec<f64> {
        self.0.coherence.clone()
    }
    #[getter]
    fn gamma_min(&self) -> Option<f64> {
        self.0.gamma_min
    }
    #[getter]
    fn valid_steps(&self) -> usize {
        self.0.valid_steps
    }
    #[getter]
    fn violation_fraction(&self) -> f64 {
        self.0.violation_fraction
    }
    #[getter]
    fn traj_sq_dist(&self) -> f64 {
        self.0.traj_sq_dist
    }
    #[getter]
    fn avg_loss_gap(&self) -> f64 {
        self.0.avg_loss_gap
    }
    #[getter]
    fn bound_rhs(&self) -> Option<f64> {
        self.0.bound_rhs
    }
    #[getter]
    fn bound_holds(&self) -> bool {
        self.0.bound_holds
    }
    #[getter]
    fn principle_satisfied(&self) -> bool {
        self.0.principle_satisfied()
    }
    #[getter]
    fn median_rate_factor(&self) -> Option<f64> {
        self.0.median_rate_factor()
    }
    /// `PASS`, `FAIL`, or why the bound was not checked.
    #[getter]
    fn verdict(&self) -> &'static str {
        self.0.verdict.label()
    }

    fn epoch_csv(&self) -> String {
        regularity::epoch_csv(&self.0.per_epoch)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(steps={}, gamma_min={:?}, verdict={:?})",
            self.0.steps,
            self.0.gamma_min,
            self.0.verdict.label()
        )
    }
}

fn analyzer(loss_infimum: f64, gap_tolerance: f64, window_end: Option<usize>) -> AnalyzerConfig {
    AnalyzerConfig {
        loss_infimum,
        gap_tolerance,
        window_end,
    }
}

#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory(TrajectoryLog);

#[pymethods]
impl PyTrajectory {
    /// Trains with a JSON-encoded training setup and records the run.
    #[staticmethod]
    fn record(py: Python<'_>, setup_json: &str, dataset: &PyDataset) -> PyResult<Self> {
        let setup: TrainingSetup = serde_json::from_str(setup_json)
            .map_err(|e| PyValueError::new_err(format!("setup: {e}")))?;
        py.detach(|| trajectory::record_run(&setup, &dataset.0))
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        TrajectoryLog::read(&path).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        trajectory::decode(data).map(Self).map_err(py_err)
    }

    fn to_bytes(&self) -> PyResult<Vec<u8>> {
        trajectory::encode(&self.0).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.0.meta.eta
    }
    #[getter]
    fn n_batches(&self) -> usize {
        self.0.meta.n_batches
    }
    #[getter]
    fn epochs(&self) -> usize {
        self.0.meta.epochs
    }
    #[getter]
    fn has_updates(&self) -> bool {
        self.0.has_updates()
    }
    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.0.steps.iter().map(|s| s.loss).collect()
    }
    #[getter]
    fn batch_indices(&self) -> Vec<usize> {
        self.0.steps.iter().map(|s| s.xi).collect()
    }
    #[getter]
    fn theta0(&self) -> Vec<f64> {
        self.0.theta0.clone()
    }
    #[getter]
    fn theta_t(&self) -> Vec<f64> {
        self.0.theta_t.clone()
    }
    fn setup_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0.setup).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Checks of `θ_k − θ_{k+1} = ηU_k`; `None` for logs without stored
    /// updates.
    fn update_identity<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(id) = self.0.update_identity() else {
            return Ok(None);
        };
        let d = PyDict::new(py);
        d.set_item("max_scaled_error", id.max_scaled_error)?;
        d.set_item("exact_differences", id.exact_differences)?;
        d.set_item("coordinates_checked", id.coordinates_checked)?;
        d.set_item("reconstruction_error", id.reconstruction_error)?;
        d.set_item("stepwise_replay_exact", id.stepwise_replay_exact)?;
        Ok(Some(d))
    }

    /// Re-executes training and returns the regenerated losses; raises if
    /// any differs from the stored value.
    fn replay_losses(&self, py: Python<'_>, dataset: &PyDataset) -> PyResult<Vec<f64>> {
        py.detach(|| {
            let mut out = Vec::with_capacity(self.0.len());
            self.0
                .replay(&dataset.0, |_, _, _, loss| {
                    out.push(loss);
                    Ok(())
                })
                .map(|_| out)
        })
        .map_err(py_err)
    }

    #[pyo3(signature = (dataset=None, loss_infimum=0.0, gap_tolerance=1e-8, window_end=None))]
    fn analyze(
        &self,
        py: Python<'_>,
        dataset: Option<&PyDataset>,
        loss_infimum: f64,
        gap_tolerance: f64,
        window_end: Option<usize>,
    ) -> PyResult<PyReport> {
        let cfg = analyzer(loss_infimum, gap_tolerance, window_end);
        let ds = dataset.map(|d| &d.0);
        py.detach(|| regularity::analyze(&self.0, ds, &cfg))
            .map(PyReport)
            .map_err(py_err)
    }
}

#[pyclass(name = "Experiment")]
struct PyExperiment(ExperimentConfig);

fn artifacts_dict<'py>(py: Python<'py>, a: &RunArtifacts) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("run_id", &a.summary.run_id)?;
    d.set_item("label", &a.summary.label)?;
    d.set_item("dir", &a.dir)?;
    d.set_item("trajectory", &a.trajectory)?;
    d.set_item("report", &a.report)?;
    d.set_item("epochs_csv", &a.epochs_csv)?;
    d.set_item("plots", &a.plots)?;
    d.set_item("snapshot", &a.snapshot)?;
    d.set_item("final_mean_loss", a.summary.final_mean_loss)?;
    d.set_item("median_rate_factor", a.summary.median_rate_factor)?;
    d.set_item("gamma_min", a.summary.gamma_min)?;
    d.set_item("verdict", a.summary.verdict.label())?;
    Ok(d)
}

fn output_format(s: &str) -> PyResult<OutputFormat> {
    match s {
        "csv" => Ok(OutputFormat::Csv),
        "svg" => Ok(OutputFormat::Svg),
        "both" => Ok(OutputFormat::Both),
        other => Err(PyValueError::new_err(format!(
            "format must be csv, svg or both, got {other:?}"
        ))),
    }
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(Self).map_err(py_err)
    }

    /// Residual MLP on two spirals with the desk-scale defaults.
    #[staticmethod]
    fn desk_default(name: &str, seed: u64) -> Self {
        Self(ExperimentConfig::desk_default(name, seed))
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.0.output_dir = dir;
    }

    #[setter]
    fn set_epochs(&mut self, epochs: usize) {
        self.0.epochs = epochs;
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self(self.0.clone().with_seed(seed))
    }

    fn varying_axes(&self) -> Vec<&'static str> {
        self.0.varying_axes()
    }

    fn dataset(&self) -> PyResult<PyDataset> {
        self.0
            .data
            .load(self.0.seeds.data_seed, Path::new("."))
            .map(PyDataset)
            .map_err(py_err)
    }

    /// JSON training setup for this (non-sweep) config on `dataset`.
    fn training_setup_json(&self, dataset: &PyDataset) -> PyResult<String> {
        let setup = self.0.training_setup(&dataset.0).map_err(py_err)?;
        serde_json::to_string(&setup).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[pyo3(signature = (format="both"))]
    fn run<'py>(&self, py: Python<'py>, format: &str) -> PyResult<Bound<'py, PyDict>> {
        let fmt = output_format(format)?;
        let a = py
            .detach(|| harness::run(&self.0, Path::new("."), fmt))
            .map_err(py_err)?;
        artifacts_dict(py, &a)
    }

    #[pyo3(signature = (format="both"))]
    fn sweep<'py>(&self, py: Python<'py>, format: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let fmt = output_format(format)?;
        let s = py
            .detach(|| harness::sweep(&self.0, Path::new("."), fmt))
            .map_err(py_err)?;
        s.runs.iter().map(|a| artifacts_dict(py, a)).collect()
    }
}

/// Largest γ for which the regularity inequality holds at one step, or
/// `None` when the loss gap is within tolerance.
#[pyfunction]
#[pyo3(signature = (theta_k, theta_t, update, loss, eta, loss_infimum=0.0, gap_tolerance=1e-8))]
fn gamma_step(
    theta_k: Vec<f64>,
    theta_t: Vec<f64>,
    update: Vec<f64>,
    loss: f64,
    eta: f64,
    loss_infimum: f64,
    gap_tolerance: f64,
) -> PyResult<Option<f64>> {
    let cfg = analyzer(loss_infimum, gap_tolerance, None);
    regularity::gamma_step(&theta_k, &theta_t, &update, loss, eta, &cfg)
        .map(|s| s.gamma)
        .map_err(py_err)
}

#[pyfunction]
fn bound_rhs(traj_sq_dist: f64, eta: f64, gamma: f64, steps: usize) -> f64 {
    regularity::bound_rhs(traj_sq_dist, eta, gamma, steps)
}

/// Analyzes a trajectory given as θ_0, per-step updates and losses.
#[pyfunction]
#[pyo3(signature = (theta0, updates, losses, eta, n_batches, loss_infimum=0.0, gap_tolerance=1e-8))]
fn analyze_sequence(
    theta0: Vec<f64>,
    updates: Vec<Vec<f64>>,
    losses: Vec<f64>,
    eta: f64,
    n_batches: usize,
    loss_infimum: f64,
    gap_tolerance: f64,
) -> PyResult<PyReport> {
    let cfg = analyzer(loss_infimum, gap_tolerance, None);
    regularity::analyze_sequence(&theta0, &updates, &losses, eta, n_batches, &cfg)
        .map(PyReport)
        .map_err(py_err)
}

#[pyfunction]
fn epoch_permutation(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    data::epoch_permutation(seed, n, epoch)
}

#[pymodule]
fn trajlens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", harness::LIBRARY_VERSION)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(gamma_step, m)?)?;
    m.add_function(wrap_pyfunction!(bound_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(epoch_permutation, m)?)?;
    Ok(())
}
