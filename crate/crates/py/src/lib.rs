//! Python bindings for the `molakd` crate.

use std::path::PathBuf;

use molakd::autograd::Tape;
use molakd::{gradcheck, losses, selftest, teacher, Error, Stage, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(molakd, NonFiniteError, PyException);
create_exception!(molakd, CheckpointError, PyIOError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => NonFiniteError::new_err(msg),
        Error::Checkpoint(_) | Error::UnknownParameter(_) => CheckpointError::new_err(msg),
        Error::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols().max(1)).map(|r| r.to_vec()).collect()
}

/// Training configuration; constructed from JSON or a preset.
#[pyclass(name = "TrainConfig", module = "molakd", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: molakd::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Parses a JSON document. Missing keys take their defaults.
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        let inner = molakd::TrainConfig::from_json_str(json).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn default() -> Self {
        Self { inner: molakd::TrainConfig::default() }
    }

    #[staticmethod]
    fn minimal() -> Self {
        Self { inner: molakd::TrainConfig::minimal() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = molakd::TrainConfig::load(&path).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.resolved_rank()
    }

    #[getter]
    fn num_teachers(&self) -> usize {
        self.inner.num_teachers()
    }

    #[getter]
    fn general_adapters(&self) -> usize {
        self.inner.general_adapters
    }

    #[getter]
    fn stage(&self) -> String {
        match self.inner.stage {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
        .to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn lambda1(&self) -> f64 {
        self.inner.lambda1
    }

    #[getter]
    fn lambda2(&self) -> f64 {
        self.inner.lambda2
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.inner.to_json())
    }
}

#[pyclass(name = "Trainer", module = "molakd", unsendable)]
struct PyTrainer {
    inner: molakd::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        let inner = molakd::Trainer::new(config.inner.clone()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Number of optimizer steps taken so far.
    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// Takes one optimizer step and returns its losses and router entropies.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.train_step().map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("step", r.step)?;
        d.set_item("gen", r.losses.gen)?;
        d.set_item("cg", r.losses.cg)?;
        d.set_item("fg", r.losses.fg)?;
        d.set_item("mb", r.losses.mb)?;
        d.set_item("total", r.losses.total)?;
        let entropy: Vec<(f64, f64)> = r.router_entropy.iter().map(|e| (e[0], e[1])).collect();
        d.set_item("router_entropy", entropy)?;
        d.set_item("teacher_cosine", r.teacher_cosine.clone())?;
        d.set_item("metrics", self.inner.metrics_line(&r))?;
        Ok(d)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py)
    }

    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load_checkpoint(&path).map_err(to_py)
    }

    /// Routing histogram over the first `samples` dataset samples, as CSV.
    #[pyo3(signature = (samples = 64))]
    fn route_stats(&self, samples: usize) -> PyResult<String> {
        if samples == 0 {
            return Err(PyValueError::new_err("samples must be positive"));
        }
        Ok(self.inner.route_stats(samples).map_err(to_py)?.to_csv())
    }

    /// Per-teacher token importance scores on one dataset sample.
    #[pyo3(signature = (index = 0))]
    fn score_maps(&mut self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner.score_maps(index).map_err(to_py)
    }
}

/// Rearranges a `g×g×C` grid into `(g/r)×(g/r)×(C·r²)`.
#[pyfunction]
fn pixel_unshuffle(grid: Vec<Vec<Vec<f64>>>, factor: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let g = grid.len();
    let c = grid.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if grid.iter().any(|r| r.len() != g || r.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("grid must be g×g×C"));
    }
    let data: Vec<f64> = grid.into_iter().flatten().flatten().collect();
    let t = Tensor::new(vec![g, g, c], data).map_err(to_py)?;
    let out = teacher::pixel_unshuffle(&t, factor).map_err(to_py)?;
    let (h, w, k) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    let d = out.data();
    Ok((0..h)
        .map(|i| (0..w).map(|j| d[(i * w + j) * k..(i * w + j + 1) * k].to_vec()).collect())
        .collect())
}

/// Importance of each teacher token with respect to the instruction rows.
#[pyfunction]
fn token_importance(teacher_tokens: Vec<Vec<f64>>, instruction: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let (t, i) = (rows_to_tensor(teacher_tokens)?, rows_to_tensor(instruction)?);
    let mut tape = Tape::new();
    let (vt, vi) = (tape.constant(t), tape.constant(i));
    let s = losses::token_importance(&mut tape, vt, vi).map_err(to_py)?;
    Ok(tape.value(s).to_vec())
}

/// Compares analytic and central-difference gradients per parameter group.
/// Returns `(passed, [(group, max_rel_error, worst_parameter)])`.
#[pyfunction]
#[pyo3(signature = (config, eps = gradcheck::GRADCHECK_EPS))]
fn gradcheck_model(config: &PyTrainConfig, eps: f64) -> PyResult<(bool, Vec<(String, f64, String)>)> {
    let report = gradcheck::gradcheck_model(&config.inner, eps).map_err(to_py)?;
    let groups = report
        .groups
        .iter()
        .map(|g| (g.group.name().to_string(), g.max_rel_error, g.worst.clone()))
        .collect();
    Ok((report.passed(), groups))
}

/// Runs the built-in property checks; one `PASS`/`FAIL` line each.
#[pyfunction]
fn run_selftest() -> Vec<String> {
    selftest::run_selftest().iter().map(|r| r.line()).collect()
}

/// Softmax over each row, as computed by the autodiff engine.
#[pyfunction]
fn softmax_rows(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.constant(rows_to_tensor(rows)?);
    let y = tape.softmax_rows(x).map_err(to_py)?;
    let shape = tape.shape(y).to_vec();
    let t = Tensor::new(shape, tape.value(y).to_vec()).map_err(to_py)?;
    Ok(tensor_to_rows(&t))
}

#[pymodule(name = "molakd")]
fn molakd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(pixel_unshuffle, m)?)?;
    m.add_function(wrap_pyfunction!(token_importance, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_model, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add("NonFiniteError", m.py().get_type::<NonFiniteError>())?;
    m.add("CheckpointError", m.py().get_type::<CheckpointError>())?;
    Ok(())
}
