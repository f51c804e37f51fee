//! Python bindings. Matrices cross the boundary as nested lists (row-major);
//! complex matrices as nested lists of `complex`.

use std::path::PathBuf;

use graybox_core::autodiff::LrSchedule;
use graybox_core::controller::{
    build_controller, solve, verify, ControlSolution, Controller, ControllerConfig, Gate,
    TargetSchedule,
};
use graybox_core::dataset::{build_dataset, zero_voltage_readings, Dataset, DatasetConfig};
use graybox_core::graybox::{
    evaluate, train_stage1, train_stage2, GrayboxConfig, ModelState, Stage1Config, Stage2Config,
};
use graybox_core::linalg::ComplexMatrix;
use graybox_core::simulator::{self, Mode, VoltageSequence};
use graybox_core::Error;
use ndarray::Array2;
use num_complex::Complex64;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e @ (Error::Divergence { .. } | Error::NoConvergence { .. }) => {
            PyRuntimeError::new_err(e.to_string())
        }
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().map_err(py_err)
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok(Array2::from_shape_vec((r, c), rows.concat()).expect("shape checked"))
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn to_complex_rows(m: &ComplexMatrix) -> Vec<Vec<Complex64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn to_complex(rows: Vec<Vec<Complex64>>) -> PyResult<ComplexMatrix> {
    let r = rows.len();
    if rows.iter().any(|row| row.len() != r) {
        return Err(PyValueError::new_err("expected a square matrix"));
    }
    Ok(Array2::from_shape_vec((r, r), rows.concat()).expect("shape checked"))
}

/// Physical description of the simulated chip.
#[pyclass(name = "ChipParams", from_py_object)]
#[derive(Clone)]
struct PyChipParams {
    inner: simulator::ChipParams,
}

#[pymethods]
impl PyChipParams {
    /// Bundled defaults.
    #[new]
    fn new() -> PyResult<Self> {
        Ok(PyChipParams {
            inner: graybox_core::assets::chip_params().map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyChipParams {
            inner: simulator::ChipParams::from_toml_str(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn electrodes(&self) -> usize {
        self.inner.electrodes()
    }

    #[getter]
    fn v_max(&self) -> f64 {
        self.inner.v_max
    }

    #[getter]
    fn eps(&self) -> Vec<f64> {
        self.inner.eps.clone()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }
}

/// Runs the chip: `voltages[t][e]` in volts sampled every `dt` ms. Returns
/// `channels[t][c]`.
#[pyfunction]
#[pyo3(signature = (voltages, dt, mode, params=None))]
fn simulate(
    voltages: Vec<Vec<f64>>,
    dt: f64,
    mode: &str,
    params: Option<PyChipParams>,
) -> PyResult<Vec<Vec<f64>>> {
    let params = match params {
        Some(p) => p.inner,
        None => PyChipParams::new()?.inner,
    };
    let v = VoltageSequence {
        dt,
        samples: to_array(voltages)?,
    };
    let trace = simulator::simulate(&v, &params, parse_mode(mode)?).map_err(py_err)?;
    Ok(to_rows(&trace.channels))
}

/// Phase-invariant infidelity between two unitaries.
#[pyfunction]
fn gate_infidelity(u: Vec<Vec<Complex64>>, v: Vec<Vec<Complex64>>) -> PyResult<f64> {
    graybox_core::metrics::gate_infidelity(&to_complex(u)?, &to_complex(v)?).map_err(py_err)
}

/// Matrix of a named gate (`"X13"`, `"RX13(pi/4)"`, ...) on `n` waveguides.
#[pyfunction]
#[pyo3(signature = (symbol, n=3))]
fn gate_matrix(symbol: &str, n: usize) -> PyResult<Vec<Vec<Complex64>>> {
    let g = Gate::parse(symbol).map_err(py_err)?;
    Ok(to_complex_rows(&g.matrix(n).map_err(py_err)?))
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: Dataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn voltages(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        self.example(index).map(|e| to_rows(&e.voltages.samples))
    }

    fn trace(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        self.example(index).map(|e| to_rows(&e.trace.channels))
    }
}

impl PyDataset {
    fn example(&self, index: usize) -> PyResult<&graybox_core::dataset::Example> {
        self.inner
            .examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no example {index}")))
    }
}

/// Simulates random pulse trains; returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (count, split=0.9, horizon=20.0, dt=0.2, seed=0, mode="classical", params=None))]
fn generate_dataset(
    count: usize,
    split: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
    mode: &str,
    params: Option<PyChipParams>,
) -> PyResult<(PyDataset, PyDataset)> {
    let params = match params {
        Some(p) => p.inner,
        None => PyChipParams::new()?.inner,
    };
    let cfg = DatasetConfig {
        count,
        split,
        horizon,
        dt,
        seed,
        mode: parse_mode(mode)?,
    };
    let (a, b) = build_dataset(&cfg, &params).map_err(py_err)?;
    Ok((PyDataset { inner: a }, PyDataset { inner: b }))
}

/// The graybox model: recurrent blackbox plus fixed physics layers.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (mode="classical", seed=0, params=None))]
    fn new(mode: &str, seed: u64, params: Option<PyChipParams>) -> PyResult<Self> {
        let params = match params {
            Some(p) => p.inner,
            None => PyChipParams::new()?.inner,
        };
        let cfg = GrayboxConfig::for_chip(&params, parse_mode(mode)?);
        Ok(PyModel {
            inner: ModelState::new(cfg, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: ModelState::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.config().mode.as_str()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Fits the static parameters to the chip's zero-voltage readings.
    /// Returns the static MSE.
    #[pyo3(signature = (params=None, iterations=3000, restarts=8))]
    fn train_stage1(
        &mut self,
        py: Python<'_>,
        params: Option<PyChipParams>,
        iterations: usize,
        restarts: usize,
    ) -> PyResult<f64> {
        let params = match params {
            Some(p) => p.inner,
            None => PyChipParams::new()?.inner,
        };
        let mode = self.inner.config().mode;
        let mut cfg = Stage1Config {
            iterations,
            restarts,
            ..Default::default()
        };
        if let LrSchedule::Exponential { iterations: it, .. } = &mut cfg.optimizer.schedule {
            *it = iterations;
        }
        let model = &mut self.inner;
        let report = py
            .detach(|| {
                let readings = zero_voltage_readings(&params, mode)?;
                let r = train_stage1(model, &readings, &cfg);
                model.meta.params_digest = Some(params.digest());
                r
            })
            .map_err(py_err)?;
        Ok(report.mse)
    }

    /// Fits the recurrent model; returns the per-iteration training loss.
    #[pyo3(signature = (train, iterations=2000, lr=3e-3, final_lr=1e-4))]
    fn train_stage2(
        &mut self,
        py: Python<'_>,
        train: &PyDataset,
        iterations: usize,
        lr: f64,
        final_lr: f64,
    ) -> PyResult<Vec<f64>> {
        let mut cfg = Stage2Config {
            iterations,
            ..Default::default()
        };
        cfg.optimizer.lr = lr;
        cfg.optimizer.schedule = LrSchedule::Exponential {
            final_lr,
            iterations,
        };
        let model = &mut self.inner;
        let set = &train.inner;
        py.detach(|| train_stage2(model, set, &cfg)).map_err(py_err)
    }

    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset) -> PyResult<f64> {
        let (model, set) = (&self.inner, &dataset.inner);
        Ok(py.detach(|| evaluate(model, set)).map_err(py_err)?.mse)
    }

    /// Per-layer outputs for one voltage sequence: `h_interaction` and
    /// `h_total` (rad/m), `u`, `ideal_outputs`, `measured_outputs`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        voltages: Vec<Vec<f64>>,
        dt: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let v = VoltageSequence {
            dt,
            samples: to_array(voltages)?,
        };
        let b = self.inner.forward(&v).map_err(py_err)?;
        let d = PyDict::new(py);
        let herm = |hs: &[graybox_core::linalg::HermitianMatrix]| -> Vec<Vec<Vec<Complex64>>> {
            hs.iter().map(|h| to_complex_rows(h.as_matrix())).collect()
        };
        d.set_item("h_interaction", herm(&b.h_interaction))?;
        d.set_item("h_total", herm(&b.h_total))?;
        let u: Vec<_> = b.u.iter().map(to_complex_rows).collect();
        d.set_item("u", u)?;
        d.set_item("ideal_outputs", to_rows(&b.ideal_outputs))?;
        d.set_item("measured_outputs", to_rows(&b.measured_outputs.channels))?;
        Ok(d)
    }
}

/// Target gates over time.
#[pyclass(name = "Schedule", from_py_object)]
#[derive(Clone)]
struct PySchedule {
    inner: TargetSchedule,
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PySchedule {
            inner: TargetSchedule::from_toml_str(text).map_err(py_err)?,
        })
    }

    /// The bundled schedule for `mode`.
    #[staticmethod]
    fn bundled(mode: &str) -> PyResult<Self> {
        let inner = match parse_mode(mode)? {
            Mode::Classical => graybox_core::assets::schedule_classical(),
            Mode::Quantum => graybox_core::assets::schedule_quantum(),
        }
        .map_err(py_err)?;
        Ok(PySchedule { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    fn labels(&self) -> Vec<String> {
        self.inner
            .segments
            .iter()
            .map(|s| s.label.clone())
            .collect()
    }
}

#[pyclass(name = "Solution", from_py_object)]
#[derive(Clone)]
struct PySolution {
    inner: ControlSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn voltages(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.voltages.samples)
    }

    #[getter]
    fn infidelity(&self) -> Vec<f64> {
        self.inner.infidelity.clone()
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.inner.loss_history.clone()
    }

    #[getter]
    fn final_mse(&self) -> f64 {
        self.inner.final_mse
    }

    #[getter]
    fn steady_mask(&self) -> Vec<bool> {
        self.inner.steady_mask.clone()
    }

    fn worst_steady_infidelity(&self) -> f64 {
        self.inner.worst_steady_infidelity()
    }

    /// Replays the voltages on the simulator.
    #[pyo3(signature = (params=None))]
    fn verify<'py>(
        &self,
        py: Python<'py>,
        params: Option<PyChipParams>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let params = match params {
            Some(p) => p.inner,
            None => PyChipParams::new()?.inner,
        };
        let r = verify(&self.inner, &params).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("infidelity", r.infidelity)?;
        d.set_item("worst_steady", r.worst_steady)?;
        d.set_item("worst_steady_model", r.worst_steady_model)?;
        d.set_item("model_divergence", r.model_divergence)?;
        d.set_item("target_mse", r.target_mse)?;
        Ok(d)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv(None)
    }
}

/// Front-end network that inverts a frozen, trained model.
#[pyclass(name = "Controller", from_py_object)]
#[derive(Clone)]
struct PyController {
    inner: Controller,
}

#[pymethods]
impl PyController {
    #[new]
    #[pyo3(signature = (model, hidden=60, v_max=10.0, lr=5e-3, final_lr=1e-4, iterations=500, seed=0))]
    fn new(
        model: &PyModel,
        hidden: usize,
        v_max: f64,
        lr: f64,
        final_lr: f64,
        iterations: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = ControllerConfig {
            hidden,
            v_max,
            seed,
            ..Default::default()
        };
        cfg.optimizer.lr = lr;
        cfg.optimizer.schedule = LrSchedule::Exponential {
            final_lr,
            iterations,
        };
        Ok(PyController {
            inner: build_controller(cfg, model.inner.clone()).map_err(py_err)?,
        })
    }

    fn voltages(&self, schedule: &PySchedule) -> PyResult<Vec<Vec<f64>>> {
        let v = self.inner.voltages(&schedule.inner).map_err(py_err)?;
        Ok(to_rows(&v.samples))
    }

    #[pyo3(signature = (schedule, iterations=500))]
    fn solve(
        &mut self,
        py: Python<'_>,
        schedule: &PySchedule,
        iterations: usize,
    ) -> PyResult<PySolution> {
        let (ctrl, sched) = (&mut self.inner, &schedule.inner);
        let inner = py
            .detach(|| solve(ctrl, sched, iterations))
            .map_err(py_err)?;
        Ok(PySolution { inner })
    }
}

#[pymodule]
fn graybox(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChipParams>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(gate_infidelity, m)?)?;
    m.add_function(wrap_pyfunction!(gate_matrix, m)?)?;
    Ok(())
}
