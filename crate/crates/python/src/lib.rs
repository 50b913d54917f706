//! Python bindings: GP fitting and prediction, the quantile and tightening
//! helpers, and whole experiment runs driven by a TOML config.

use std::path::PathBuf;

use nalgebra::Matrix2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ccmppi::dynamics::{step_nominal, NominalParams};
use ccmppi::gp::KernelParams;
use ccmppi::harness::experiment::make_scenario;
use ccmppi::harness::{run_experiment, train_models, ExperimentConfig, PlannerKind, TrainedModels};
use ccmppi::mppi::trajectory_weights;
use ccmppi::types::{Control, RobotState};
use ccmppi::uncertainty::QuantileTables;

fn to_py(e: ccmppi::Error) -> PyErr {
    match e {
        ccmppi::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Exact multi-output GP with squared-exponential ARD kernels.
#[pyclass(name = "GpModel", module = "pyccmppi", frozen)]
struct PyGpModel {
    inner: ccmppi::gp::GpModel,
}

#[pymethods]
impl PyGpModel {
    /// `kernels` holds one `(signal_var, [l0, l1, l2, l3], noise_var)` per output.
    #[staticmethod]
    fn fit(
        inputs: Vec<[f64; 4]>,
        outputs: Vec<Vec<f64>>,
        kernels: Vec<(f64, [f64; 4], f64)>,
    ) -> PyResult<Self> {
        let kernels: Vec<KernelParams> = kernels
            .into_iter()
            .map(|(signal_var, lengthscales, noise_var)| KernelParams {
                signal_var,
                lengthscales,
                noise_var,
            })
            .collect();
        let inner = ccmppi::gp::GpModel::fit(&inputs, &outputs, &kernels).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ccmppi::gp::GpModel::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// `[(mean, variance), ...]`, one pair per output.
    fn predict(&self, query: [f64; 4]) -> Vec<(f64, f64)> {
        self.inner.predict(&query).iter().map(|p| (p.mean, p.variance)).collect()
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.n_train()
    }

    #[getter]
    fn n_outputs(&self) -> usize {
        self.inner.n_outputs()
    }
}

/// A configured experiment with its trained models.
#[pyclass(name = "Experiment", module = "pyccmppi", frozen)]
struct PyExperiment {
    cfg: ExperimentConfig,
    models: TrainedModels,
}

#[pymethods]
impl PyExperiment {
    /// Parses `config` (TOML text, defaults when omitted) and trains the models.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(py: Python<'_>, config: Option<&str>) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => ExperimentConfig::from_toml_str(text).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        let models = py.detach(|| train_models(&cfg)).map_err(to_py)?;
        Ok(Self { cfg, models })
    }

    #[getter]
    fn config_hash(&self) -> PyResult<String> {
        self.cfg.hash_hex().map_err(to_py)
    }

    /// Runs one `"tracking"` or `"avoidance"` scenario and returns its metrics.
    #[pyo3(signature = (scenario, planner="gp", seed=0))]
    fn run<'py>(&self, py: Python<'py>, scenario: &str, planner: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let kind: PlannerKind = planner.parse().map_err(to_py)?;
        let out = py
            .detach(|| {
                let sc = make_scenario(&self.cfg, scenario, seed)?;
                run_experiment(&self.cfg, &self.models, kind, &sc, seed)
            })
            .map_err(to_py)?;
        let m = out.metrics;
        let d = PyDict::new(py);
        d.set_item("planner", m.planner.to_string())?;
        d.set_item("scenario", m.scenario)?;
        d.set_item("terrain", m.terrain)?;
        d.set_item("seed", m.seed)?;
        d.set_item("rmse", m.rmse)?;
        d.set_item("success", m.success)?;
        d.set_item("time_to_goal", m.time_to_goal)?;
        d.set_item("min_obstacle_clearance", m.min_obstacle_clearance)?;
        d.set_item("mean_speed", m.mean_speed)?;
        d.set_item("collision_count", m.collision_count)?;
        d.set_item("lane_keeping", m.lane_keeping)?;
        d.set_item("ticks", m.ticks)?;
        d.set_item("aborted", m.aborted)?;
        d.set_item("latency_median_ms", m.latency.median_ms)?;
        let path: Vec<(f64, f64)> = out.ticks.iter().map(|t| (t.state.x, t.state.y)).collect();
        d.set_item("path", path)?;
        Ok(d)
    }
}

/// Chi-squared quantile with two degrees of freedom.
#[pyfunction]
fn chi2_quantile_2dof(p: f64) -> PyResult<f64> {
    ccmppi::uncertainty::chi2_quantile_2dof(p).map_err(to_py)
}

#[pyfunction]
fn normal_quantile(p: f64) -> PyResult<f64> {
    ccmppi::uncertainty::normal_quantile(p).map_err(to_py)
}

/// Lane radius shrunk for the position covariance `cov` at confidence `p_x`.
#[pyfunction]
fn tighten_lane_radius(r: f64, cov: [[f64; 2]; 2], p_x: f64) -> PyResult<f64> {
    let q = QuantileTables::new(p_x).map_err(to_py)?;
    let c = Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    ccmppi::uncertainty::tighten_lane_radius(r, &c, &q).map_err(to_py)
}

#[pyfunction]
fn project_simplex(z: Vec<f64>) -> PyResult<Vec<f64>> {
    ccmppi::terrain::project_simplex(&z).map_err(to_py)
}

/// Softmax MPPI weights; returns `(weights, nonfinite_count)`.
#[pyfunction]
fn mppi_weights(costs: Vec<f64>, lam: f64) -> (Vec<f64>, usize) {
    trajectory_weights(&costs, lam)
}

/// One step of the nominal model. `state` is `(x, y, theta, v, omega)`.
#[pyfunction]
#[pyo3(signature = (state, control, tau_v=0.5, tau_omega=0.35, dt=0.05))]
fn nominal_step(state: [f64; 5], control: [f64; 2], tau_v: f64, tau_omega: f64, dt: f64) -> PyResult<[f64; 5]> {
    let p = NominalParams { tau_v, tau_omega, dt };
    p.validate().map_err(to_py)?;
    let s = RobotState::new(state[0], state[1], state[2], state[3], state[4]);
    let n = step_nominal(&s, &Control::new(control[0], control[1]), &p);
    Ok([n.x, n.y, n.theta, n.v, n.omega])
}

#[pymodule]
fn pyccmppi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGpModel>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(chi2_quantile_2dof, m)?)?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(tighten_lane_radius, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(mppi_weights, m)?)?;
    m.add_function(wrap_pyfunction!(nominal_step, m)?)?;
    Ok(())
}
