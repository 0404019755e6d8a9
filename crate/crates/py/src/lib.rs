//! Python bindings exposing the load model, signal tools, and the
//! closed-loop simulator.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use demand_dispatch::control;
use demand_dispatch::load_model::{LoadState, Mode, TransitionModel};
use demand_dispatch::mean_field::{aggregate_output, linearize, stationary_pmf};
use demand_dispatch::qos;
use demand_dispatch::signals;
use demand_dispatch::sim;
use demand_dispatch::spectral;
use demand_dispatch::DispatchError;

fn to_py_err(err: DispatchError) -> PyErr {
    match err {
        DispatchError::Config(_) | DispatchError::InvalidParameter(_) => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix_to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Finite-state on/off load with the exponentially tilted transition family.
#[pyclass(name = "PoolModel")]
struct PyPoolModel {
    inner: TransitionModel,
}

#[pymethods]
impl PyPoolModel {
    #[new]
    fn new(num_sojourn: usize, sampling_period_min: f64, mean_cycle_hours: f64) -> PyResult<Self> {
        TransitionModel::build_pool_nominal(num_sojourn, sampling_period_min, mean_cycle_hours)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_sojourn(&self) -> usize {
        self.inner.num_sojourn()
    }

    fn utility(&self) -> Vec<f64> {
        self.inner.utility().iter().copied().collect()
    }

    /// Row-stochastic transition matrix at command `zeta`.
    fn transition_matrix(&self, zeta: f64) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.transition_matrix(zeta))
    }

    /// First and second derivative matrices at `zeta = 0`.
    fn derivative_matrices(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (first, second) = self.inner.derivative_matrices();
        (matrix_to_rows(&first), matrix_to_rows(&second))
    }

    /// Stationary distribution of the nominal chain.
    fn stationary(&self) -> PyResult<Vec<f64>> {
        stationary_pmf(self.inner.nominal())
            .map(|pi| pi.weights().iter().copied().collect())
            .map_err(to_py_err)
    }

    /// Average nominal power in kW per load.
    fn nominal_output(&self) -> PyResult<f64> {
        let pi = stationary_pmf(self.inner.nominal()).map_err(to_py_err)?;
        Ok(aggregate_output(&pi, self.inner.utility()))
    }

    fn is_irreducible(&self) -> bool {
        self.inner.is_irreducible()
    }

    /// Samples one load trajectory under a command sequence; returns
    /// `(on, sojourn)` pairs, one per epoch.
    fn sample_path(&self, zetas: Vec<f64>, seed: u64) -> Vec<(bool, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = LoadState::new(Mode::Off, 1);
        zetas
            .iter()
            .map(|&z| {
                state = self.inner.sample_step(state, z, &mut rng);
                (state.is_on(), state.sojourn)
            })
            .collect()
    }

    /// Linearized mean-field model `(A, B, C, nominal_output)`.
    fn linearize(&self) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>, f64)> {
        let mfm = linearize(&self.inner).map_err(to_py_err)?;
        Ok((
            matrix_to_rows(&mfm.a),
            mfm.b.iter().copied().collect(),
            mfm.c.iter().copied().collect(),
            mfm.nominal_output,
        ))
    }
}

/// ARMA(2,1) regulation-signal model.
#[pyclass(name = "ArmaModel")]
struct PyArmaModel {
    inner: signals::ArmaModel,
}

#[pymethods]
impl PyArmaModel {
    #[new]
    fn new(a1: f64, a2: f64, b1: f64, sigma_w2: f64) -> PyResult<Self> {
        signals::ArmaModel::new(a1, a2, b1, sigma_w2)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    /// Fits the model to a series by recursive extended least squares.
    #[staticmethod]
    fn fit(series: Vec<f64>) -> PyResult<Self> {
        signals::els_fit(&series)
            .map(|inner| Self { inner })
            .map_err(to_py_err)
    }

    #[getter]
    fn a1(&self) -> f64 {
        self.inner.a1
    }

    #[getter]
    fn a2(&self) -> f64 {
        self.inner.a2
    }

    #[getter]
    fn b1(&self) -> f64 {
        self.inner.b1
    }

    #[getter]
    fn sigma_w2(&self) -> f64 {
        self.inner.sigma_w2
    }

    fn generate(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner.generate(n, &mut rng)
    }

    /// Two-sided PSD at angular frequency `theta`.
    fn psd(&self, theta: f64) -> f64 {
        self.inner.psd(theta)
    }
}

/// Discrete-time PI controller with saturation and anti-windup.
#[pyclass(name = "PiController")]
struct PyPiController {
    inner: control::PiController,
}

#[pymethods]
impl PyPiController {
    #[new]
    fn new(kp: f64, ki: f64, zeta_max: f64) -> Self {
        Self {
            inner: control::PiController::new(kp, ki, zeta_max),
        }
    }

    fn step(&mut self, error: f64) -> f64 {
        self.inner.step(error)
    }

    fn reset(&mut self) {
        self.inner.reset()
    }

    #[getter]
    fn integral_state(&self) -> f64 {
        self.inner.integral_state()
    }
}

/// First-order Butterworth low-pass `(numerator, denominator)` coefficients
/// in powers of `z^{-1}`.
#[pyfunction]
fn butterworth_lowpass(
    cutoff_per_min: f64,
    sampling_period_min: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    signals::butterworth_lowpass(cutoff_per_min, sampling_period_min)
        .map(|f| (f.numerator, f.denominator))
        .map_err(to_py_err)
}

/// Applies a rational filter to a series from zero initial state.
#[pyfunction]
fn filter_series(
    numerator: Vec<f64>,
    denominator: Vec<f64>,
    series: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let filter = signals::LinearFilter::new(numerator, denominator).map_err(to_py_err)?;
    Ok(signals::filter_apply(&filter, &series))
}

/// SOC-aware reshaping of one reference sample.
#[pyfunction]
fn reshape_reference(r: f64, soc: f64, lower: f64, upper: f64, delta: f64, tau: f64) -> f64 {
    signals::reshape_reference(r, soc, (lower, upper), delta, tau)
}

/// Mean geometric window `1/(1-beta)` of a discount factor.
#[pyfunction]
fn expected_window(beta: f64) -> PyResult<f64> {
    qos::expected_window(beta).map_err(to_py_err)
}

/// Welch PSD estimate `(thetas, values)` of a series.
#[pyfunction]
fn welch_psd(
    series: Vec<f64>,
    segment_length: usize,
    overlap: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    spectral::welch_psd(&series, segment_length, overlap)
        .map(|s| (s.thetas().to_vec(), s.values().to_vec()))
        .map_err(to_py_err)
}

/// Analytic QoS variance split `(nominal, second_order)` for a TOML config.
#[pyfunction]
fn predict_qos_variance(config_toml: &str) -> PyResult<(f64, f64)> {
    let config = sim::SimConfig::from_toml(config_toml).map_err(to_py_err)?;
    sim::predict_qos_variance(&config, spectral::DEFAULT_GRID)
        .map(|vt| (vt.nominal, vt.second_order))
        .map_err(to_py_err)
}

/// Largest trackable reference scale `(scale, nrmse)` for a TOML config.
#[pyfunction]
fn calibrate_reference(config_toml: &str) -> PyResult<(f64, f64)> {
    let config = sim::SimConfig::from_toml(config_toml).map_err(to_py_err)?;
    sim::calibrate_reference(&config)
        .map(|c| (c.scale, c.nrmse))
        .map_err(to_py_err)
}

/// Runs the closed-loop simulation for a TOML config. Returns a dict with
/// the recorded series and the summary (parsed from JSON).
#[pyfunction]
fn run_simulation<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let config = sim::SimConfig::from_toml(config_toml).map_err(to_py_err)?;
    let (result, _baseline) = sim::run_with_baseline(&config).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("reference", &result.reference)?;
    out.set_item("tracked_reference", &result.tracked_reference)?;
    out.set_item("y_tilde", &result.y_tilde)?;
    out.set_item("zeta", &result.zeta)?;
    out.set_item("error", &result.error)?;
    out.set_item("optout_count", &result.optout_count)?;
    out.set_item("qos_mean", &result.qos_mean)?;
    out.set_item("filtered_reference", &result.filtered_reference)?;
    let summary_json = serde_json::to_string(&result.summary)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let json = py.import("json")?;
    out.set_item("summary", json.call_method1("loads", (summary_json,))?)?;
    Ok(out)
}

/// Default experiment configuration as TOML text.
#[pyfunction]
fn default_config() -> String {
    sim::SimConfig::default().to_toml()
}

#[pymodule]
fn demand_dispatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPoolModel>()?;
    m.add_class::<PyArmaModel>()?;
    m.add_class::<PyPiController>()?;
    m.add_function(wrap_pyfunction!(butterworth_lowpass, m)?)?;
    m.add_function(wrap_pyfunction!(filter_series, m)?)?;
    m.add_function(wrap_pyfunction!(reshape_reference, m)?)?;
    m.add_function(wrap_pyfunction!(expected_window, m)?)?;
    m.add_function(wrap_pyfunction!(welch_psd, m)?)?;
    m.add_function(wrap_pyfunction!(predict_qos_variance, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_reference, m)?)?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
