//! Python bindings: accounting primitives, the weighting LP, calibration,
//! training and the reconstruction game.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use secprot::divergence::DEFAULT_INVERT_TOL;
use secprot::pipeline::{calibrate_with_tol, DEFAULT_SIGMA_REL_TOL};
use secprot::{
    CalibrationReport, DiscretePMF, Error, LinearRegression, LogisticRegression, ModelAdapter,
    RoundMechanism, RunConfig, SamplingPlan, SecretMap, TrainSettings, TrainTrace,
};

fn err(e: Error) -> PyErr {
    match e {
        Error::QuadratureDiverged { .. } => PyRuntimeError::new_err(e.to_string()),
        Error::Io { .. } => pyo3::exceptions::PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn mechanism(shift_pmf: Vec<f64>, sigma: f64) -> PyResult<RoundMechanism> {
    RoundMechanism::new(DiscretePMF::new(shift_pmf).map_err(err)?, sigma).map_err(err)
}

/// KL divergence between Bernoulli(r) and Bernoulli(p).
#[pyfunction]
fn bern_kl(r: f64, p: f64) -> PyResult<f64> {
    secprot::bern_kl(r, p).map_err(err)
}

/// Largest posterior r >= p with bern_kl(r, p) <= mu.
#[pyfunction]
#[pyo3(signature = (p, mu, tol = DEFAULT_INVERT_TOL))]
fn invert_posterior(p: f64, mu: f64, tol: f64) -> PyResult<f64> {
    secprot::invert_posterior(p, mu, tol).map_err(err)
}

/// Distribution of the number of included examples.
#[pyfunction]
fn poisson_binomial(probs: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(secprot::poisson_binomial(&probs)
        .map_err(err)?
        .probs()
        .to_vec())
}

/// Per-round KL of the mixture against pure noise, for a shift pmf over 0..k.
#[pyfunction]
fn round_kl(shift_pmf: Vec<f64>, sigma: f64) -> PyResult<f64> {
    secprot::round_kl(&mechanism(shift_pmf, sigma)?).map_err(err)
}

#[pyfunction]
fn composed_kl(shift_pmf: Vec<f64>, sigma: f64, rounds: u32) -> PyResult<f64> {
    secprot::composed_kl(&mechanism(shift_pmf, sigma)?, rounds).map_err(err)
}

/// Round KL for a group given by its examples' sampling probabilities.
#[pyfunction]
fn group_kl(group_probs: Vec<f64>, sigma: f64, rounds: u32) -> PyResult<f64> {
    let mech = RoundMechanism::for_group(&group_probs, sigma).map_err(err)?;
    secprot::composed_kl(&mech, rounds).map_err(err)
}

/// Blow-up diagnostic as a dict with `total_blowup_mass`, `log_total_blowup_mass` and `support`.
#[pyfunction]
fn pld_blowup<'py>(
    py: Python<'py>,
    shift_pmf: Vec<f64>,
    sigma: f64,
    grid_step: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let d =
        secprot::pld_blowup_diagnostic(&mechanism(shift_pmf, sigma)?, grid_step).map_err(err)?;
    to_py(py, &d)
}

/// Smallest noise multiplier meeting the budget; 0.0 when the group is never sampled.
#[pyfunction]
#[pyo3(signature = (group_probs, rounds, mu, rel_tol = DEFAULT_SIGMA_REL_TOL))]
fn calibrate_secret_sigma(
    group_probs: Vec<f64>,
    rounds: u32,
    mu: f64,
    rel_tol: f64,
) -> PyResult<f64> {
    Ok(
        secprot::calibrate_secret_sigma(&group_probs, rounds, mu, rel_tol)
            .map_err(err)?
            .value(),
    )
}

#[pyfunction]
fn certified_bound(p: f64, group_probs: Vec<f64>, sigma: f64, rounds: u32) -> PyResult<f64> {
    secprot::certified_bound(p, &group_probs, sigma, rounds).map_err(err)
}

/// Solves the weighting LP; returns `(weights, objective)`.
#[pyfunction]
fn solve_lp(n: usize, incidence: Vec<Vec<usize>>, caps: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let lp = secprot::WeightLP::new(n, incidence, caps).map_err(err)?;
    let w = secprot::solve(&lp);
    Ok((w.w, w.objective))
}

/// Plays the reconstruction game with a uniform prior over `k` candidates.
#[pyfunction]
#[pyo3(signature = (k, group_probs, sigma, rounds, trials, seed = 0))]
fn simulate_game<'py>(
    py: Python<'py>,
    k: usize,
    group_probs: Vec<f64>,
    sigma: f64,
    rounds: u32,
    trials: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let game =
        secprot::ReconstructionGame::uniform(k, group_probs, sigma, rounds, trials).map_err(err)?;
    let res = py
        .detach(|| secprot::simulate_game(&game, seed))
        .map_err(err)?;
    to_py(py, &res)
}

#[pyclass(name = "SecretMap", module = "secprot_py", frozen)]
struct PySecretMap {
    inner: SecretMap,
}

#[pymethods]
impl PySecretMap {
    #[staticmethod]
    fn load(manifest_path: &str, secrets_path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: secprot::load_dataset(manifest_path, secrets_path).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n, m, skew = 1.5, dim = 8, seed = 0))]
    fn synthetic(n: usize, m: usize, skew: f64, dim: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: secprot::make_synthetic(n, m, skew, dim, seed).map_err(err)?,
        })
    }

    #[getter]
    fn num_examples(&self) -> usize {
        self.inner.num_examples()
    }

    #[getter]
    fn num_secrets(&self) -> usize {
        self.inner.num_secrets()
    }

    #[getter]
    fn example_ids(&self) -> Vec<String> {
        self.inner.examples().iter().map(|e| e.id.clone()).collect()
    }

    #[getter]
    fn secret_ids(&self) -> Vec<String> {
        self.inner.secrets().iter().map(|s| s.id.clone()).collect()
    }

    /// Indices of the examples holding secret `j`.
    fn incidence(&self, j: usize) -> PyResult<Vec<usize>> {
        if j >= self.inner.num_secrets() {
            return Err(PyValueError::new_err(format!(
                "secret index {j} out of range"
            )));
        }
        Ok(self.inner.incidence(j).to_vec())
    }

    fn filter_secretless(&self) -> Self {
        Self {
            inner: self.inner.filter_secretless(),
        }
    }

    fn to_manifest(&self) -> String {
        secprot::domain::write_manifest(&self.inner)
    }

    fn to_secrets_json(&self) -> String {
        secprot::domain::write_secrets(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.num_examples()
    }

    fn __repr__(&self) -> String {
        format!(
            "SecretMap(examples={}, secrets={})",
            self.inner.num_examples(),
            self.inner.num_secrets()
        )
    }
}

fn run_config(
    batch_target: f64,
    rounds: u32,
    clip_norm: f64,
    lp_constant: f64,
    seed: u64,
    drop_secretless: bool,
) -> PyResult<RunConfig> {
    let config = RunConfig {
        batch_target,
        rounds,
        clip_norm,
        lp_constant,
        seed,
        drop_secretless,
    };
    config.validate().map_err(err)?;
    Ok(config)
}

#[pyclass(name = "SamplingPlan", module = "secprot_py", frozen)]
struct PyPlan {
    inner: SamplingPlan,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.inner.probs.clone()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.w.clone()
    }

    #[getter]
    fn example_ids(&self) -> Vec<String> {
        self.inner.example_ids.clone()
    }

    #[getter]
    fn expected_batch_size(&self) -> f64 {
        self.inner.expected_batch_size()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pyclass(name = "CalibrationReport", module = "secprot_py", frozen)]
struct PyReport {
    inner: CalibrationReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn fraction_retained(&self) -> f64 {
        self.inner.fraction_retained
    }

    /// Ids of secrets whose certified posterior exceeds the target.
    fn violations(&self) -> Vec<String> {
        self.inner
            .violations()
            .map(|s| s.secret_id.clone())
            .collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

/// Runs the full calibration; returns `(SamplingPlan, CalibrationReport)`.
#[pyfunction]
#[pyo3(signature = (
    data, batch_target = 64.0, rounds = 2000, clip_norm = 1.0, lp_constant = 1.0,
    seed = 0, drop_secretless = false, rel_tol = DEFAULT_SIGMA_REL_TOL
))]
fn calibrate(
    py: Python<'_>,
    data: &PySecretMap,
    batch_target: f64,
    rounds: u32,
    clip_norm: f64,
    lp_constant: f64,
    seed: u64,
    drop_secretless: bool,
    rel_tol: f64,
) -> PyResult<(PyPlan, PyReport)> {
    let config = run_config(
        batch_target,
        rounds,
        clip_norm,
        lp_constant,
        seed,
        drop_secretless,
    )?;
    let (plan, report) = py
        .detach(|| calibrate_with_tol(&data.inner, &config, rel_tol))
        .map_err(err)?;
    Ok((PyPlan { inner: plan }, PyReport { inner: report }))
}

/// DP-SGD on the dataset payloads with the given plan; returns the trace as a dict.
#[pyfunction]
#[pyo3(signature = (data, plan, model = "linear", learning_rate = 0.1, clip_norm = 1.0, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    data: &PySecretMap,
    plan: &PyPlan,
    model: &str,
    learning_rate: f64,
    clip_norm: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let map = if plan.inner.example_ids.len() != data.inner.num_examples() {
        data.inner.filter_secretless()
    } else {
        data.inner.clone()
    };
    let features = map
        .examples()
        .iter()
        .find_map(|e| e.payload.as_ref().map(|p| p.len().saturating_sub(1)))
        .ok_or_else(|| PyValueError::new_err("no example carries a payload"))?;
    let mut adapter: Box<dyn ModelAdapter + Send> = match model {
        "linear" => Box::new(LinearRegression { features }),
        "logistic" => Box::new(LogisticRegression { features }),
        other => return Err(PyValueError::new_err(format!("unknown model {other:?}"))),
    };
    let config = RunConfig {
        batch_target: plan.inner.batch_target,
        rounds: plan.inner.rounds,
        clip_norm,
        seed,
        ..RunConfig::default()
    };
    let settings = TrainSettings {
        learning_rate,
        seed,
    };
    let trace: TrainTrace = py
        .detach(|| secprot::train(&map, &plan.inner, adapter.as_mut(), &config, settings))
        .map_err(err)?;
    to_py(py, &trace)
}

#[pymodule]
fn secprot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bern_kl, m)?)?;
    m.add_function(wrap_pyfunction!(invert_posterior, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_binomial, m)?)?;
    m.add_function(wrap_pyfunction!(round_kl, m)?)?;
    m.add_function(wrap_pyfunction!(composed_kl, m)?)?;
    m.add_function(wrap_pyfunction!(group_kl, m)?)?;
    m.add_function(wrap_pyfunction!(pld_blowup, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_secret_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(certified_bound, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lp, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_game, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PySecretMap>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyReport>()?;
    let dict = PyDict::new(m.py());
    dict.set_item("default_invert_tol", DEFAULT_INVERT_TOL)?;
    dict.set_item("default_sigma_rel_tol", DEFAULT_SIGMA_REL_TOL)?;
    m.add("defaults", dict)?;
    Ok(())
}
