//! Python bindings: environments, ground truths, single learners and the experiment runner.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gentd::approx::FeatureKind;
use gentd::density_ratio::DensityRatioState;
use gentd::gvf::block_norms;
use gentd::harness::config::{parse_feature_kind, EnvId, ExperimentConfig, Learner};
use gentd::harness::experiment::{build_task, load_environment, run_experiment, Evaluator, TaskSetup};
use gentd::harness::model_io::{parse_model, write_model};
use gentd::harness::verify::{example1_numbers as e1_numbers, verify_all, VerifyOptions};
use gentd::learners::{gentd_step, gtd_step, GenTdState, GtdState};
use gentd::mdp::{q_function, TransitionSampler};

fn py_err(e: gentd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = gentd::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

/// A tabular MDP with target policy, behavior distribution and stationary distribution.
#[pyclass(module = "gentd_py", frozen)]
struct Environment {
    inner: gentd::harness::experiment::Environment,
}

#[pymethods]
impl Environment {
    /// `name` is `baird`, `example1` or `file:<path>`.
    #[new]
    #[pyo3(signature = (name = "baird"))]
    fn new(name: &str) -> PyResult<Self> {
        let id: EnvId = parse(name)?;
        Ok(Self { inner: load_environment(&id).map_err(py_err)? })
    }

    /// Parses the plain-text model format.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let (mdp, pi, d) = parse_model(text).map_err(py_err)?;
        let inner = gentd::harness::experiment::Environment::new(mdp, pi, d).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        write_model(&self.inner.mdp, &self.inner.policy, &self.inner.behavior)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.mdp.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.mdp.num_actions()
    }

    #[getter]
    fn num_pairs(&self) -> usize {
        self.inner.mdp.num_pairs()
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.inner.mdp.discount()
    }

    fn mu(&self) -> Vec<f64> {
        self.inner.mu.mu().as_slice().to_vec()
    }

    fn behavior(&self) -> Vec<f64> {
        self.inner.behavior.probs().to_vec()
    }

    /// Pair-to-pair transition matrix under the target policy, as rows.
    fn kernel(&self) -> Vec<Vec<f64>> {
        let m = self.inner.kernel.matrix();
        (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
    }

    fn q_function(&self) -> PyResult<Vec<f64>> {
        let q = q_function(&self.inner.mdp, &self.inner.policy).map_err(py_err)?;
        Ok(q.as_slice().to_vec())
    }

    fn true_ratio(&self) -> PyResult<Vec<f64>> {
        let r = gentd::density_ratio::true_ratio(&self.inner.mu, &self.inner.behavior).map_err(py_err)?;
        Ok(r.as_slice().to_vec())
    }

    /// Ground truth of `task` as a dict with `values` (stacked block by block), `dims` and
    /// per-block `mu`-norms.
    fn ground_truth<'py>(&self, py: Python<'py>, task: &str) -> PyResult<Bound<'py, PyDict>> {
        let setup = build_task(self.inner.clone(), parse(task)?, FeatureKind::Complete).map_err(py_err)?;
        let dims = setup.case.spec.dims().to_vec();
        let norms = block_norms(&setup.ground_truth, setup.env.mu.mu(), &dims).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("values", setup.ground_truth.as_slice().to_vec())?;
        out.set_item("dims", dims)?;
        out.set_item("block_norms", norms)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Environment(states={}, actions={}, discount={})",
            self.inner.mdp.num_states(),
            self.inner.mdp.num_actions(),
            self.inner.mdp.discount()
        )
    }
}

enum State {
    GenTd(GenTdState),
    Gtd(GtdState),
}

/// One GenTD or GTD learner on one task, stepped from Python.
#[pyclass(module = "gentd_py")]
struct LearnerRun {
    setup: TaskSetup,
    evaluator: Evaluator,
    sampler: TransitionSampler,
    rng: ChaCha8Rng,
    state: State,
}

#[pymethods]
impl LearnerRun {
    #[new]
    #[pyo3(signature = (env, task, learner = "gentd", features = "cft", seed = 0, **overrides))]
    fn new(
        env: &Environment,
        task: &str,
        learner: &str,
        features: &str,
        seed: u64,
        overrides: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mut cfg = ExperimentConfig {
            task: parse(task)?,
            learner: parse(learner)?,
            features: parse_feature_kind(features).map_err(py_err)?,
            ..Default::default()
        };
        apply_overrides(&mut cfg, overrides)?;
        let setup = build_task(env.inner.clone(), cfg.task, cfg.features).map_err(py_err)?;
        let evaluator = Evaluator::new(&setup).map_err(py_err)?;
        let e = &setup.env;
        let sampler = TransitionSampler::new(&e.behavior, &e.mdp, &e.policy).map_err(py_err)?;
        let state = match cfg.learner {
            Learner::GenTd => {
                let ratio = DensityRatioState::new(setup.psi.clone(), &e.behavior, cfg.ratio_init)
                    .map_err(py_err)?;
                let mut s =
                    GenTdState::new(&setup.features, ratio, cfg.theta_schedule(), cfg.ratio_schedule());
                if cfg.oracle_ratio {
                    s.oracle_ratio = Some(setup.true_ratio.clone());
                }
                State::GenTd(s)
            }
            Learner::Gtd => {
                State::Gtd(GtdState::new(&setup.features, cfg.theta_schedule(), cfg.ratio_schedule()))
            }
        };
        Ok(Self { setup, evaluator, sampler, rng: ChaCha8Rng::seed_from_u64(seed), state })
    }

    /// Takes `n` sampled steps and returns the new estimation error.
    fn step(&mut self, n: u64) -> f64 {
        let na = self.setup.env.mdp.num_actions();
        for _ in 0..n {
            let t = self.sampler.sample(&mut self.rng);
            let (x, next) = (t.pair(na), t.next_pair(na));
            match &mut self.state {
                State::GenTd(s) => gentd_step(s, &self.setup.model, &self.setup.features, x, next),
                State::Gtd(s) => gtd_step(s, &self.setup.model, &self.setup.features, x, next),
            }
        }
        self.estimation_error()
    }

    #[getter]
    fn iteration(&self) -> u64 {
        match &self.state {
            State::GenTd(s) => s.iteration,
            State::Gtd(s) => s.iteration,
        }
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.theta_ref().as_slice().to_vec()
    }

    fn estimation_error(&self) -> f64 {
        self.evaluator.estimation_error(self.theta_ref())
    }

    fn mspgbe(&self) -> f64 {
        self.evaluator.mspgbe(self.theta_ref())
    }

    /// `||rho_hat - rho||_inf`, or `None` for GTD.
    fn ratio_error(&self) -> Option<f64> {
        match &self.state {
            State::GenTd(s) => Some(self.evaluator.ratio_error(&s.ratio)),
            State::Gtd(_) => None,
        }
    }

    fn ground_truth_norm(&self) -> f64 {
        self.evaluator.ground_truth_norm()
    }
}

impl LearnerRun {
    fn theta_ref(&self) -> &nalgebra::DVector<f64> {
        match &self.state {
            State::GenTd(s) => &s.theta,
            State::Gtd(s) => &s.theta,
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<()> {
    let Some(kw) = overrides else {
        return Ok(());
    };
    for (k, v) in kw.iter() {
        let key: String = k.extract()?;
        let value = if let Ok(b) = v.extract::<bool>() {
            b.to_string()
        } else {
            v.str()?.to_string()
        };
        cfg.set(&key, &value).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)
}

/// Runs a full seed-parallel experiment. `config` is the key-value text format; keyword
/// arguments override it. Returns the seed-averaged curve as a dict of columns.
#[pyfunction]
#[pyo3(signature = (config = None, **overrides))]
fn train<'py>(
    py: Python<'py>,
    config: Option<&str>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_text(text).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    let run = py.detach(|| run_experiment(&cfg)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("iteration", run.mean.iter().map(|r| r.iteration).collect::<Vec<_>>())?;
    out.set_item("estimation_error", run.mean.iter().map(|r| r.estimation_error).collect::<Vec<_>>())?;
    out.set_item("mspgbe", run.mean.iter().map(|r| r.mspgbe).collect::<Vec<_>>())?;
    out.set_item("ratio_error", run.mean.iter().map(|r| r.ratio_error).collect::<Vec<_>>())?;
    out.set_item("seeds", cfg.seeds.clone())?;
    out.set_item("wall_clock", run.wall_clock.as_secs_f64())?;
    Ok(out)
}

/// Runs the self-checks. Returns `(passed, checks)` where each check is a dict.
#[pyfunction]
#[pyo3(signature = (gamma_g_factor = 0.5, specs = 20, pairs = 200, seed = 7))]
fn verify<'py>(
    py: Python<'py>,
    gamma_g_factor: f64,
    specs: usize,
    pairs: usize,
    seed: u64,
) -> PyResult<(bool, Vec<Bound<'py, PyDict>>)> {
    let opts = VerifyOptions { gamma_g_factor, num_specs: specs, pairs_per_spec: pairs, seed };
    let report = py.detach(|| verify_all(&opts));
    let checks = report
        .checks
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", &c.name)?;
            d.set_item("passed", c.passed)?;
            d.set_item("informational", c.informational)?;
            d.set_item("value", c.value)?;
            d.set_item("threshold", c.threshold)?;
            d.set_item("detail", &c.detail)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((report.passed(), checks))
}

/// `V_bar`, `A_bar`, `b_bar`, `theta` and the D-norm error of the Example 1 construction.
#[pyfunction]
fn example1_numbers() -> PyResult<HashMap<String, Vec<f64>>> {
    let n = e1_numbers().map_err(py_err)?;
    Ok(HashMap::from([
        ("v_bar".to_string(), n.v_bar.as_slice().to_vec()),
        ("a_bar".to_string(), vec![n.a_bar]),
        ("b_bar".to_string(), vec![n.b_bar]),
        ("theta".to_string(), vec![n.theta]),
        ("d_norm".to_string(), vec![n.d_norm]),
    ]))
}

/// Block weights and contraction factor for `k` blocks.
#[pyfunction]
fn contraction_weights(k: usize, gamma_max: f64, coupling_bound: f64) -> PyResult<(Vec<f64>, f64)> {
    let w = gentd::gvf::contraction_weights(k, gamma_max, coupling_bound).map_err(py_err)?;
    Ok((w.alpha, w.gamma_g))
}

/// Writes a model file for a built-in environment, for editing by hand.
#[pyfunction]
fn write_builtin(name: &str, path: PathBuf) -> PyResult<()> {
    let env = Environment::new(name)?;
    std::fs::write(path, env.to_text()).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn gentd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Environment>()?;
    m.add_class::<LearnerRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(example1_numbers, m)?)?;
    m.add_function(wrap_pyfunction!(contraction_weights, m)?)?;
    m.add_function(wrap_pyfunction!(write_builtin, m)?)?;
    m.add("TASKS", ["grad_q", "grad_logmu", "variance", "anomaly", "canonical", "backward_value"])?;
    Ok(())
}
