//! Seeded training runs and their CSV learning curves.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::approx::{nonconstant_features, tabular_basis, FeatureKind, FeatureMap};
use crate::cases::{
    anomaly_case, backward_value_case, canonical_case, grad_logmu_case, grad_q_case,
    variance_case, GvfCase, SampleModel,
};
use crate::density_ratio::{true_ratio, DensityRatioState};
use crate::error::{Error, Result};
use crate::gvf::{solve_ground_truth, AssembledOperator, ConstantPinning};
use crate::harness::config::{feature_kind_name, EnvId, ExperimentConfig, Learner, Task};
use crate::harness::envs::{build_baird, build_example1};
use crate::harness::model_io::parse_model;
use crate::learners::{gentd_step, gtd_step, GenTdState, GtdState};
use crate::mdp::{
    state_action_kernel, stationary_distribution, BehaviorDistribution, Policy,
    StateActionKernel, StationaryDistribution, TabularMdp, TransitionSampler,
};

pub const CSV_HEADER: [&str; 5] = ["iteration", "seed", "estimation_error", "mspgbe", "ratio_error"];

/// An MDP, target policy and behavior distribution with their derived chain.
#[derive(Clone, Debug)]
pub struct Environment {
    pub mdp: TabularMdp,
    pub policy: Policy,
    pub behavior: BehaviorDistribution,
    pub kernel: StateActionKernel,
    pub mu: StationaryDistribution,
}

impl Environment {
    pub fn new(mdp: TabularMdp, policy: Policy, behavior: BehaviorDistribution) -> Result<Self> {
        let kernel = state_action_kernel(&mdp, &policy)?;
        let mu = stationary_distribution(&kernel)?;
        Ok(Self { mdp, policy, behavior, kernel, mu })
    }
}

pub fn load_environment(env: &EnvId) -> Result<Environment> {
    let (mdp, pi, d) = match env {
        EnvId::Baird => build_baird()?,
        EnvId::Example1 => build_example1()?,
        EnvId::File(path) => parse_model(&fs::read_to_string(path)?)?,
    };
    Environment::new(mdp, pi, d)
}

/// Everything a training run needs besides its seed.
#[derive(Clone, Debug)]
pub struct TaskSetup {
    pub env: Environment,
    pub case: GvfCase,
    pub model: SampleModel,
    pub op: AssembledOperator,
    pub ground_truth: DVector<f64>,
    pub features: FeatureMap,
    /// Density-ratio features.
    pub psi: DMatrix<f64>,
    pub true_ratio: DVector<f64>,
}

/// Builds the case, ground truth and features of `task` on `env`.
///
/// Value features are the identity basis (minus its last column for `Incomplete`), except
/// for `GradLogMu`, which uses the non-constant basis so the unit-discount fixed point is
/// pinned. Ratio features always use the identity-based basis of the same kind.
pub fn build_task(env: Environment, task: Task, kind: FeatureKind) -> Result<TaskSetup> {
    let n = env.mdp.num_pairs();
    let case = match task {
        Task::Canonical => canonical_case(&env.mdp)?,
        Task::Variance => variance_case(&env.mdp, &env.policy)?,
        Task::GradQ => grad_q_case(&env.mdp, &env.policy)?,
        Task::Anomaly => anomaly_case(env.mdp.reward_vector(), &env.kernel, env.mdp.discount())?,
        Task::BackwardValue => backward_value_case(&env.mdp, &env.kernel, &env.mu)?,
        Task::GradLogMu => grad_logmu_case(&env.policy, n, ConstantPinning::Euclidean)?,
    };
    let model = case.sampler()?.clone();
    let op = case.assemble(&env.kernel, &env.mu)?;
    let ground_truth = solve_ground_truth(&op)?;
    let dims = case.spec.dims().to_vec();
    let features = match task {
        Task::GradLogMu => nonconstant_features(n, kind, &dims)?,
        _ => FeatureMap::shared(tabular_basis(n, kind, None), &dims)?,
    };
    let psi = tabular_basis(n, kind, None);
    let true_ratio = true_ratio(&env.mu, &env.behavior)?;
    Ok(TaskSetup { env, case, model, op, ground_truth, features, psi, true_ratio })
}

pub fn build_task_from_config(cfg: &ExperimentConfig) -> Result<TaskSetup> {
    build_task(load_environment(&cfg.env)?, cfg.task, cfg.features)
}

/// Evaluation metrics with the projection precomputed.
#[derive(Clone, Debug)]
pub struct Evaluator {
    phi: DMatrix<f64>,
    projector: DMatrix<f64>,
    u: DVector<f64>,
    m: DMatrix<f64>,
    b: DVector<f64>,
    ground_truth: DVector<f64>,
    true_ratio: DVector<f64>,
}

impl Evaluator {
    pub fn new(setup: &TaskSetup) -> Result<Self> {
        let phi = setup.features.dense();
        let u = setup.op.mu_lift();
        let uphi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| u[r] * phi[(r, c)]);
        let gram = phi.tr_mul(&uphi);
        let inv = gram
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("mu-weighted Gram matrix".into()))?
            .inverse();
        let projector = &phi * inv * uphi.transpose();
        Ok(Self {
            phi,
            projector,
            u,
            m: setup.op.m.clone(),
            b: setup.op.b.clone(),
            ground_truth: setup.ground_truth.clone(),
            true_ratio: setup.true_ratio.clone(),
        })
    }

    fn weighted_norm_sq(&self, v: &DVector<f64>) -> f64 {
        v.iter().zip(self.u.iter()).map(|(e, w)| w * e * e).sum()
    }

    /// `||Phi theta - G||_mu` over all blocks.
    pub fn estimation_error(&self, theta: &DVector<f64>) -> f64 {
        self.weighted_norm_sq(&(&self.phi * theta - &self.ground_truth)).sqrt()
    }

    /// `||Phi theta - Gamma_mu (B + M Phi theta)||_mu^2`.
    pub fn mspgbe(&self, theta: &DVector<f64>) -> f64 {
        let v = &self.phi * theta;
        let target = &self.b + &self.m * &v;
        self.weighted_norm_sq(&(v - &self.projector * target))
    }

    /// `||rho_hat - rho||_inf`.
    pub fn ratio_error(&self, ratio: &DensityRatioState) -> f64 {
        (ratio.ratio_table() - &self.true_ratio).amax()
    }

    pub fn ground_truth_norm(&self) -> f64 {
        self.weighted_norm_sq(&self.ground_truth).sqrt()
    }
}

/// One evaluation of one seed. `seed == None` marks a seed-averaged record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub iteration: u64,
    pub seed: Option<u64>,
    pub estimation_error: f64,
    pub mspgbe: f64,
    pub ratio_error: Option<f64>,
}

/// Named parameter vectors of a learner at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub iteration: u64,
    pub params: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub records: Vec<Record>,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedRun>,
    pub mean: Vec<Record>,
    pub wall_clock: Duration,
}

impl ExperimentRun {
    pub fn final_mean(&self) -> &Record {
        self.mean.last().expect("runs always record iteration 0")
    }
}

enum LearnerState {
    GenTd(GenTdState),
    Gtd(GtdState),
}

impl LearnerState {
    fn theta(&self) -> &DVector<f64> {
        match self {
            Self::GenTd(s) => &s.theta,
            Self::Gtd(s) => &s.theta,
        }
    }

    fn params(&self) -> Vec<(String, Vec<f64>)> {
        match self {
            Self::GenTd(s) => vec![
                ("theta".into(), s.theta.as_slice().to_vec()),
                ("w_rho".into(), s.ratio.w_rho.as_slice().to_vec()),
                ("w_f".into(), s.ratio.w_f.as_slice().to_vec()),
                ("eta".into(), vec![s.ratio.eta]),
            ],
            Self::Gtd(s) => vec![
                ("theta".into(), s.theta.as_slice().to_vec()),
                ("w".into(), s.w.as_slice().to_vec()),
            ],
        }
    }
}

fn record(ev: &Evaluator, state: &LearnerState, t: u64, seed: u64) -> Record {
    Record {
        iteration: t,
        seed: Some(seed),
        estimation_error: ev.estimation_error(state.theta()),
        mspgbe: ev.mspgbe(state.theta()),
        ratio_error: match state {
            LearnerState::GenTd(s) => Some(ev.ratio_error(&s.ratio)),
            LearnerState::Gtd(_) => None,
        },
    }
}

/// Trains one seed. Records are taken at iteration 0, every `eval_every` steps, and at
/// the final step.
pub fn run_seed(
    setup: &TaskSetup,
    evaluator: &Evaluator,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SeedRun> {
    let env = &setup.env;
    let sampler = TransitionSampler::new(&env.behavior, &env.mdp, &env.policy)?;
    let na = env.mdp.num_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = match cfg.learner {
        Learner::GenTd => {
            let mut ratio = DensityRatioState::new(setup.psi.clone(), &env.behavior, cfg.ratio_init)?;
            ratio.clip_negative = cfg.clip_ratio;
            let mut s = GenTdState::new(
                &setup.features,
                ratio,
                cfg.theta_schedule(),
                cfg.ratio_schedule(),
            );
            if cfg.oracle_ratio {
                s.oracle_ratio = Some(setup.true_ratio.clone());
            }
            LearnerState::GenTd(s)
        }
        Learner::Gtd => LearnerState::Gtd(GtdState::new(
            &setup.features,
            cfg.theta_schedule(),
            cfg.ratio_schedule(),
        )),
    };
    let mut records = vec![record(evaluator, &state, 0, seed)];
    let mut checkpoints = Vec::new();
    if cfg.checkpoint {
        checkpoints.push(Checkpoint { seed, iteration: 0, params: state.params() });
    }
    for t in 1..=cfg.iters {
        let tr = sampler.sample(&mut rng);
        let (x, next) = (tr.pair(na), tr.next_pair(na));
        match &mut state {
            LearnerState::GenTd(s) => gentd_step(s, &setup.model, &setup.features, x, next),
            LearnerState::Gtd(s) => gtd_step(s, &setup.model, &setup.features, x, next),
        }
        if t % cfg.eval_every == 0 || t == cfg.iters {
            let r = record(evaluator, &state, t, seed);
            if !(r.estimation_error.is_finite() && r.mspgbe.is_finite()) {
                return Err(Error::NonConvergence(format!("seed {seed} diverged at iteration {t}")));
            }
            records.push(r);
            if cfg.checkpoint {
                checkpoints.push(Checkpoint { seed, iteration: t, params: state.params() });
            }
        }
    }
    Ok(SeedRun { seed, records, checkpoints })
}

/// Arithmetic mean over seeds, checkpoint by checkpoint, summed in seed order.
pub fn mean_records(runs: &[SeedRun]) -> Vec<Record> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let k = runs.len() as f64;
    (0..first.records.len())
        .map(|i| {
            let sum = |f: &dyn Fn(&Record) -> f64| runs.iter().map(|r| f(&r.records[i])).sum::<f64>();
            let ratio = first.records[i]
                .ratio_error
                .map(|_| sum(&|r| r.ratio_error.unwrap_or(f64::NAN)) / k);
            Record {
                iteration: first.records[i].iteration,
                seed: None,
                estimation_error: sum(&|r| r.estimation_error) / k,
                mspgbe: sum(&|r| r.mspgbe) / k,
                ratio_error: ratio,
            }
        })
        .collect()
}

/// Runs every seed in parallel and writes `per_seed.csv`, `mean.csv` and `config.txt`
/// (plus `params.csv` when checkpointing) under `cfg.out` when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let setup = build_task_from_config(cfg)?;
    run_experiment_with(&setup, cfg)
}

pub fn run_experiment_with(setup: &TaskSetup, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let start = Instant::now();
    let evaluator = Evaluator::new(setup)?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(setup, &evaluator, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_records(&per_seed);
    let run = ExperimentRun { config: cfg.clone(), per_seed, mean, wall_clock: start.elapsed() };
    if let Some(out) = &cfg.out {
        write_run(&run, out)?;
    }
    log::info!(
        "{} {} {} {}: {} seeds x {} iterations in {:.2?}",
        cfg.env,
        cfg.task,
        feature_kind_name(cfg.features),
        cfg.learner,
        cfg.seeds.len(),
        cfg.iters,
        run.wall_clock
    );
    Ok(run)
}

/// Experiment key used in checkpoint files.
pub fn experiment_name(cfg: &ExperimentConfig) -> String {
    format!("{}-{}-{}-{}", cfg.env, cfg.task, feature_kind_name(cfg.features), cfg.learner)
}

fn record_row(r: &Record) -> [String; 5] {
    [
        r.iteration.to_string(),
        r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
        r.estimation_error.to_string(),
        r.mspgbe.to_string(),
        r.ratio_error.map_or_else(String::new, |v| v.to_string()),
    ]
}

pub fn write_records<W: Write>(w: W, records: &[Record]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record(record_row(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_run(run: &ExperimentRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let all: Vec<Record> = run.per_seed.iter().flat_map(|s| s.records.iter().cloned()).collect();
    write_records(fs::File::create(dir.join("per_seed.csv"))?, &all)?;
    write_records(fs::File::create(dir.join("mean.csv"))?, &run.mean)?;
    fs::write(dir.join("config.txt"), run.config.to_text())?;
    if run.config.checkpoint {
        let name = experiment_name(&run.config);
        let mut out = csv::Writer::from_path(dir.join("params.csv"))?;
        out.write_record(["experiment", "seed", "iteration", "name", "index", "value"])?;
        for s in &run.per_seed {
            for c in &s.checkpoints {
                for (pname, values) in &c.params {
                    for (i, v) in values.iter().enumerate() {
                        out.write_record([
                            name.clone(),
                            c.seed.to_string(),
                            c.iteration.to_string(),
                            pname.clone(),
                            i.to_string(),
                            v.to_string(),
                        ])?;
                    }
                }
            }
        }
        out.flush()?;
    }
    Ok(())
}

/// Reads a learning-curve CSV written by [`write_records`].
pub fn read_records<R: std::io::Read>(r: R) -> Result<Vec<Record>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {header:?}")));
    }
    let num = |s: &str, what: &str| {
        s.parse::<f64>().map_err(|e| Error::Config(format!("{what} '{s}': {e}")))
    };
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        out.push(Record {
            iteration: row[0]
                .parse()
                .map_err(|e| Error::Config(format!("iteration '{}': {e}", &row[0])))?,
            seed: match &row[1] {
                "mean" => None,
                s => Some(s.parse().map_err(|e| Error::Config(format!("seed '{s}': {e}")))?),
            },
            estimation_error: num(&row[2], "estimation_error")?,
            mspgbe: num(&row[3], "mspgbe")?,
            ratio_error: if row[4].is_empty() { None } else { Some(num(&row[4], "ratio_error")?) },
        });
    }
    Ok(out)
}

/// Parameters of `(experiment, seed, iteration)` from a `params.csv` file.
pub fn load_checkpoint(
    path: &Path,
    experiment: &str,
    seed: u64,
    iteration: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| Error::Config(format!("'{s}': {e}")));
        if &row[0] != experiment || parse_u(&row[1])? != seed || parse_u(&row[2])? != iteration {
            continue;
        }
        let idx = parse_u(&row[4])? as usize;
        let v = row[5].parse::<f64>().map_err(|e| Error::Config(format!("'{}': {e}", &row[5])))?;
        out.entry(row[3].to_string()).or_default().push((idx, v));
    }
    if out.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoint for {experiment}, seed {seed}, iteration {iteration}"
        )));
    }
    Ok(out
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|p| p.0);
            (k, v.into_iter().map(|p| p.1).collect())
        })
        .collect())
}
