//! GenTD and GTD stochastic learners, their population objectives and fixed points.
//!
//! Every sample is a transition between flattened pairs `x = (s,a)` and `next = (s',a')`.
//! Forward GVFs anchor their update at `x` and bootstrap from `next`; backward GVFs anchor
//! at `next` and bootstrap from `x`.

use nalgebra::{DMatrix, DVector};

use crate::approx::{project_ball_in_place, project_weighted, FeatureMap, DEFAULT_THETA_RADIUS};
use crate::cases::SampleModel;
use crate::density_ratio::DensityRatioState;
use crate::error::{Error, Result};
use crate::gvf::{
    alpha_norm, apply_gbo, block_norms, check_features, AssembledOperator, ContractionWeights,
    Direction,
};
use crate::mdp::{BehaviorDistribution, StateActionKernel, StationaryDistribution};

/// Stepsize sequence indexed from `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `base * offset / (t + offset)`.
    InverseTime { base: f64, offset: f64 },
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            Self::Constant(a) => a,
            Self::InverseTime { base, offset } => base * offset / (t as f64 + offset),
        }
    }
}

fn anchors(direction: Direction, x: usize, next: usize) -> (usize, usize) {
    match direction {
        Direction::Forward => (x, next),
        Direction::Backward => (next, x),
    }
}

/// Scratch space for one sample.
#[derive(Clone, Debug)]
struct Scratch {
    anchor: Vec<f64>,
    other: Vec<f64>,
    coupled: Vec<f64>,
    delta: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self { anchor: vec![0.0; d], other: vec![0.0; d], coupled: vec![0.0; d], delta: vec![0.0; d] }
    }

    /// Fills `delta` with the per-sample TD error.
    fn td_error(
        &mut self,
        model: &SampleModel,
        features: &FeatureMap,
        theta: &[f64],
        x: usize,
        next: usize,
    ) {
        let (a, o) = anchors(model.direction(), x, next);
        features.eval_into(a, theta, &mut self.anchor);
        features.eval_into(o, theta, &mut self.other);
        model.couple_into(x, next, &self.other, &mut self.coupled);
        model.signal_into(x, next, &mut self.delta);
        for c in 0..self.delta.len() {
            self.delta[c] += self.coupled[c] - self.anchor[c];
        }
    }
}

fn check_model(model: &SampleModel, features: &FeatureMap) -> Result<()> {
    if model.signal_dim() != features.signal_dim() {
        return Err(Error::Dimension(format!(
            "sampling model has signal dimension {}, features {}",
            model.signal_dim(),
            features.signal_dim()
        )));
    }
    Ok(())
}

/// `B + m phi(next) theta - phi(x) theta` (forward) or
/// `B + m phi(x) theta - phi(next) theta` (backward).
pub fn gentd_td_error(
    model: &SampleModel,
    features: &FeatureMap,
    theta: &DVector<f64>,
    x: usize,
    next: usize,
) -> Result<DVector<f64>> {
    check_model(model, features)?;
    let mut s = Scratch::new(model.signal_dim());
    s.td_error(model, features, theta.as_slice(), x, next);
    Ok(DVector::from_vec(s.delta))
}

/// GenTD iterate: value parameters plus the density-ratio learner.
#[derive(Clone, Debug)]
pub struct GenTdState {
    pub theta: DVector<f64>,
    pub ratio: DensityRatioState,
    pub alpha: StepSchedule,
    pub beta: StepSchedule,
    pub theta_radius: f64,
    /// Known ratio table used in place of the learned estimate in the value update.
    pub oracle_ratio: Option<DVector<f64>>,
    pub iteration: u64,
    scratch: Scratch,
}

impl GenTdState {
    pub fn new(
        features: &FeatureMap,
        ratio: DensityRatioState,
        alpha: StepSchedule,
        beta: StepSchedule,
    ) -> Self {
        Self {
            theta: DVector::zeros(features.num_params()),
            ratio,
            alpha,
            beta,
            theta_radius: DEFAULT_THETA_RADIUS,
            oracle_ratio: None,
            iteration: 0,
            scratch: Scratch::new(features.signal_dim()),
        }
    }

    /// Ratio weight applied to the sample anchored at pair `x`.
    pub fn ratio_at(&self, x: usize) -> f64 {
        match &self.oracle_ratio {
            Some(r) => r[x],
            None => self.ratio.evaluate_ratio(x),
        }
    }
}

/// One GenTD step: a density-ratio step, then
/// `theta <- Proj(theta - alpha * rho_hat(s,a) * g(x, theta))` with `g = -phi^T delta`.
pub fn gentd_step(
    state: &mut GenTdState,
    model: &SampleModel,
    features: &FeatureMap,
    x: usize,
    next: usize,
) {
    let t = state.iteration;
    let alpha = state.alpha.at(t);
    let beta = state.beta.at(t);
    let rho = state.ratio_at(x);
    state.scratch.td_error(model, features, state.theta.as_slice(), x, next);
    state.ratio.dice_step(x, next, beta);
    let (a, _) = anchors(model.direction(), x, next);
    features.add_transposed(a, &state.scratch.delta, alpha * rho, state.theta.as_mut_slice());
    project_ball_in_place(state.theta.as_mut_slice(), state.theta_radius);
    state.iteration += 1;
}

/// Two-timescale gradient-TD iterate.
#[derive(Clone, Debug)]
pub struct GtdState {
    pub theta: DVector<f64>,
    pub w: DVector<f64>,
    pub alpha: StepSchedule,
    pub beta: StepSchedule,
    pub theta_radius: f64,
    pub iteration: u64,
    scratch: Scratch,
    phi_w: Vec<f64>,
    coupled_w: Vec<f64>,
}

impl GtdState {
    pub fn new(features: &FeatureMap, alpha: StepSchedule, beta: StepSchedule) -> Self {
        let d = features.signal_dim();
        Self {
            theta: DVector::zeros(features.num_params()),
            w: DVector::zeros(features.num_params()),
            alpha,
            beta,
            theta_radius: DEFAULT_THETA_RADIUS,
            iteration: 0,
            scratch: Scratch::new(d),
            phi_w: vec![0.0; d],
            coupled_w: vec![0.0; d],
        }
    }
}

/// One GTD step with `g = -phi_a^T delta`, `l = phi_a^T phi_a w` and
/// `h = phi_o^T m^T phi_a w`, where `a` is the anchor pair and `o` the bootstrap pair:
/// `w <- w + beta (g - l)`, `theta <- Proj(theta - alpha (g - h))`.
///
/// `w` tracks `C^{-1} E[g]`, so `g - h` is a sample of the MSPBE gradient.
pub fn gtd_step(
    state: &mut GtdState,
    model: &SampleModel,
    features: &FeatureMap,
    x: usize,
    next: usize,
) {
    let t = state.iteration;
    let alpha = state.alpha.at(t);
    let beta = state.beta.at(t);
    let (a, o) = anchors(model.direction(), x, next);
    state.scratch.td_error(model, features, state.theta.as_slice(), x, next);
    features.eval_into(a, state.w.as_slice(), &mut state.phi_w);
    model.couple_transpose_into(x, next, &state.phi_w, &mut state.coupled_w);
    // theta uses w_t, so update it first. With g = -phi_a^T delta:
    // theta - alpha (g - h) = theta + alpha phi_a^T delta + alpha h.
    let theta = state.theta.as_mut_slice();
    features.add_transposed(a, &state.scratch.delta, alpha, theta);
    features.add_transposed(o, &state.coupled_w, alpha, theta);
    project_ball_in_place(theta, state.theta_radius);
    // w + beta (g - l) = w - beta phi_a^T (delta + phi_a w).
    let w = state.w.as_mut_slice();
    features.add_transposed(a, &state.scratch.delta, -beta, w);
    features.add_transposed(a, &state.phi_w, -beta, w);
    state.iteration += 1;
}

/// Exact expectations `(A_hat, b_hat, C)` of the sampled GTD system under `D . pi`:
/// `E[g(theta)] = -(A_hat theta + b_hat)`, `C = E[phi_a^T phi_a]`.
pub fn gtd_system(
    model: &SampleModel,
    features: &FeatureMap,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    check_model(model, features)?;
    let n = kernel.size();
    if d.len() != n || features.num_pairs() != n {
        return Err(Error::Dimension("GTD system inputs disagree on |S||A|".into()));
    }
    let p = features.num_params();
    let mut a_hat = DMatrix::zeros(p, p);
    let mut b_hat = DVector::zeros(p);
    let mut c = DMatrix::zeros(p, p);
    let pairs: Vec<DMatrix<f64>> = (0..n).map(|x| features.pair_matrix(x)).collect();
    for x in 0..n {
        for next in 0..n {
            let w = d.probs()[x] * kernel.matrix()[(x, next)];
            if w == 0.0 {
                continue;
            }
            let (a, o) = anchors(model.direction(), x, next);
            let m = model.coupling_matrix(x, next);
            let phi_a = &pairs[a];
            let lhs = phi_a.transpose() * w;
            a_hat += &lhs * (&m * &pairs[o] - phi_a);
            b_hat += &lhs * model.signal(x, next);
            c += &lhs * phi_a;
        }
    }
    Ok((a_hat, b_hat, c))
}

/// GTD optimum `-A_hat^{-1} b_hat` from exact expectations, for either direction.
pub fn gtd_fixed_point_case(
    model: &SampleModel,
    features: &FeatureMap,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> Result<DVector<f64>> {
    let (a, b, _) = gtd_system(model, features, d, kernel)?;
    solve_checked(a, -b, "A_hat")
}

fn solve_checked(a: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let sv = a.singular_values();
    if !(sv.min() > 1e-12 * sv.max().max(1e-300)) {
        return Err(Error::Singular(format!("{what} is singular (min singular value {:e})", sv.min())));
    }
    a.lu().solve(&rhs).ok_or_else(|| Error::Singular(what.into()))
}

/// GTD fixed point of a backward value estimate whose signal is the predecessor's reward.
#[derive(Clone, Debug, PartialEq)]
pub struct GtdFixedPoint {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub theta: DVector<f64>,
}

/// `A = gamma Phi^T P^T D Phi - Phi^T D' Phi`, `b = Phi^T P^T D R`, `theta = -A^{-1} b`,
/// where `D' = diag(P^T d)` is the successor marginal. `features` is a single scalar block.
pub fn gtd_fixed_point(
    features: &DMatrix<f64>,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
    gamma: f64,
    reward: &DVector<f64>,
) -> Result<GtdFixedPoint> {
    let n = kernel.size();
    if features.nrows() != n || d.len() != n || reward.len() != n {
        return Err(Error::Dimension("GTD fixed-point inputs disagree on |S||A|".into()));
    }
    let p = kernel.matrix();
    let dv = d.to_vector();
    let dmat = DMatrix::from_diagonal(&dv);
    let d_next = DMatrix::from_diagonal(&p.tr_mul(&dv));
    let pt_d = p.transpose() * &dmat;
    let a_bar = features.transpose() * &pt_d * features * gamma
        - features.transpose() * d_next * features;
    let b_bar = features.transpose() * &pt_d * reward;
    let theta = solve_checked(a_bar.clone(), -&b_bar, "A_bar")?;
    Ok(GtdFixedPoint { a_bar, b_bar, theta })
}

/// `J(theta) = E[g]^T C^{-1} E[g] / 2` under the behavior distribution.
pub fn mspbe(
    theta: &DVector<f64>,
    model: &SampleModel,
    features: &FeatureMap,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> Result<f64> {
    let (a, b, c) = gtd_system(model, features, d, kernel)?;
    let eg = -(a * theta + b);
    let ch = c.cholesky().ok_or_else(|| Error::RankDeficient("C = E[phi^T phi]".into()))?;
    Ok(0.5 * eg.dot(&ch.solve(&eg)))
}

/// `E_mu ||Phi theta - Gamma_mu (B + M Phi theta)||^2`.
pub fn mspgbe(theta: &DVector<f64>, op: &AssembledOperator, features: &FeatureMap) -> Result<f64> {
    check_features(op, features)?;
    let v = features.apply(theta);
    let target = apply_gbo(op, &v)?;
    let (_, proj) = project_weighted(features, op.mu(), &target)?;
    let diff = v - proj;
    let u = op.mu_lift();
    Ok(diff.iter().zip(u.iter()).map(|(e, w)| w * e * e).sum())
}

/// `||Phi theta - G||_mu` over all blocks, or the alpha-weighted norm when weights are given.
pub fn estimation_error(
    theta: &DVector<f64>,
    features: &FeatureMap,
    ground_truth: &DVector<f64>,
    mu: &StationaryDistribution,
    weights: Option<&ContractionWeights>,
) -> Result<f64> {
    let diff = features.apply(theta) - ground_truth;
    match weights {
        Some(w) => alpha_norm(&diff, w, mu, features.dims()),
        None => Ok(block_norms(&diff, mu.mu(), features.dims())?
            .iter()
            .map(|n| n * n)
            .sum::<f64>()
            .sqrt()),
    }
}

/// Expected GenTD direction `E_D[rho(s,a) phi_a^T delta]` by exhaustive enumeration.
pub fn expected_gentd_direction(
    model: &SampleModel,
    features: &FeatureMap,
    theta: &DVector<f64>,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
    ratio: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_model(model, features)?;
    let n = kernel.size();
    let mut out = DVector::zeros(features.num_params());
    let mut s = Scratch::new(model.signal_dim());
    for x in 0..n {
        for next in 0..n {
            let w = d.probs()[x] * kernel.matrix()[(x, next)] * ratio[x];
            if w == 0.0 {
                continue;
            }
            s.td_error(model, features, theta.as_slice(), x, next);
            let (a, _) = anchors(model.direction(), x, next);
            features.add_transposed(a, &s.delta, w, out.as_mut_slice());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(StepSchedule::Constant(0.3).at(1000), 0.3);
        let s = StepSchedule::InverseTime { base: 0.1, offset: 10.0 };
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert!((s.at(10) - 0.05).abs() < 1e-15);
    }
}
