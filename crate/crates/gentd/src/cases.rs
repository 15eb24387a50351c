//! Block specs for concrete GVFs, each paired with a per-transition sampling model.
//!
//! A sampling model maps a transition `x = (s,a,s',a')` to a signal sample and a
//! coupling matrix `m(x)`. Forward models must satisfy
//! `E[signal + m(x) v(s',a') | s,a] = (B + M v)(s,a)`; backward models satisfy the same
//! identity conditioned on the successor pair under the reversed chain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gvf::{
    assemble, backward_kernel, AssembledOperator, ConstantPinning, Direction, GvfBlockSpec,
};
use crate::mdp::{
    state_action_kernel, Policy, StateActionKernel, StationaryDistribution, TabularMdp,
};

/// Per-transition signal and coupling for the cases that admit stochastic updates.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleModel {
    /// Plain value function: signal `r(s,a)`, `m = gamma`.
    Canonical { gamma: f64, reward: Vec<f64> },
    /// Return and second moment: signal `[r, r^2]`, `m = [[gamma, 0], [2 gamma r, gamma^2]]`.
    Variance { gamma: f64, reward: Vec<f64> },
    /// Q and its policy gradient: signal `[r, 0]`,
    /// `m = [[gamma, 0], [gamma score(s',a'), gamma I]]`.
    GradQ { gamma: f64, reward: Vec<f64>, score: DMatrix<f64> },
    /// Backward accumulation of a cost at the successor: `m = gamma`.
    Anomaly { gamma: f64, cost: Vec<f64> },
    /// Backward accumulation of the predecessor's reward: `m = gamma`.
    PredecessorReward { gamma: f64, reward: Vec<f64> },
    /// Gradient of the log stationary distribution: signal `score(s',a')`, `m = I`.
    GradLogMu { score: DMatrix<f64> },
}

impl SampleModel {
    pub fn direction(&self) -> Direction {
        match self {
            Self::Canonical { .. } | Self::Variance { .. } | Self::GradQ { .. } => Direction::Forward,
            _ => Direction::Backward,
        }
    }

    /// Total signal dimension `sum d_i`.
    pub fn signal_dim(&self) -> usize {
        match self {
            Self::Canonical { .. } | Self::Anomaly { .. } | Self::PredecessorReward { .. } => 1,
            Self::Variance { .. } => 2,
            Self::GradQ { score, .. } => 1 + score.ncols(),
            Self::GradLogMu { score } => score.ncols(),
        }
    }

    /// Signal sample for the transition `x -> next` between flattened pairs.
    pub fn signal_into(&self, x: usize, next: usize, out: &mut [f64]) {
        match self {
            Self::Canonical { reward, .. } => out[0] = reward[x],
            Self::Variance { reward, .. } => {
                out[0] = reward[x];
                out[1] = reward[x] * reward[x];
            }
            Self::GradQ { reward, .. } => {
                out[0] = reward[x];
                out[1..].fill(0.0);
            }
            Self::Anomaly { cost, .. } => out[0] = cost[next],
            Self::PredecessorReward { reward, .. } => out[0] = reward[x],
            Self::GradLogMu { score } => {
                for (o, s) in out.iter_mut().zip(score.row(next).iter()) {
                    *o = *s;
                }
            }
        }
    }

    /// `out = m(x) v`.
    pub fn couple_into(&self, x: usize, next: usize, v: &[f64], out: &mut [f64]) {
        match self {
            Self::Canonical { gamma, .. }
            | Self::Anomaly { gamma, .. }
            | Self::PredecessorReward { gamma, .. } => out[0] = gamma * v[0],
            Self::Variance { gamma, reward } => {
                out[0] = gamma * v[0];
                out[1] = 2.0 * gamma * reward[x] * v[0] + gamma * gamma * v[1];
            }
            Self::GradQ { gamma, score, .. } => {
                out[0] = gamma * v[0];
                for c in 0..score.ncols() {
                    out[1 + c] = gamma * (score[(next, c)] * v[0] + v[1 + c]);
                }
            }
            Self::GradLogMu { .. } => out.copy_from_slice(v),
        }
    }

    /// `out = m(x)^T v`.
    pub fn couple_transpose_into(&self, x: usize, next: usize, v: &[f64], out: &mut [f64]) {
        match self {
            Self::Variance { gamma, reward } => {
                out[0] = gamma * v[0] + 2.0 * gamma * reward[x] * v[1];
                out[1] = gamma * gamma * v[1];
            }
            Self::GradQ { gamma, score, .. } => {
                let mut first = v[0];
                for c in 0..score.ncols() {
                    first += score[(next, c)] * v[1 + c];
                    out[1 + c] = gamma * v[1 + c];
                }
                out[0] = gamma * first;
            }
            _ => self.couple_into(x, next, v, out),
        }
    }

    pub fn signal(&self, x: usize, next: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.signal_dim());
        self.signal_into(x, next, out.as_mut_slice());
        out
    }

    /// Dense `m(x)`.
    pub fn coupling_matrix(&self, x: usize, next: usize) -> DMatrix<f64> {
        let d = self.signal_dim();
        let mut out = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        let mut col = vec![0.0; d];
        for j in 0..d {
            e.fill(0.0);
            e[j] = 1.0;
            self.couple_into(x, next, &e, &mut col);
            out.column_mut(j).copy_from_slice(&col);
        }
        out
    }
}

/// A GVF spec together with its sampling model, if the case has one.
#[derive(Clone, Debug)]
pub struct GvfCase {
    pub name: &'static str,
    pub spec: GvfBlockSpec,
    pub sampler: Option<SampleModel>,
}

impl GvfCase {
    pub fn assemble(
        &self,
        kernel: &StateActionKernel,
        mu: &StationaryDistribution,
    ) -> Result<AssembledOperator> {
        assemble(&self.spec, kernel, mu)
    }

    pub fn sampler(&self) -> Result<&SampleModel> {
        self.sampler.as_ref().ok_or(Error::NoSampler)
    }

    pub fn direction(&self) -> Direction {
        self.spec.direction()
    }
}

/// Enumerates the sampling model exhaustively and returns the implied `B + M v`.
///
/// Forward rows condition on `(s,a)` and average over `P_pi`; backward rows condition on
/// `(s',a')` and average over the reversed kernel `U^{-1} P_pi^T U`.
pub fn expected_operator_rows(
    model: &SampleModel,
    kernel: &StateActionKernel,
    mu: &StationaryDistribution,
    dims: &[usize],
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = kernel.size();
    let d: usize = dims.iter().sum();
    if d != model.signal_dim() || v.len() != d * n {
        return Err(Error::Dimension("sampling model and vector disagree".into()));
    }
    let offsets = crate::gvf::block_offsets(dims, n);
    let gather = |x: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(d);
        for (&off, &di) in offsets.iter().zip(dims) {
            out.extend((0..di).map(|c| v[off + x * di + c]));
        }
        out
    };
    let (weights, forward) = match model.direction() {
        Direction::Forward => (kernel.matrix().clone(), true),
        Direction::Backward => (backward_kernel(kernel, mu), false),
    };
    let mut out = DVector::zeros(d * n);
    let mut sig = vec![0.0; d];
    let mut coupled = vec![0.0; d];
    for row in 0..n {
        let mut acc = vec![0.0; d];
        for other in 0..n {
            let p = weights[(row, other)];
            if p == 0.0 {
                continue;
            }
            let (x, next, at) = if forward { (row, other, other) } else { (other, row, other) };
            model.signal_into(x, next, &mut sig);
            model.couple_into(x, next, &gather(at), &mut coupled);
            for c in 0..d {
                acc[c] += p * (sig[c] + coupled[c]);
            }
        }
        let mut k = 0;
        for (&off, &di) in offsets.iter().zip(dims) {
            for c in 0..di {
                out[off + row * di + c] = acc[k];
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Plain forward value function `Q = R + gamma P_pi Q`.
pub fn canonical_case(mdp: &TabularMdp) -> Result<GvfCase> {
    let n = mdp.num_pairs();
    let mut spec = GvfBlockSpec::new(Direction::Forward, n);
    spec.add_block(1, mdp.discount(), mdp.reward_vector())?;
    Ok(GvfCase {
        name: "canonical",
        spec,
        sampler: Some(SampleModel::Canonical {
            gamma: mdp.discount(),
            reward: mdp.reward_vector().as_slice().to_vec(),
        }),
    })
}

/// Return and its second moment `H = R^2 + 2 gamma M_R P_pi Q + gamma^2 P_pi H`.
pub fn variance_case(mdp: &TabularMdp, pi: &Policy) -> Result<GvfCase> {
    let kernel = state_action_kernel(mdp, pi)?;
    let n = mdp.num_pairs();
    let g = mdp.discount();
    let r = mdp.reward_vector();
    let mut spec = GvfBlockSpec::new(Direction::Forward, n);
    spec.add_block(1, g, r.clone())?;
    spec.add_block(1, g * g, r.component_mul(&r))?;
    let a21 = DMatrix::from_fn(n, n, |x, y| 2.0 * g * r[x] * kernel.matrix()[(x, y)]);
    spec.set_coupling(1, 0, a21)?;
    Ok(GvfCase {
        name: "variance",
        spec,
        sampler: Some(SampleModel::Variance { gamma: g, reward: r.as_slice().to_vec() }),
    })
}

/// Q and its gradient in the softmax weights,
/// `grad Q = gamma [P_pi (x) I] diag(grad Pi) Q + gamma [P_pi (x) I] grad Q`.
pub fn grad_q_case(mdp: &TabularMdp, pi: &Policy) -> Result<GvfCase> {
    let score = pi.score_matrix()?;
    let kernel = state_action_kernel(mdp, pi)?;
    let n = mdp.num_pairs();
    let dw = score.ncols();
    let g = mdp.discount();
    let r = mdp.reward_vector();
    let mut spec = GvfBlockSpec::new(Direction::Forward, n);
    spec.add_block(1, g, r.clone())?;
    spec.add_block(dw, g, DVector::zeros(n * dw))?;
    let p = kernel.matrix();
    let a21 = DMatrix::from_fn(n * dw, n, |row, y| g * p[(row / dw, y)] * score[(y, row % dw)]);
    spec.set_coupling(1, 0, a21)?;
    Ok(GvfCase {
        name: "grad_q",
        spec,
        sampler: Some(SampleModel::GradQ { gamma: g, reward: r.as_slice().to_vec(), score }),
    })
}

/// Jacobians of a stochastic-value-gradient model, stacked over pairs.
#[derive(Clone, Debug)]
pub struct SvgJacobians {
    pub state_dim: usize,
    pub action_dim: usize,
    pub param_dim: usize,
    /// `d_s |S||A|`
    pub reward_state: DVector<f64>,
    /// `d_a |S||A|`
    pub reward_action: DVector<f64>,
    /// `d_s|S||A| x d_a|S||A|`
    pub policy_state: DMatrix<f64>,
    /// `d_w|S||A| x d_a|S||A|`
    pub policy_param: DMatrix<f64>,
    /// `d_s|S||A| x d_s|S||A|`
    pub model_state: DMatrix<f64>,
    /// `d_a|S||A| x d_s|S||A|`
    pub model_action: DMatrix<f64>,
}

/// Three-block spec `[Q_s; Q_a; grad_w Q]`. Operator assembly and ground truth only; the
/// returned flag reports whether the state-gradient transition is non-expansive.
pub fn svg_case(
    jac: &SvgJacobians,
    kernel: &StateActionKernel,
    mu: &StationaryDistribution,
    gamma: f64,
) -> Result<(GvfCase, bool)> {
    let n = kernel.size();
    let (ds, da, dw) = (jac.state_dim, jac.action_dim, jac.param_dim);
    let shape_ok = jac.reward_state.len() == ds * n
        && jac.reward_action.len() == da * n
        && jac.policy_state.shape() == (ds * n, da * n)
        && jac.policy_param.shape() == (dw * n, da * n)
        && jac.model_state.shape() == (ds * n, ds * n)
        && jac.model_action.shape() == (da * n, ds * n);
    if !shape_ok {
        return Err(Error::Dimension("SVG Jacobian shapes".into()));
    }
    let mut spec = GvfBlockSpec::new(Direction::Forward, n);
    spec.add_block(ds, gamma, &jac.reward_state + &jac.policy_state * &jac.reward_action)?;
    spec.add_block(da, gamma, jac.reward_action.clone())?;
    spec.add_block(dw, gamma, DVector::zeros(dw * n))?;
    let transfer = &jac.policy_state * &jac.model_action + &jac.model_state;
    spec.set_diagonal_transform(0, transfer)?;
    let lift_s = kernel.matrix().kronecker(&DMatrix::<f64>::identity(ds, ds));
    spec.set_coupling(1, 0, &jac.model_action * lift_s * gamma)?;
    spec.set_coupling(2, 1, jac.policy_param.clone())?;
    let ok = check_nonexpansive(
        &jac.policy_state,
        &jac.model_action,
        &jac.model_state,
        mu,
        ds,
        64,
    );
    if !ok {
        log::warn!("state-gradient transition is expansive in the mu-norm");
    }
    Ok((GvfCase { name: "svg", spec, sampler: None }, ok))
}

/// Whether `Pi_s F_a + F_s` is non-expansive in the `mu`-norm, by power iteration plus
/// `trials` random probes.
pub fn check_nonexpansive(
    policy_state: &DMatrix<f64>,
    model_action: &DMatrix<f64>,
    model_state: &DMatrix<f64>,
    mu: &StationaryDistribution,
    state_dim: usize,
    trials: usize,
) -> bool {
    let t = policy_state * model_action + model_state;
    let w = mu.lift(state_dim).map(f64::sqrt);
    let scaled = DMatrix::from_fn(t.nrows(), t.ncols(), |r, c| w[r] * t[(r, c)] / w[c]);
    let gram = scaled.tr_mul(&scaled);
    let mut v = DVector::from_fn(gram.nrows(), |i, _| 1.0 + (i % 7) as f64 * 0.05);
    let mut est: f64 = 0.0;
    for _ in 0..1000 {
        let next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 {
            break;
        }
        est = est.max((norm / v.norm()).sqrt());
        v = next / norm;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..trials {
        let probe = DVector::from_fn(scaled.ncols(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let pn = probe.norm();
        if pn > 0.0 {
            est = est.max((&scaled * &probe).norm() / pn);
        }
    }
    est <= 1.0 + 1e-9
}

/// Backward GVF `e = i + gamma U^{-1} P_pi^T U e` of a per-pair cost observed at the
/// successor.
pub fn anomaly_case(
    cost: DVector<f64>,
    kernel: &StateActionKernel,
    gamma: f64,
) -> Result<GvfCase> {
    let n = kernel.size();
    let mut spec = GvfBlockSpec::new(Direction::Backward, n);
    let raw = cost.as_slice().to_vec();
    spec.add_block(1, gamma, cost)?;
    Ok(GvfCase {
        name: "anomaly",
        spec,
        sampler: Some(SampleModel::Anomaly { gamma, cost: raw }),
    })
}

/// Backward value of the predecessor's reward, `V = U^{-1} (I - gamma P^T)^{-1} P^T U R`,
/// i.e. signal `U^{-1} P^T U R` with the backward lift.
pub fn backward_value_case(
    mdp: &TabularMdp,
    kernel: &StateActionKernel,
    mu: &StationaryDistribution,
) -> Result<GvfCase> {
    let n = kernel.size();
    let r = mdp.reward_vector();
    let signal = backward_kernel(kernel, mu) * &r;
    let mut spec = GvfBlockSpec::new(Direction::Backward, n);
    spec.add_block(1, mdp.discount(), signal)?;
    Ok(GvfCase {
        name: "backward_value",
        spec,
        sampler: Some(SampleModel::PredecessorReward {
            gamma: mdp.discount(),
            reward: r.as_slice().to_vec(),
        }),
    })
}

/// `grad_w log mu = score + U^{-1} [P_pi^T (x) I] U grad_w log mu`, a unit-discount
/// backward GVF whose ground truth is pinned by `pinning`.
pub fn grad_logmu_case(pi: &Policy, num_pairs: usize, pinning: ConstantPinning) -> Result<GvfCase> {
    let score = pi.score_matrix()?;
    if score.nrows() != num_pairs {
        return Err(Error::Dimension("policy does not match the pair count".into()));
    }
    let dw = score.ncols();
    let mut spec = GvfBlockSpec::new(Direction::Backward, num_pairs);
    let signal = DVector::from_fn(num_pairs * dw, |i, _| score[(i / dw, i % dw)]);
    spec.add_block(dw, 1.0, signal)?;
    spec.enable_unit_discount(pinning);
    Ok(GvfCase { name: "grad_logmu", spec, sampler: Some(SampleModel::GradLogMu { score }) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gvf::{apply_gbo, solve_ground_truth};
    use crate::mdp::stationary_distribution;

    fn chain() -> (TabularMdp, Policy) {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 1.0, 0.0, 0.2, 0.8, 0.3, 0.7],
            vec![1.0, -0.5, 0.5, 2.0],
            0.8,
        )
        .unwrap();
        (mdp, Policy::softmax(2, 2, vec![0.1, -0.4, 0.7, 0.2]).unwrap())
    }

    #[test]
    fn coupling_transpose_matches_dense() {
        let (mdp, pi) = chain();
        for case in [variance_case(&mdp, &pi).unwrap(), grad_q_case(&mdp, &pi).unwrap()] {
            let model = case.sampler().unwrap();
            let d = model.signal_dim();
            let v: Vec<f64> = (0..d).map(|i| (i as f64 * 0.7).cos()).collect();
            let mut out = vec![0.0; d];
            model.couple_transpose_into(1, 3, &v, &mut out);
            let expect = model.coupling_matrix(1, 3).transpose() * DVector::from_vec(v);
            assert!((DVector::from_vec(out) - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn sampling_models_reproduce_operators() {
        let (mdp, pi) = chain();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let mu = stationary_distribution(&k).unwrap();
        let cases = vec![
            canonical_case(&mdp).unwrap(),
            variance_case(&mdp, &pi).unwrap(),
            grad_q_case(&mdp, &pi).unwrap(),
            anomaly_case(DVector::from_vec(vec![0.0, 1.0, 0.3, 0.0]), &k, 0.7).unwrap(),
            backward_value_case(&mdp, &k, &mu).unwrap(),
            grad_logmu_case(&pi, 4, ConstantPinning::MuWeighted).unwrap(),
        ];
        for case in cases {
            let op = case.assemble(&k, &mu).unwrap();
            let v = DVector::from_fn(op.total_len(), |i, _| (i as f64 * 1.3).sin());
            let model = case.sampler().unwrap();
            let rows = expected_operator_rows(model, &k, &mu, case.spec.dims(), &v).unwrap();
            let direct = apply_gbo(&op, &v).unwrap();
            assert!((rows - direct).amax() < 1e-12, "{}", case.name);
        }
    }

    #[test]
    fn zero_cost_anomaly_is_zero() {
        let (mdp, pi) = chain();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let mu = stationary_distribution(&k).unwrap();
        let case = anomaly_case(DVector::zeros(4), &k, 0.9).unwrap();
        let e = solve_ground_truth(&case.assemble(&k, &mu).unwrap()).unwrap();
        assert_eq!(e.amax(), 0.0);
    }

    #[test]
    fn nonexpansive_check_detects_scaling() {
        let (mdp, pi) = chain();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let mu = stationary_distribution(&k).unwrap();
        let zero = DMatrix::zeros(4, 4);
        let eye = DMatrix::identity(4, 4);
        assert!(check_nonexpansive(&zero, &zero, &eye, &mu, 1, 16));
        assert!(!check_nonexpansive(&zero, &zero, &(eye * 1.5), &mu, 1, 16));
    }
}
