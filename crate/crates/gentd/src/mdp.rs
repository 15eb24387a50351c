//! Finite MDPs, target policies, behavior distributions and the chain they induce.
//!
//! State-action pairs are flattened as `s * num_actions + a` everywhere in the crate.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

/// Finite MDP with transition tensor `P(s'|s,a)`, reward table `r(s,a)` and discount.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// `transition[(s * A + a) * S + s']`
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidModel("empty state or action set".into()));
        }
        let n = num_states * num_actions;
        if transition.len() != n * num_states {
            return Err(Error::Dimension(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n * num_states
            )));
        }
        if reward.len() != n {
            return Err(Error::Dimension(format!(
                "reward has {} entries, expected {n}",
                reward.len()
            )));
        }
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::InvalidModel(format!("discount {discount} outside (0, 1]")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidModel("non-finite reward".into()));
        }
        for (x, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row, &format!("P(.|pair {x})"))?;
        }
        Ok(Self { num_states, num_actions, transition, reward, discount })
    }

    /// Builds from a list of per-pair rows `P(.|s,a)` in canonical pair order.
    pub fn from_rows(
        num_states: usize,
        num_actions: usize,
        rows: &[Vec<f64>],
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let transition = rows.iter().flatten().copied().collect();
        Self::new(num_states, num_actions, transition, reward, discount)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.index(s, a) * self.num_states + next]
    }

    /// Row `P(.|s,a)`.
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let start = self.index(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.index(s, a)]
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reward)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.reward.clone(),
            discount,
        )
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(self.num_states, self.num_actions, self.transition.clone(), reward, self.discount)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidModel(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Target policy `pi(a|s)`, optionally softmax-parameterized by one logit per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl Policy {
    /// Tabular policy from a row-stochastic `|S| x |A|` table (row-major).
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                num_states * num_actions
            )));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_distribution(row, &format!("pi(.|{s})"))?;
        }
        Ok(Self { num_states, num_actions, probs, weights: None })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self { num_states, num_actions, probs: vec![p; num_states * num_actions], weights: None }
    }

    /// Softmax policy `pi(a|s) = exp(w[s,a]) / sum_b exp(w[s,b])`.
    pub fn softmax(num_states: usize, num_actions: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_states * num_actions {
            return Err(Error::Dimension(format!(
                "softmax weights have {} entries, expected {}",
                weights.len(),
                num_states * num_actions
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidModel("non-finite softmax weight".into()));
        }
        let mut probs = vec![0.0; weights.len()];
        for (row, logits) in probs.chunks_mut(num_actions).zip(weights.chunks(num_actions)) {
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, l) in row.iter_mut().zip(logits) {
                *p = (l - top).exp();
                z += *p;
            }
            row.iter_mut().for_each(|p| *p /= z);
        }
        Ok(Self { num_states, num_actions, probs, weights: Some(weights) })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn action_probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn is_parameterized(&self) -> bool {
        self.weights.is_some()
    }

    /// Number of policy parameters (`|S||A|` for softmax policies).
    pub fn num_params(&self) -> Result<usize> {
        self.weights.as_ref().map(|w| w.len()).ok_or(Error::NotParameterized)
    }

    /// Score matrix: row `(s,a)` is `grad_w log pi(a|s)`.
    pub fn score_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.num_states * self.num_actions;
        let mut out = DMatrix::zeros(n, n);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = softmax_score(self, s, a)?;
                out.row_mut(s * self.num_actions + a).copy_from(&row.transpose());
            }
        }
        Ok(out)
    }
}

/// `grad_w log pi_w(a|s)`: `1[a = b] - pi(b|s)` on the coordinates of state `s`, zero elsewhere.
pub fn softmax_score(pi: &Policy, s: usize, a: usize) -> Result<DVector<f64>> {
    if !pi.is_parameterized() {
        return Err(Error::NotParameterized);
    }
    let na = pi.num_actions;
    let mut g = DVector::zeros(pi.num_states * na);
    for b in 0..na {
        g[s * na + b] = if a == b { 1.0 } else { 0.0 } - pi.prob(s, b);
    }
    Ok(g)
}

/// Behavior distribution `D(s,a)` over state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorDistribution {
    d: Vec<f64>,
}

impl BehaviorDistribution {
    /// Strictly positive distribution, as off-policy evaluation requires.
    pub fn new(d: Vec<f64>) -> Result<Self> {
        check_distribution(&d, "behavior distribution")?;
        if let Some(i) = d.iter().position(|p| *p <= 0.0) {
            return Err(Error::InvalidModel(format!("behavior distribution vanishes at pair {i}")));
        }
        Ok(Self { d })
    }

    /// Distribution that may vanish on some pairs. Density ratios are undefined there.
    pub fn with_support(d: Vec<f64>) -> Result<Self> {
        check_distribution(&d, "behavior distribution")?;
        Ok(Self { d })
    }

    pub fn uniform(n: usize) -> Self {
        Self { d: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.d
    }

    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.d)
    }
}

/// Row-stochastic state-action kernel `P_pi((s,a),(s',a')) = P(s'|s,a) pi(a'|s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateActionKernel {
    matrix: DMatrix<f64>,
}

impl StateActionKernel {
    /// Wraps an arbitrary row-stochastic matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::Dimension("kernel must be square".into()));
        }
        for (x, row) in matrix.row_iter().enumerate() {
            let row: Vec<f64> = row.iter().copied().collect();
            check_distribution(&row, &format!("kernel row {x}"))?;
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn state_action_kernel(mdp: &TabularMdp, pi: &Policy) -> Result<StateActionKernel> {
    if mdp.num_states != pi.num_states || mdp.num_actions != pi.num_actions {
        return Err(Error::Dimension(format!(
            "mdp is {}x{}, policy is {}x{}",
            mdp.num_states, mdp.num_actions, pi.num_states, pi.num_actions
        )));
    }
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let n = ns * na;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..ns {
        for a in 0..na {
            let x = s * na + a;
            for next in 0..ns {
                let p = mdp.prob(s, a, next);
                if p == 0.0 {
                    continue;
                }
                for b in 0..na {
                    m[(x, next * na + b)] = p * pi.prob(next, b);
                }
            }
        }
    }
    Ok(StateActionKernel { matrix: m })
}

/// Stationary distribution `mu` of a state-action kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryDistribution {
    mu: DVector<f64>,
}

impl StationaryDistribution {
    /// Wraps a strictly positive probability vector without checking stationarity.
    pub fn from_vector(mu: DVector<f64>) -> Result<Self> {
        check_distribution(mu.as_slice(), "stationary distribution")?;
        if let Some(i) = mu.iter().position(|p| *p <= 0.0) {
            return Err(Error::NonErgodic { index: i, mass: mu[i] });
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Diagonal of `diag(mu) (x) I_d`.
    pub fn lift(&self, d: usize) -> DVector<f64> {
        DVector::from_fn(self.mu.len() * d, |i, _| self.mu[i / d])
    }

    /// `diag(mu) (x) I_d` as a dense matrix.
    pub fn lift_matrix(&self, d: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.lift(d))
    }

    /// `max |mu^T P - mu^T|`.
    pub fn residual(&self, kernel: &StateActionKernel) -> f64 {
        let r = kernel.matrix.tr_mul(&self.mu) - &self.mu;
        r.amax()
    }
}

pub fn stationary_distribution(kernel: &StateActionKernel) -> Result<StationaryDistribution> {
    let n = kernel.size();
    let p = &kernel.matrix;
    // mu^T (P - I) = 0 with the last balance equation traded for sum(mu) = 1.
    let mut sys = p.transpose() - DMatrix::identity(n, n);
    sys.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let direct = sys.lu().solve(&rhs).filter(|mu| {
        let r = p.tr_mul(mu) - mu;
        mu.iter().all(|v| v.is_finite()) && r.amax() <= STATIONARY_TOL
    });
    let mu = match direct {
        Some(mu) => mu,
        None => {
            log::warn!("stationary solve ill-conditioned, falling back to power iteration");
            power_stationary(p, 1_000_000)?
        }
    };
    if let Some(i) = mu.iter().position(|v| *v <= 1e-300) {
        return Err(Error::NonErgodic { index: i, mass: mu[i] });
    }
    let total = mu.sum();
    let mu = mu / total;
    let out = StationaryDistribution { mu };
    let res = out.residual(kernel);
    if res > STATIONARY_TOL {
        return Err(Error::NonConvergence(format!("stationary residual {res:e}")));
    }
    Ok(out)
}

/// Power iteration on the lazy chain `(P + I) / 2`, which shares `mu` and is aperiodic.
fn power_stationary(p: &DMatrix<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let n = p.nrows();
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iter {
        let next = (p.tr_mul(&mu) + &mu) * 0.5;
        let delta = (&next - &mu).amax();
        mu = next;
        if delta < 1e-15 {
            return Ok(mu);
        }
    }
    let r = (p.tr_mul(&mu) - &mu).amax();
    if r <= STATIONARY_TOL {
        Ok(mu)
    } else {
        Err(Error::NonConvergence(format!("power iteration residual {r:e}")))
    }
}

/// One off-policy transition `(s, a, s', a')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub next_s: usize,
    pub next_a: usize,
}

impl Transition {
    pub fn pair(&self, num_actions: usize) -> usize {
        self.s * num_actions + self.a
    }

    pub fn next_pair(&self, num_actions: usize) -> usize {
        self.next_s * num_actions + self.next_a
    }
}

/// Inverse-CDF sampler for `(s,a) ~ D`, `s' ~ P(.|s,a)`, `a' ~ pi(.|s')`.
#[derive(Clone, Debug)]
pub struct TransitionSampler {
    num_states: usize,
    num_actions: usize,
    pair_cdf: Vec<f64>,
    next_state_cdf: Vec<Vec<f64>>,
    action_cdf: Vec<Vec<f64>>,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    // Last index with positive mass absorbs round-off in the final cumulative sum.
    let i = cdf.partition_point(|c| *c <= u);
    if i < cdf.len() {
        return i;
    }
    let last = cdf[cdf.len() - 1];
    cdf.iter().position(|c| *c >= last).unwrap_or(cdf.len() - 1)
}

impl TransitionSampler {
    pub fn new(d: &BehaviorDistribution, mdp: &TabularMdp, pi: &Policy) -> Result<Self> {
        let n = mdp.num_pairs();
        if d.len() != n || pi.num_states != mdp.num_states || pi.num_actions != mdp.num_actions {
            return Err(Error::Dimension("sampler inputs disagree on |S||A|".into()));
        }
        Ok(Self {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            pair_cdf: cumulative(d.probs()),
            next_state_cdf: (0..n)
                .map(|x| cumulative(&mdp.transition[x * mdp.num_states..(x + 1) * mdp.num_states]))
                .collect(),
            action_cdf: (0..mdp.num_states).map(|s| cumulative(pi.action_probs(s))).collect(),
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Transition {
        let x = draw(&self.pair_cdf, rng.random::<f64>());
        let (s, a) = (x / self.num_actions, x % self.num_actions);
        let next_s = draw(&self.next_state_cdf[x], rng.random::<f64>());
        let next_a = draw(&self.action_cdf[next_s], rng.random::<f64>());
        debug_assert!(next_s < self.num_states);
        Transition { s, a, next_s, next_a }
    }
}

/// Draws one transition. Loops should build a [`TransitionSampler`] once instead.
pub fn sample_transition<R: Rng + ?Sized>(
    d: &BehaviorDistribution,
    mdp: &TabularMdp,
    pi: &Policy,
    rng: &mut R,
) -> Result<Transition> {
    Ok(TransitionSampler::new(d, mdp, pi)?.sample(rng))
}

/// `Q = (I - gamma P_pi)^{-1} R`.
pub fn q_function(mdp: &TabularMdp, pi: &Policy) -> Result<DVector<f64>> {
    if mdp.discount >= 1.0 {
        return Err(Error::Singular("Q-function needs a discount below 1".into()));
    }
    let kernel = state_action_kernel(mdp, pi)?;
    let n = mdp.num_pairs();
    let sys = DMatrix::identity(n, n) - kernel.matrix * mdp.discount;
    sys.lu()
        .solve(&mdp.reward_vector())
        .ok_or_else(|| Error::Singular("I - gamma P_pi".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.3, 0.7],
            vec![1.0, 0.0, 0.5, 2.0],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![f64::NAN], 0.5).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.5).is_err());
        assert!(BehaviorDistribution::new(vec![1.0, 0.0]).is_err());
        assert!(BehaviorDistribution::with_support(vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        let mdp = two_state();
        let pi = Policy::new(2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        for row in k.matrix().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((k.matrix()[(1, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn self_loop_kernel_spreads_by_policy() {
        let mdp = TabularMdp::new(2, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0], vec![0.0; 4], 0.5)
            .unwrap();
        let pi = Policy::new(2, 2, vec![0.25, 0.75, 0.5, 0.5]).unwrap();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let expect = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.25, 0.75, 0.0, 0.0, 0.25, 0.75, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5,
            ],
        );
        assert_eq!(k.matrix(), &expect);
    }

    #[test]
    fn doubly_stochastic_gives_uniform() {
        let m = DMatrix::from_row_slice(3, 3, &[0.2, 0.5, 0.3, 0.3, 0.2, 0.5, 0.5, 0.3, 0.2]);
        let mu = stationary_distribution(&StateActionKernel::from_matrix(m).unwrap()).unwrap();
        for v in mu.mu().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reducible_chain_is_flagged() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        let err = stationary_distribution(&StateActionKernel::from_matrix(m).unwrap());
        assert!(matches!(err, Err(Error::NonErgodic { .. })));
    }

    #[test]
    fn periodic_chain_still_solves() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mu = stationary_distribution(&StateActionKernel::from_matrix(m).unwrap()).unwrap();
        assert!((mu.mu()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn q_function_trivial_cases() {
        let mdp = two_state().with_reward(vec![0.0; 4]).unwrap();
        let pi = Policy::uniform(2, 2);
        assert!(q_function(&mdp, &pi).unwrap().amax() == 0.0);
        let mdp = two_state();
        let q = q_function(&mdp, &pi).unwrap();
        let k = state_action_kernel(&mdp, &pi).unwrap();
        let res = &q - mdp.reward_vector() - k.matrix() * &q * mdp.discount();
        assert!(res.amax() < 1e-10);
        assert!(q_function(&mdp.with_discount(1.0).unwrap(), &pi).is_err());
    }

    #[test]
    fn softmax_score_equal_logits() {
        let pi = Policy::softmax(2, 2, vec![0.3, 0.3, 0.0, 1.0]).unwrap();
        let g = softmax_score(&pi, 0, 0).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(matches!(softmax_score(&Policy::uniform(2, 2), 0, 0), Err(Error::NotParameterized)));
    }

    #[test]
    fn point_mass_sampling_is_fixed() {
        let mdp = TabularMdp::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0], 0.5).unwrap();
        let pi = Policy::uniform(2, 1);
        let d = BehaviorDistribution::with_support(vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = sample_transition(&d, &mdp, &pi, &mut rng).unwrap();
            assert_eq!(t, Transition { s: 0, a: 0, next_s: 1, next_a: 0 });
        }
    }
}
