//! Built-in environments.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::mdp::{BehaviorDistribution, Policy, StateActionKernel, StationaryDistribution, TabularMdp};

pub const BAIRD_STATES: usize = 7;
pub const BAIRD_ACTIONS: usize = 2;
pub const BAIRD_DISCOUNT: f64 = 0.99;
/// Logit of the solid action relative to the dash action in every state.
pub const BAIRD_SOLID_LOGIT: f64 = 1.8;
pub const EXAMPLE1_DISCOUNT: f64 = 0.9;

/// Seven-state Baird variant. Action 0 ("dash") moves uniformly to states 0..=5 with
/// reward 1; action 1 ("solid") moves to state 6 with reward 0.
pub fn build_baird() -> Result<(TabularMdp, Policy, BehaviorDistribution)> {
    let (ns, na) = (BAIRD_STATES, BAIRD_ACTIONS);
    let mut rows = Vec::with_capacity(ns * na);
    let mut reward = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let mut dash = vec![1.0 / 6.0; 6];
        dash.push(0.0);
        let mut solid = vec![0.0; 6];
        solid.push(1.0);
        rows.push(dash);
        rows.push(solid);
        reward.extend([1.0, 0.0]);
    }
    let mdp = TabularMdp::from_rows(ns, na, &rows, reward, BAIRD_DISCOUNT)?;
    let weights = (0..ns).flat_map(|_| [0.0, BAIRD_SOLID_LOGIT]).collect();
    let pi = Policy::softmax(ns, na, weights)?;
    let mut d = vec![0.2, 0.1, 0.2, 0.1];
    d.extend([0.04; 10]);
    Ok((mdp, pi, BehaviorDistribution::new(d)?))
}

/// Example 1 chain with its default discount.
pub fn build_example1() -> Result<(TabularMdp, Policy, BehaviorDistribution)> {
    build_example1_with_discount(EXAMPLE1_DISCOUNT)
}

/// Three-state, single-action chain with rewards `[1, 0, 1]` and uniform `D`.
///
/// Row `s` of the transition matrix is the distribution of the next state from `s`:
/// `[[0.1, 0.9, 0], [0.1, 0, 0.9], [0, 0.1, 0.9]]`. This is the orientation under which
/// the published backward values are reproduced.
pub fn build_example1_with_discount(
    discount: f64,
) -> Result<(TabularMdp, Policy, BehaviorDistribution)> {
    let rows = vec![vec![0.1, 0.9, 0.0], vec![0.1, 0.0, 0.9], vec![0.0, 0.1, 0.9]];
    let mdp = TabularMdp::from_rows(3, 1, &rows, vec![1.0, 0.0, 1.0], discount)?;
    Ok((mdp, Policy::uniform(3, 1), BehaviorDistribution::uniform(3)))
}

/// Backward value `U^{-1} (I - gamma P^T)^{-1} P^T U R` of the predecessor's reward.
pub fn example1_backward_value(
    kernel: &StateActionKernel,
    mu: &StationaryDistribution,
    gamma: f64,
    reward: &DVector<f64>,
) -> Option<DVector<f64>> {
    let p = kernel.matrix();
    let n = p.nrows();
    let u = mu.mu();
    let ur = reward.component_mul(u);
    let sys = DMatrix::identity(n, n) - p.transpose() * gamma;
    let inner = sys.lu().solve(&p.tr_mul(&ur))?;
    Some(inner.component_div(u))
}
