//! Seeded random problem families for property checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::approx::FeatureMap;
use crate::error::Result;
use crate::gvf::{population_system, stacked_mu_lift, assemble, Direction, GvfBlockSpec};
use crate::mdp::{
    state_action_kernel, stationary_distribution, Policy, StateActionKernel,
    StationaryDistribution, TabularMdp,
};

#[derive(Clone, Debug)]
pub struct RandomProblem {
    pub kernel: StateActionKernel,
    pub mu: StationaryDistribution,
    pub spec: GvfBlockSpec,
}

#[derive(Clone, Copy, Debug)]
pub struct RandomProblemOptions {
    pub max_blocks: usize,
    pub max_pairs: usize,
    pub max_block_dim: usize,
    pub gamma_max: f64,
    /// Upper end of the entrywise coupling scale.
    pub coupling_scale: f64,
}

impl Default for RandomProblemOptions {
    fn default() -> Self {
        Self { max_blocks: 3, max_pairs: 30, max_block_dim: 2, gamma_max: 0.95, coupling_scale: 2.0 }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // Small floor keeps every chain irreducible.
    let raw: Vec<f64> = (0..n).map(|_| 0.05 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let drift: f64 = 1.0 - p.iter().sum::<f64>();
    p[n - 1] += drift;
    p
}

/// Random ergodic MDP and policy with `|S||A| <= max_pairs`.
pub fn random_chain<R: Rng + ?Sized>(
    rng: &mut R,
    max_pairs: usize,
) -> Result<(StateActionKernel, StationaryDistribution)> {
    let na = rng.random_range(1..=3usize);
    let ns = rng.random_range(2..=(max_pairs / na).clamp(2, 10));
    let rows: Vec<Vec<f64>> = (0..ns * na).map(|_| random_simplex(rng, ns)).collect();
    let mdp = TabularMdp::from_rows(ns, na, &rows, vec![0.0; ns * na], 0.5)?;
    let probs: Vec<f64> = (0..ns).flat_map(|_| random_simplex(rng, na)).collect();
    let pi = Policy::new(ns, na, probs)?;
    let kernel = state_action_kernel(&mdp, &pi)?;
    let mu = stationary_distribution(&kernel)?;
    Ok((kernel, mu))
}

/// Random block spec on a random chain; direction and block count are drawn too.
pub fn random_problem<R: Rng + ?Sized>(
    rng: &mut R,
    opts: &RandomProblemOptions,
) -> Result<RandomProblem> {
    let (kernel, mu) = random_chain(rng, opts.max_pairs)?;
    let n = kernel.size();
    let direction = if rng.random::<bool>() { Direction::Forward } else { Direction::Backward };
    let k = rng.random_range(1..=opts.max_blocks);
    let mut spec = GvfBlockSpec::new(direction, n);
    let mut gammas: Vec<f64> = (0..k).map(|_| uniform(rng, 0.2, opts.gamma_max)).collect();
    // Pin the largest discount at the family maximum so the bound is exercised at its edge.
    let top = rng.random_range(0..k);
    gammas[top] = opts.gamma_max;
    for &g in &gammas {
        let d = rng.random_range(1..=opts.max_block_dim);
        let sig = DVector::from_fn(d * n, |_, _| uniform(rng, -1.0, 1.0));
        spec.add_block(d, g, sig)?;
    }
    let scale = uniform(rng, 0.05, opts.coupling_scale);
    for i in 0..k {
        for j in 0..i {
            let (r, c) = (spec.dims()[i] * n, spec.dims()[j] * n);
            let a = DMatrix::from_fn(r, c, |_, _| scale * uniform(rng, -1.0, 1.0) / c as f64);
            spec.set_coupling(i, j, a)?;
        }
    }
    Ok(RandomProblem { kernel, mu, spec })
}

/// Random full-rank features with `1..=n` columns per block (`1..n` when `incomplete`).
pub fn random_features<R: Rng + ?Sized>(
    rng: &mut R,
    num_pairs: usize,
    dims: &[usize],
    incomplete: bool,
) -> Result<FeatureMap> {
    let hi = if incomplete { num_pairs - 1 } else { num_pairs };
    let blocks = dims
        .iter()
        .map(|_| {
            let cols = rng.random_range(1..=hi.max(1));
            DMatrix::from_fn(num_pairs, cols, |_, _| uniform(rng, -1.0, 1.0))
        })
        .collect();
    FeatureMap::new(blocks, dims.to_vec())
}

/// Rescales the couplings so that their contribution to the symmetric part of
/// `Phi^T U (M - I) Phi` uses at most half of the slack left by the diagonal blocks.
/// Returns the scale applied (1 when no shrinking was needed).
pub fn weaken_couplings(
    problem: &mut RandomProblem,
    features: &FeatureMap,
    lambda_g: f64,
) -> Result<f64> {
    let k = problem.spec.num_blocks();
    if k == 1 {
        return Ok(1.0);
    }
    let mut diag_only = problem.spec.clone();
    for i in 0..k {
        for j in 0..i {
            let shape = diag_only.coupling(i, j).map(|a| a.shape());
            if let Some((r, c)) = shape {
                diag_only.set_coupling(i, j, DMatrix::zeros(r, c))?;
            }
        }
    }
    let op_diag = assemble(&diag_only, &problem.kernel, &problem.mu)?;
    let (g_diag, _) = population_system(&op_diag, features)?;
    let sym = (&g_diag + g_diag.transpose()) * 0.5;
    let top = sym.symmetric_eigenvalues().max();
    let slack = -lambda_g - top;
    let phi = features.dense();
    let u = stacked_mu_lift(problem.mu.mu(), problem.spec.dims());
    let op_full = assemble(&problem.spec, &problem.kernel, &problem.mu)?;
    let off = &op_full.m - &op_diag.m;
    let uphi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| u[r] * phi[(r, c)]);
    let g_off = uphi.tr_mul(&(off * &phi));
    let off_norm = ((&g_off + g_off.transpose()) * 0.5).symmetric_eigenvalues().amax();
    if off_norm <= 0.5 * slack.max(0.0) {
        return Ok(1.0);
    }
    let c = (0.5 * slack.max(0.0) / off_norm).min(1.0);
    for i in 0..k {
        for j in 0..i {
            if let Some(a) = problem.spec.coupling(i, j).cloned() {
                problem.spec.set_coupling(i, j, a * c)?;
            }
        }
    }
    Ok(c)
}
