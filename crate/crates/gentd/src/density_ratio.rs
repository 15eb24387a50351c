//! Primal-dual estimation of the density ratio `rho = mu_pi / D` from off-policy samples.
//!
//! The ratio and the critic `f` are linear in features `psi`. The saddle objective is
//! `E_D[rho (f' - f)] - E_D[f^2] / 2 + E_D[eta rho - eta] - eta^2 / 2`, minimized in `rho`
//! and maximized in `(f, eta)`.

use nalgebra::{DMatrix, DVector};

use crate::approx::project_ball_in_place;
use crate::error::{Error, Result};
use crate::mdp::{BehaviorDistribution, StateActionKernel, StationaryDistribution};

pub const DEFAULT_RATIO_RADIUS: f64 = 1e3;
const CONDITIONING_WARN: f64 = 1e-8;

/// Starting point of the ratio weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RatioInit {
    Zero,
    /// Least-squares fit of `psi^T w = 1` under `D`, i.e. the on-policy guess.
    #[default]
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityRatioState {
    psi: DMatrix<f64>,
    pub w_rho: DVector<f64>,
    pub w_f: DVector<f64>,
    pub eta: f64,
    pub radius: f64,
    /// Clip negative ratio estimates at zero when read back.
    pub clip_negative: bool,
    /// Coefficient of an optional `l2` penalty on `w_rho`.
    pub l2: f64,
}

impl DensityRatioState {
    pub fn new(psi: DMatrix<f64>, d: &BehaviorDistribution, init: RatioInit) -> Result<Self> {
        if psi.nrows() != d.len() {
            return Err(Error::Dimension("ratio features and behavior distribution differ".into()));
        }
        let sv = psi.singular_values();
        if psi.ncols() > psi.nrows() || sv.min() <= 1e-10 * sv.max().max(1e-300) {
            return Err(Error::RankDeficient("ratio features".into()));
        }
        let k = psi.ncols();
        let w_rho = match init {
            RatioInit::Zero => DVector::zeros(k),
            RatioInit::Ones => {
                let dv = d.to_vector();
                let wpsi = DMatrix::from_fn(psi.nrows(), k, |r, c| dv[r] * psi[(r, c)]);
                let gram = psi.tr_mul(&wpsi);
                let rhs = wpsi.tr_mul(&DVector::from_element(psi.nrows(), 1.0));
                gram.cholesky()
                    .ok_or_else(|| Error::RankDeficient("ratio features".into()))?
                    .solve(&rhs)
            }
        };
        Ok(Self {
            psi,
            w_rho,
            w_f: DVector::zeros(k),
            eta: 0.0,
            radius: DEFAULT_RATIO_RADIUS,
            clip_negative: false,
            l2: 0.0,
        })
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.psi
    }

    fn dot(&self, x: usize, w: &DVector<f64>) -> f64 {
        self.psi.row(x).iter().zip(w.iter()).map(|(a, b)| a * b).sum()
    }

    /// `psi(s,a)^T w_rho`, raw unless clipping is enabled.
    pub fn evaluate_ratio(&self, x: usize) -> f64 {
        let r = self.dot(x, &self.w_rho);
        if self.clip_negative {
            r.max(0.0)
        } else {
            r
        }
    }

    /// Ratio estimates at every pair.
    pub fn ratio_table(&self) -> DVector<f64> {
        DVector::from_fn(self.psi.nrows(), |x, _| self.evaluate_ratio(x))
    }

    /// One stochastic primal-dual step on the transition between pairs `x` and `next`.
    /// All right-hand sides use the values from before the step.
    pub fn dice_step(&mut self, x: usize, next: usize, beta: f64) {
        let rho = self.dot(x, &self.w_rho);
        let f = self.dot(x, &self.w_f);
        let f_next = self.dot(next, &self.w_f);
        let eta = self.eta;
        self.eta = eta + beta * (rho - 1.0 - eta);
        let k = self.psi.ncols();
        let grad_rho = f_next - f + eta;
        for j in 0..k {
            let p = self.psi[(x, j)];
            let pn = self.psi[(next, j)];
            self.w_f[j] += beta * (rho * (pn - p) - f * p);
            self.w_rho[j] -= beta * (grad_rho * p + self.l2 * self.w_rho[j]);
        }
        project_ball_in_place(self.w_rho.as_mut_slice(), self.radius);
    }
}

/// `mu / D` elementwise.
pub fn true_ratio(mu: &StationaryDistribution, d: &BehaviorDistribution) -> Result<DVector<f64>> {
    if mu.len() != d.len() {
        return Err(Error::Dimension("mu and D differ in length".into()));
    }
    if d.probs().iter().any(|p| *p <= 0.0) {
        return Err(Error::InvalidModel("ratio undefined where D vanishes".into()));
    }
    Ok(DVector::from_fn(d.len(), |x, _| mu.mu()[x] / d.probs()[x]))
}

/// Exact saddle objective for ratio table `rho`, critic table `f` and scalar `eta`.
pub fn dice_loss_tables(
    rho: &DVector<f64>,
    f: &DVector<f64>,
    eta: f64,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> f64 {
    let dv = d.to_vector();
    let pf = kernel.matrix() * f;
    let mut loss = 0.0;
    for x in 0..dv.len() {
        loss += dv[x] * (rho[x] * (pf[x] - f[x]) - 0.5 * f[x] * f[x] + eta * rho[x] - eta);
    }
    loss - 0.5 * eta * eta
}

/// Exact saddle objective at the learner's current parameters.
pub fn dice_loss(
    state: &DensityRatioState,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> f64 {
    let rho = &state.psi * &state.w_rho;
    let f = &state.psi * &state.w_f;
    dice_loss_tables(&rho, &f, state.eta, d, kernel)
}

/// Smallest singular values of `A = E[psi (psi - psi')^T]` and of the full expected
/// dynamics of `(w_f, w_rho, eta)`. `A` alone is singular whenever constants are
/// representable; the normalization row restores invertibility, so only the second
/// value triggers a warning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatioConditioning {
    pub a_min_singular: f64,
    pub dynamics_min_singular: f64,
}

pub fn ratio_conditioning(
    psi: &DMatrix<f64>,
    d: &BehaviorDistribution,
    kernel: &StateActionKernel,
) -> RatioConditioning {
    let n = psi.nrows();
    let k = psi.ncols();
    let dv = d.to_vector();
    let dpsi = DMatrix::from_fn(n, k, |r, c| dv[r] * psi[(r, c)]);
    let diff = psi - kernel.matrix() * psi;
    let a = dpsi.tr_mul(&diff);
    let c = psi.tr_mul(&dpsi);
    let e = dpsi.row_sum().transpose();
    let mut dyn_m = DMatrix::zeros(2 * k + 1, 2 * k + 1);
    dyn_m.view_mut((0, 0), (k, k)).copy_from(&c);
    dyn_m.view_mut((0, k), (k, k)).copy_from(&a.transpose());
    dyn_m.view_mut((k, 0), (k, k)).copy_from(&(-&a));
    dyn_m.view_mut((k, 2 * k), (k, 1)).copy_from(&e);
    dyn_m.view_mut((2 * k, k), (1, k)).copy_from(&(-e.transpose()));
    dyn_m[(2 * k, 2 * k)] = 1.0;
    let out = RatioConditioning {
        a_min_singular: a.singular_values().min(),
        dynamics_min_singular: dyn_m.singular_values().min(),
    };
    if out.dynamics_min_singular < CONDITIONING_WARN {
        log::warn!(
            "ratio dynamics nearly singular (min singular value {:e})",
            out.dynamics_min_singular
        );
    }
    out
}
