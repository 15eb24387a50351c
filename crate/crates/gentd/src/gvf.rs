//! Block general Bellman operators for forward and backward GVFs with causal filtering.
//!
//! A stacked GVF vector holds block `i` contiguously; inside a block the entry for pair `x`
//! and signal coordinate `c` sits at `x * d_i + c`.

use nalgebra::{DMatrix, DVector};

use crate::approx::FeatureMap;
use crate::error::{Error, Result};
use crate::mdp::{StateActionKernel, StationaryDistribution};

const SPECTRAL_ITERS: usize = 200;
const SPECTRAL_THRESHOLD: f64 = 1.0 - 1e-6;
const GROUND_TRUTH_TOL: f64 = 1e-8;
const COUPLING_POWER_ITERS: usize = 100;
const COUPLING_INFLATION: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// How the constant-shift ambiguity of a unit-discount block is removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConstantPinning {
    /// Each coordinate has zero mean under `mu`.
    #[default]
    MuWeighted,
    /// Each coordinate sums to zero over pairs (orthogonal to the ones vector).
    Euclidean,
}

/// Block system `(d_i, gamma_i, B_i, A_ij)` of a GVF with causal filtering.
#[derive(Clone, Debug)]
pub struct GvfBlockSpec {
    direction: Direction,
    num_pairs: usize,
    dims: Vec<usize>,
    discounts: Vec<f64>,
    signals: Vec<DVector<f64>>,
    /// `couplings[i][j]` for `j < i`.
    couplings: Vec<Vec<Option<DMatrix<f64>>>>,
    /// Optional left factor `T_i` of diagonal block `gamma_i T_i [P (x) I]`.
    diagonal_transforms: Vec<Option<DMatrix<f64>>>,
    unit_discount: bool,
    pinning: ConstantPinning,
}

impl GvfBlockSpec {
    pub fn new(direction: Direction, num_pairs: usize) -> Self {
        Self {
            direction,
            num_pairs,
            dims: Vec::new(),
            discounts: Vec::new(),
            signals: Vec::new(),
            couplings: Vec::new(),
            diagonal_transforms: Vec::new(),
            unit_discount: false,
            pinning: ConstantPinning::default(),
        }
    }

    /// Appends block `i = k` and returns its index.
    pub fn add_block(&mut self, dim: usize, discount: f64, signal: DVector<f64>) -> Result<usize> {
        if dim == 0 {
            return Err(Error::Dimension("block dimension must be positive".into()));
        }
        if signal.len() != dim * self.num_pairs {
            return Err(Error::Dimension(format!(
                "signal of block {} has length {}, expected {}",
                self.dims.len(),
                signal.len(),
                dim * self.num_pairs
            )));
        }
        if signal.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite signal entry".into()));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} outside [0, 1]")));
        }
        let i = self.dims.len();
        self.dims.push(dim);
        self.discounts.push(discount);
        self.signals.push(signal);
        self.couplings.push(vec![None; i]);
        self.diagonal_transforms.push(None);
        Ok(i)
    }

    /// Sets `A_ij`; only strictly lower blocks (`j < i`) are allowed.
    pub fn set_coupling(&mut self, i: usize, j: usize, a: DMatrix<f64>) -> Result<()> {
        if j >= i || i >= self.dims.len() {
            return Err(Error::InvalidModel(format!(
                "coupling ({i},{j}) is not strictly lower block-triangular"
            )));
        }
        let shape = (self.dims[i] * self.num_pairs, self.dims[j] * self.num_pairs);
        if a.shape() != shape {
            return Err(Error::Dimension(format!(
                "coupling ({i},{j}) is {:?}, expected {shape:?}",
                a.shape()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite coupling entry".into()));
        }
        self.couplings[i][j] = Some(a);
        Ok(())
    }

    /// Left factor applied to the transition lift of diagonal block `i`.
    pub fn set_diagonal_transform(&mut self, i: usize, t: DMatrix<f64>) -> Result<()> {
        let n = self.dims.get(i).ok_or_else(|| Error::Dimension(format!("no block {i}")))?
            * self.num_pairs;
        if t.shape() != (n, n) {
            return Err(Error::Dimension(format!("diagonal transform of block {i} must be {n}x{n}")));
        }
        self.diagonal_transforms[i] = Some(t);
        Ok(())
    }

    /// Permits unit discounts; the ground truth is then pinned against per-block constants.
    pub fn enable_unit_discount(&mut self, pinning: ConstantPinning) {
        self.unit_discount = true;
        self.pinning = pinning;
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn discounts(&self) -> &[f64] {
        &self.discounts
    }

    pub fn signal(&self, i: usize) -> &DVector<f64> {
        &self.signals[i]
    }

    pub fn coupling(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.couplings.get(i).and_then(|row| row.get(j)).and_then(|a| a.as_ref())
    }

    pub fn diagonal_transform(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.diagonal_transforms[i].as_ref()
    }

    pub fn gamma_max(&self) -> f64 {
        self.discounts.iter().cloned().fold(0.0, f64::max)
    }

    pub fn unit_discount_enabled(&self) -> bool {
        self.unit_discount
    }

    pub fn pinning(&self) -> ConstantPinning {
        self.pinning
    }

    /// Start offset of each block in the stacked vector.
    pub fn offsets(&self) -> Vec<usize> {
        block_offsets(&self.dims, self.num_pairs)
    }

    pub fn total_len(&self) -> usize {
        self.dims.iter().sum::<usize>() * self.num_pairs
    }

    /// Stacked signal `B`.
    pub fn stacked_signal(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.total_len());
        for (sig, off) in self.signals.iter().zip(self.offsets()) {
            b.rows_mut(off, sig.len()).copy_from(sig);
        }
        b
    }

    fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidModel("spec has no blocks".into()));
        }
        if !self.unit_discount && self.discounts.iter().any(|g| *g >= 1.0) {
            return Err(Error::InvalidModel(
                "unit discount requires the constant-pinned pathway".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn block_offsets(dims: &[usize], num_pairs: usize) -> Vec<usize> {
    let mut acc = 0;
    dims.iter()
        .map(|d| {
            let o = acc;
            acc += d * num_pairs;
            o
        })
        .collect()
}

/// `(M, B)` of the affine operator `v -> B + M v`.
#[derive(Clone, Debug)]
pub struct AssembledOperator {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub gamma_max: f64,
    pub direction: Direction,
    pub dims: Vec<usize>,
    pub discounts: Vec<f64>,
    pub num_pairs: usize,
    pub pinning: Option<ConstantPinning>,
    mu: DVector<f64>,
}

impl AssembledOperator {
    pub fn offsets(&self) -> Vec<usize> {
        block_offsets(&self.dims, self.num_pairs)
    }

    pub fn total_len(&self) -> usize {
        self.b.len()
    }

    /// Stationary distribution the operator was assembled with.
    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Diagonal of `U` over the whole stacked vector.
    pub fn mu_lift(&self) -> DVector<f64> {
        stacked_mu_lift(&self.mu, &self.dims)
    }
}

pub(crate) fn stacked_mu_lift(mu: &DVector<f64>, dims: &[usize]) -> DVector<f64> {
    let parts: Vec<f64> = dims
        .iter()
        .flat_map(|&d| (0..mu.len() * d).map(move |i| mu[i / d]))
        .collect();
    DVector::from_vec(parts)
}

/// `U^{-1} P^T U`: the Bayes-reversed kernel, itself row-stochastic.
pub fn backward_kernel(kernel: &StateActionKernel, mu: &StationaryDistribution) -> DMatrix<f64> {
    let p = kernel.matrix();
    let mu = mu.mu();
    let n = p.nrows();
    DMatrix::from_fn(n, n, |x, y| p[(y, x)] * mu[y] / mu[x])
}

pub fn assemble(
    spec: &GvfBlockSpec,
    kernel: &StateActionKernel,
    mu: &StationaryDistribution,
) -> Result<AssembledOperator> {
    spec.validate()?;
    let n = spec.num_pairs;
    if kernel.size() != n || mu.len() != n {
        return Err(Error::Dimension(format!(
            "spec has {n} pairs, kernel {} and mu {}",
            kernel.size(),
            mu.len()
        )));
    }
    if let Some(i) = mu.mu().iter().position(|v| *v <= 0.0) {
        return Err(Error::NonErgodic { index: i, mass: mu.mu()[i] });
    }
    let base = match spec.direction {
        Direction::Forward => kernel.matrix().clone(),
        Direction::Backward => backward_kernel(kernel, mu),
    };
    let total = spec.total_len();
    let offsets = spec.offsets();
    let mut m = DMatrix::zeros(total, total);
    for i in 0..spec.num_blocks() {
        let di = spec.dims[i];
        let rows = di * n;
        let mut diag = base.kronecker(&DMatrix::<f64>::identity(di, di)) * spec.discounts[i];
        if let Some(t) = &spec.diagonal_transforms[i] {
            diag = t * diag;
        }
        m.view_mut((offsets[i], offsets[i]), (rows, rows)).copy_from(&diag);
        for j in 0..i {
            if let Some(a) = &spec.couplings[i][j] {
                m.view_mut((offsets[i], offsets[j]), a.shape()).copy_from(a);
            }
        }
    }
    Ok(AssembledOperator {
        m,
        b: spec.stacked_signal(),
        gamma_max: spec.gamma_max(),
        direction: spec.direction,
        dims: spec.dims.clone(),
        discounts: spec.discounts.clone(),
        num_pairs: n,
        pinning: spec.unit_discount.then_some(spec.pinning),
        mu: mu.mu().clone(),
    })
}

/// `B + M v`.
pub fn apply_gbo(op: &AssembledOperator, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != op.total_len() {
        return Err(Error::Dimension(format!(
            "vector has length {}, operator acts on {}",
            v.len(),
            op.total_len()
        )));
    }
    Ok(&op.b + &op.m * v)
}

/// Power-iteration estimate of the spectral radius: geometric mean growth over the last
/// quarter of the iterations.
pub fn spectral_radius_estimate(m: &DMatrix<f64>, iters: usize) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 13) as f64 / 13.0);
    v /= v.norm();
    let tail = (iters / 4).max(1);
    let mut log_growth = 0.0;
    for k in 0..iters {
        let next = m * &v;
        let norm = next.norm();
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 { 0.0 } else { f64::INFINITY };
        }
        if k >= iters - tail {
            log_growth += norm.ln();
        }
        v = next / norm;
    }
    (log_growth / tail as f64).exp()
}

/// Unique fixed point of `v = B + M v`. Unit-discount operators are solved on the
/// subspace pinned by their constant convention.
pub fn solve_ground_truth(op: &AssembledOperator) -> Result<DVector<f64>> {
    if let Some(pinning) = op.pinning {
        if op.discounts.iter().any(|g| *g >= 1.0) {
            return solve_pinned(op, pinning);
        }
    }
    let rho = spectral_radius_estimate(&op.m, SPECTRAL_ITERS);
    if rho >= SPECTRAL_THRESHOLD {
        return Err(Error::Singular(format!(
            "spectral radius of M is about {rho}; unit discounts need the pinned pathway"
        )));
    }
    let n = op.total_len();
    let sys = DMatrix::identity(n, n) - &op.m;
    let g = sys.lu().solve(&op.b).ok_or_else(|| Error::Singular("I - M".into()))?;
    check_fixed_point(op, &g)?;
    Ok(g)
}

/// Same as [`solve_ground_truth`] for unit-discount operators, with an explicit pinning.
pub fn solve_ground_truth_pinned(
    op: &AssembledOperator,
    pinning: ConstantPinning,
) -> Result<DVector<f64>> {
    let mut op = op.clone();
    op.pinning = Some(pinning);
    solve_ground_truth(&op)
}

fn check_fixed_point(op: &AssembledOperator, g: &DVector<f64>) -> Result<()> {
    let res = (&op.b + &op.m * g - g).amax();
    if !(res <= GROUND_TRUTH_TOL) {
        return Err(Error::NonConvergence(format!("fixed-point residual {res:e}")));
    }
    Ok(())
}

/// Least squares on `[I - M; C] v = [B; 0]`, where the rows of `C` remove the constant
/// component of every coordinate of every unit-discount block.
fn solve_pinned(op: &AssembledOperator, pinning: ConstantPinning) -> Result<DVector<f64>> {
    let n = op.total_len();
    let np = op.num_pairs;
    let offsets = op.offsets();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (i, (&d, &g)) in op.dims.iter().zip(&op.discounts).enumerate() {
        if g < 1.0 {
            continue;
        }
        for c in 0..d {
            let mut r = DVector::zeros(n);
            for x in 0..np {
                r[offsets[i] + x * d + c] = match pinning {
                    ConstantPinning::MuWeighted => op.mu[x],
                    ConstantPinning::Euclidean => 1.0,
                };
            }
            rows.push(r);
        }
    }
    let extra = rows.len();
    let mut sys = DMatrix::zeros(n + extra, n);
    sys.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) - &op.m));
    for (k, r) in rows.iter().enumerate() {
        sys.row_mut(n + k).copy_from(&r.transpose());
    }
    let mut rhs = DVector::zeros(n + extra);
    rhs.rows_mut(0, n).copy_from(&op.b);
    let svd = sys.svd(true, true);
    let g = svd
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Singular(format!("pinned system: {e}")))?;
    check_fixed_point(op, &g)?;
    Ok(g)
}

/// `||v||_mu = sqrt(sum_x mu(x) |v(x)|^2)` for a block of signal dimension `d`.
pub fn block_mu_norm(v: &[f64], mu: &DVector<f64>, d: usize) -> f64 {
    v.iter().enumerate().map(|(i, x)| mu[i / d] * x * x).sum::<f64>().sqrt()
}

/// Per-block `mu`-norms of a stacked vector.
pub fn block_norms(v: &DVector<f64>, mu: &DVector<f64>, dims: &[usize]) -> Result<Vec<f64>> {
    let np = mu.len();
    let total: usize = dims.iter().sum::<usize>() * np;
    if v.len() != total {
        return Err(Error::Dimension(format!("vector has length {}, expected {total}", v.len())));
    }
    Ok(block_offsets(dims, np)
        .iter()
        .zip(dims)
        .map(|(&off, &d)| block_mu_norm(&v.as_slice()[off..off + d * np], mu, d))
        .collect())
}

/// Convex weights under which the operator contracts, and the modulus they certify.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionWeights {
    pub alpha: Vec<f64>,
    pub coupling_bound: f64,
    pub gamma_g: f64,
}

/// Largest `mu`-induced norm over the couplings, from power iteration, inflated by 1%.
pub fn coupling_bound(spec: &GvfBlockSpec, mu: &StationaryDistribution) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..spec.num_blocks() {
        for j in 0..i {
            if let Some(a) = spec.coupling(i, j) {
                best = best.max(induced_mu_norm(a, mu, spec.dims[i], spec.dims[j]));
            }
        }
    }
    best * COUPLING_INFLATION
}

/// `sup ||A v||_mu / ||v||_mu`, i.e. the largest singular value of `W_i A W_j^{-1}` with
/// `W = sqrt(diag(mu) (x) I)`, by power iteration.
pub fn induced_mu_norm(a: &DMatrix<f64>, mu: &StationaryDistribution, d_out: usize, d_in: usize) -> f64 {
    let wo = mu.lift(d_out).map(f64::sqrt);
    let wi = mu.lift(d_in).map(f64::sqrt);
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| wo[r] * a[(r, c)] / wi[c]);
    let gram = scaled.tr_mul(&scaled);
    let mut v = DVector::from_fn(gram.nrows(), |i, _| 1.0 + (i % 5) as f64 * 0.1);
    let mut lambda = 0.0;
    for _ in 0..COUPLING_POWER_ITERS {
        let next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.norm();
        v = next / norm;
    }
    lambda.sqrt()
}

/// Solves the triangular weight system whose rows `1..k-1` balance each block's own
/// contraction slack against the couplings feeding later blocks, with `sum alpha = 1`.
pub fn contraction_weights(
    num_blocks: usize,
    gamma_max: f64,
    coupling_bound: f64,
) -> Result<ContractionWeights> {
    if num_blocks == 0 {
        return Err(Error::Dimension("no blocks".into()));
    }
    if !(gamma_max < 1.0) {
        return Err(Error::InvalidModel("contraction weights need gamma_max < 1".into()));
    }
    let k = num_blocks;
    let (f, rhs) = weight_system(k, gamma_max, coupling_bound);
    let alpha = f
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("contraction weight system".into()))?;
    let res = (&f * &alpha - &rhs).amax();
    if alpha.iter().any(|a| !(*a > 0.0)) || res > 1e-10 {
        return Err(Error::InvalidModel(format!(
            "contraction weights not positive (residual {res:e}, alpha {:?})",
            alpha.as_slice()
        )));
    }
    Ok(ContractionWeights {
        alpha: alpha.iter().copied().collect(),
        coupling_bound,
        gamma_g: (1.0 + gamma_max) / 2.0,
    })
}

/// `(F, f)` of the weight system.
pub fn weight_system(k: usize, gamma_max: f64, coupling_bound: f64) -> (DMatrix<f64>, DVector<f64>) {
    let slack = -(1.0 - gamma_max) / 2.0;
    let mut f = DMatrix::zeros(k, k);
    for i in 0..k - 1 {
        f[(i, i)] = slack;
        for j in i + 1..k {
            f[(i, j)] = coupling_bound;
        }
    }
    f.row_mut(k - 1).fill(1.0);
    let mut rhs = DVector::zeros(k);
    rhs[k - 1] = 1.0;
    (f, rhs)
}

/// Convenience: weights for a spec using its computed coupling bound.
pub fn contraction_weights_for(
    spec: &GvfBlockSpec,
    mu: &StationaryDistribution,
) -> Result<ContractionWeights> {
    contraction_weights(spec.num_blocks(), spec.gamma_max(), coupling_bound(spec, mu))
}

/// `sum_i alpha_i ||v_i||_mu`.
pub fn alpha_norm(
    v: &DVector<f64>,
    weights: &ContractionWeights,
    mu: &StationaryDistribution,
    dims: &[usize],
) -> Result<f64> {
    if weights.alpha.len() != dims.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} blocks",
            weights.alpha.len(),
            dims.len()
        )));
    }
    let norms = block_norms(v, mu.mu(), dims)?;
    Ok(norms.iter().zip(&weights.alpha).map(|(n, a)| n * a).sum())
}

/// Strong-monotonicity constant `lambda_G = (1 - gamma_max) min_i zeta_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Monotonicity {
    pub lambda_g: f64,
    /// `zeta_i = lambda_min(Phi_i^T diag(mu) Phi_i)`.
    pub zetas: Vec<f64>,
}

pub fn monotonicity_constant(
    features: &FeatureMap,
    mu: &StationaryDistribution,
    spec: &GvfBlockSpec,
) -> Result<Monotonicity> {
    if features.num_blocks() != spec.num_blocks() {
        return Err(Error::Dimension("feature and spec block counts differ".into()));
    }
    let mut zetas = Vec::with_capacity(features.num_blocks());
    for (i, phi) in features.blocks().iter().enumerate() {
        let weighted = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| mu.mu()[r] * phi[(r, c)]);
        let gram = phi.tr_mul(&weighted);
        let eig = gram.symmetric_eigenvalues();
        let lo = eig.min();
        let hi = eig.max();
        if !(lo > 1e-12 * hi.max(1e-300)) {
            return Err(Error::RankDeficient(format!("block {i} has zeta = {lo:e}")));
        }
        zetas.push(lo);
    }
    let min_zeta = zetas.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Monotonicity { lambda_g: (1.0 - spec.gamma_max()) * min_zeta, zetas })
}

/// `Phi^T U (M - I) Phi` and `Phi^T U B`, so that the population update is
/// `g(theta) = -(G theta + b)`.
pub fn population_system(
    op: &AssembledOperator,
    features: &FeatureMap,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_features(op, features)?;
    let phi = features.dense();
    let u = op.mu_lift();
    let uphi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| u[r] * phi[(r, c)]);
    let mphi = &op.m * &phi - &phi;
    Ok((uphi.tr_mul(&mphi), uphi.tr_mul(&op.b)))
}

pub(crate) fn check_features(op: &AssembledOperator, features: &FeatureMap) -> Result<()> {
    if features.dims() != op.dims.as_slice() || features.num_pairs() != op.num_pairs {
        return Err(Error::Dimension("features do not match the operator's block layout".into()));
    }
    Ok(())
}

/// Expected GenTD direction `g(theta) = Phi^T U (Phi theta - (B + M Phi theta))`.
pub fn population_update(
    op: &AssembledOperator,
    features: &FeatureMap,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_features(op, features)?;
    if theta.len() != features.num_params() {
        return Err(Error::Dimension("theta length".into()));
    }
    let v = features.dense() * theta;
    let resid = &v - apply_gbo(op, &v)?;
    let u = op.mu_lift();
    Ok(features.dense().tr_mul(&resid.component_mul(&u)))
}

/// Root of the population update: `Phi theta* = Gamma_mu (B + M Phi theta*)`.
pub fn projected_fixed_point(op: &AssembledOperator, features: &FeatureMap) -> Result<DVector<f64>> {
    let (g, b) = population_system(op, features)?;
    g.lu()
        .solve(&(-b))
        .ok_or_else(|| Error::Singular("projected fixed-point system".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{state_action_kernel, stationary_distribution, Policy, TabularMdp};

    fn small() -> (StateActionKernel, StationaryDistribution) {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 1.0, 0.0, 0.2, 0.8, 0.3, 0.7],
            vec![1.0, 0.0, 0.5, 2.0],
            0.9,
        )
        .unwrap();
        let k = state_action_kernel(&mdp, &Policy::new(2, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap())
            .unwrap();
        let mu = stationary_distribution(&k).unwrap();
        (k, mu)
    }

    #[test]
    fn two_block_weights_match_closed_form() {
        let w = contraction_weights(2, 0.99, 1.0).unwrap();
        let a2 = 0.01 / (2.0 + 0.01);
        assert!((w.alpha[1] - a2).abs() < 1e-14);
        assert!((w.alpha[0] - (1.0 - a2)).abs() < 1e-14);
        assert_eq!(contraction_weights(1, 0.5, 3.0).unwrap().alpha, vec![1.0]);
        assert!(contraction_weights(2, 0.9, 0.0).is_err());
    }

    #[test]
    fn rejects_upper_couplings() {
        let mut spec = GvfBlockSpec::new(Direction::Forward, 4);
        spec.add_block(1, 0.5, DVector::zeros(4)).unwrap();
        spec.add_block(2, 0.5, DVector::zeros(8)).unwrap();
        assert!(spec.set_coupling(0, 1, DMatrix::zeros(4, 8)).is_err());
        assert!(spec.set_coupling(1, 0, DMatrix::zeros(4, 4)).is_err());
        assert!(spec.set_coupling(1, 0, DMatrix::zeros(8, 4)).is_ok());
    }

    #[test]
    fn unit_discount_needs_pathway() {
        let (k, mu) = small();
        let mut spec = GvfBlockSpec::new(Direction::Backward, 4);
        spec.add_block(1, 1.0, DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0])).unwrap();
        assert!(assemble(&spec, &k, &mu).is_err());
    }

    #[test]
    fn spectral_estimate_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.9, 0.5]));
        assert!((spectral_radius_estimate(&m, 200) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn backward_kernel_rows_sum_to_one() {
        let (k, mu) = small();
        for row in backward_kernel(&k, &mu).row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
