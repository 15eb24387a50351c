//! Linear function approximation over stacked GVF blocks.
//!
//! Block `i` uses a basis `Phi_i` (`|S||A| x K_i`) lifted as `Phi_i (x) I_{d_i}`. Its
//! parameters `theta_i` form a `K_i x d_i` matrix stored row-major, so coordinate `(k, c)`
//! sits at `offset_i + k * d_i + c`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gvf::block_offsets;

/// Default radius of the parameter ball.
pub const DEFAULT_THETA_RADIUS: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Complete,
    Incomplete,
}

/// Block-diagonal feature map `Phi = diag(Phi_i (x) I_{d_i})`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    blocks: Vec<DMatrix<f64>>,
    dims: Vec<usize>,
    num_pairs: usize,
    /// Factor each block was divided by so that every row has norm at most 1.
    scales: Vec<f64>,
}

impl FeatureMap {
    /// Checks full column rank and rescales any block whose largest row norm exceeds 1.
    pub fn new(blocks: Vec<DMatrix<f64>>, dims: Vec<usize>) -> Result<Self> {
        let mut map = Self::from_raw(blocks, dims)?;
        for (i, phi) in map.blocks.iter_mut().enumerate() {
            let rank_tol = 1e-10 * phi.nrows().max(phi.ncols()) as f64;
            let sv = phi.singular_values();
            if phi.ncols() > phi.nrows() || sv.min() <= rank_tol * sv.max().max(1e-300) {
                return Err(Error::RankDeficient(format!("feature block {i}")));
            }
            let top = phi.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
            if top > 1.0 {
                *phi /= top;
                map.scales[i] = top;
            }
        }
        Ok(map)
    }

    /// No rank check and no normalization.
    pub fn from_raw(blocks: Vec<DMatrix<f64>>, dims: Vec<usize>) -> Result<Self> {
        if blocks.is_empty() || blocks.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "{} feature blocks for {} signal blocks",
                blocks.len(),
                dims.len()
            )));
        }
        let num_pairs = blocks[0].nrows();
        if blocks.iter().any(|b| b.nrows() != num_pairs) || dims.contains(&0) {
            return Err(Error::Dimension("feature blocks disagree on |S||A|".into()));
        }
        let scales = vec![1.0; blocks.len()];
        Ok(Self { blocks, dims, num_pairs, scales })
    }

    /// Same basis for every block.
    pub fn shared(basis: DMatrix<f64>, dims: &[usize]) -> Result<Self> {
        Self::new(vec![basis; dims.len()], dims.to_vec())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn normalization_scales(&self) -> &[f64] {
        &self.scales
    }

    /// Total signal dimension `sum d_i`.
    pub fn signal_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().zip(&self.dims).map(|(b, d)| b.ncols() * d).sum()
    }

    pub fn param_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.blocks
            .iter()
            .zip(&self.dims)
            .map(|(b, d)| {
                let o = acc;
                acc += b.ncols() * d;
                o
            })
            .collect()
    }

    /// Offsets of each block in the stacked GVF vector.
    pub fn value_offsets(&self) -> Vec<usize> {
        block_offsets(&self.dims, self.num_pairs)
    }

    /// Dense `Phi` of shape `(sum d_i |S||A|) x (sum K_i d_i)`.
    pub fn dense(&self) -> DMatrix<f64> {
        let rows = self.signal_dim() * self.num_pairs;
        let mut out = DMatrix::zeros(rows, self.num_params());
        for ((phi, &d), (ro, co)) in self
            .blocks
            .iter()
            .zip(&self.dims)
            .zip(self.value_offsets().into_iter().zip(self.param_offsets()))
        {
            let lifted = phi.kronecker(&DMatrix::<f64>::identity(d, d));
            out.view_mut((ro, co), lifted.shape()).copy_from(&lifted);
        }
        out
    }

    /// Stacked GVF estimate `Phi theta`.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.signal_dim() * self.num_pairs);
        for ((phi, &d), (ro, co)) in self
            .blocks
            .iter()
            .zip(&self.dims)
            .zip(self.value_offsets().into_iter().zip(self.param_offsets()))
        {
            for x in 0..self.num_pairs {
                for k in 0..phi.ncols() {
                    let f = phi[(x, k)];
                    if f == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        out[ro + x * d + c] += f * theta[co + k * d + c];
                    }
                }
            }
        }
        out
    }

    /// `phi(x) theta`: the `sum d_i` signal estimate at pair `x`.
    pub fn eval_into(&self, x: usize, theta: &[f64], out: &mut [f64]) {
        let mut so = 0;
        let mut co = 0;
        for (phi, &d) in self.blocks.iter().zip(&self.dims) {
            out[so..so + d].fill(0.0);
            for k in 0..phi.ncols() {
                let f = phi[(x, k)];
                if f == 0.0 {
                    continue;
                }
                let t = &theta[co + k * d..co + (k + 1) * d];
                for c in 0..d {
                    out[so + c] += f * t[c];
                }
            }
            so += d;
            co += phi.ncols() * d;
        }
    }

    pub fn eval(&self, x: usize, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.signal_dim());
        self.eval_into(x, theta.as_slice(), out.as_mut_slice());
        out
    }

    /// `out += scale * phi(x)^T v` for a `sum d_i` signal vector `v`.
    pub fn add_transposed(&self, x: usize, v: &[f64], scale: f64, out: &mut [f64]) {
        let mut so = 0;
        let mut co = 0;
        for (phi, &d) in self.blocks.iter().zip(&self.dims) {
            for k in 0..phi.ncols() {
                let f = phi[(x, k)] * scale;
                if f == 0.0 {
                    continue;
                }
                for c in 0..d {
                    out[co + k * d + c] += f * v[so + c];
                }
            }
            so += d;
            co += phi.ncols() * d;
        }
    }

    /// Per-pair feature matrix `phi(x)` of shape `(sum d_i) x (sum K_i d_i)`.
    pub fn pair_matrix(&self, x: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.signal_dim(), self.num_params());
        let mut so = 0;
        let mut co = 0;
        for (phi, &d) in self.blocks.iter().zip(&self.dims) {
            for k in 0..phi.ncols() {
                for c in 0..d {
                    out[(so + c, co + k * d + c)] = phi[(x, k)];
                }
            }
            so += d;
            co += phi.ncols() * d;
        }
        out
    }

    /// Long-format CSV: `block,dim,row,col,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["block", "dim", "row", "col", "value"])?;
        for (i, (phi, d)) in self.blocks.iter().zip(&self.dims).enumerate() {
            for r in 0..phi.nrows() {
                for c in 0..phi.ncols() {
                    wr.write_record(&[
                        i.to_string(),
                        d.to_string(),
                        r.to_string(),
                        c.to_string(),
                        format!("{:e}", phi[(r, c)]),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the format written by [`FeatureMap::write_csv`] and validates the result.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut entries: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_usize = |i: usize| {
                field(i).parse::<usize>().map_err(|e| Error::Config(format!("feature csv: {e}")))
            };
            let value =
                field(4).parse::<f64>().map_err(|e| Error::Config(format!("feature csv: {e}")))?;
            entries.push((parse_usize(0)?, parse_usize(1)?, parse_usize(2)?, parse_usize(3)?, value));
        }
        let nblocks = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let mut shapes = vec![(0usize, 0usize, 0usize); nblocks];
        for &(b, d, r, c, _) in &entries {
            let s = &mut shapes[b];
            *s = (d, s.1.max(r + 1), s.2.max(c + 1));
        }
        let mut blocks: Vec<DMatrix<f64>> =
            shapes.iter().map(|&(_, r, c)| DMatrix::zeros(r, c)).collect();
        for &(b, _, r, c, v) in &entries {
            blocks[b][(r, c)] = v;
        }
        Self::new(blocks, shapes.iter().map(|s| s.0).collect())
    }
}

/// `xi`-weighted least-squares projection onto the span of `Phi`.
pub fn project_weighted(
    features: &FeatureMap,
    xi: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if xi.len() != features.num_pairs() {
        return Err(Error::Dimension("weighting has the wrong length".into()));
    }
    let phi = features.dense();
    if target.len() != phi.nrows() {
        return Err(Error::Dimension("target has the wrong length".into()));
    }
    // QR of sqrt(W) Phi rather than the normal equations, which square the conditioning.
    let w = crate::gvf::stacked_mu_lift(xi, features.dims()).map(f64::sqrt);
    let wphi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |r, c| w[r] * phi[(r, c)]);
    let rhs = target.component_mul(&w);
    let (q, r) = wphi.qr().unpack();
    let theta = r
        .solve_upper_triangular(&q.tr_mul(&rhs))
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient("weighted feature matrix".into()))?;
    let proj = &phi * &theta;
    Ok((theta, proj))
}

/// Euclidean projection onto the ball of radius `radius`.
pub fn project_ball(theta: &DVector<f64>, radius: f64) -> DVector<f64> {
    let mut out = theta.clone();
    project_ball_in_place(out.as_mut_slice(), radius);
    out
}

pub fn project_ball_in_place(theta: &mut [f64], radius: f64) {
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let s = radius / norm;
        theta.iter_mut().for_each(|v| *v *= s);
    }
}

/// Identity basis over the Baird pairs; the incomplete variant drops `drop_column`
/// (the last column by default).
pub fn baird_basis(kind: FeatureKind, drop_column: Option<usize>) -> DMatrix<f64> {
    tabular_basis(14, kind, drop_column)
}

/// Identity basis over `n` pairs, optionally missing one column.
pub fn tabular_basis(n: usize, kind: FeatureKind, drop_column: Option<usize>) -> DMatrix<f64> {
    let eye = DMatrix::identity(n, n);
    match kind {
        FeatureKind::Complete => eye,
        FeatureKind::Incomplete => eye.remove_column(drop_column.unwrap_or(n - 1)),
    }
}

pub fn baird_features(kind: FeatureKind, dims: &[usize]) -> Result<FeatureMap> {
    FeatureMap::shared(baird_basis(kind, None), dims)
}

/// Orthonormal basis of the complement of the ones vector in `R^n` (`n - 1` columns);
/// the incomplete variant drops its last column.
pub fn nonconstant_basis(n: usize, kind: FeatureKind) -> Result<DMatrix<f64>> {
    if n < 2 {
        return Err(Error::Dimension("non-constant basis needs n >= 2".into()));
    }
    // [1, e_0, ..., e_{n-2}]: the ones column first, so later Q columns are orthogonal to it.
    let seed = DMatrix::from_fn(n, n, |r, c| if c == 0 || r + 1 == c { 1.0 } else { 0.0 });
    let q = seed.qr().q();
    let basis = q.columns(1, n - 1).into_owned();
    Ok(match kind {
        FeatureKind::Complete => basis,
        FeatureKind::Incomplete => basis.remove_column(n - 2),
    })
}

pub fn nonconstant_features(n: usize, kind: FeatureKind, dims: &[usize]) -> Result<FeatureMap> {
    let basis = nonconstant_basis(n, kind)?;
    let dist = constant_distance(&basis);
    if dist < 1e-8 {
        return Err(Error::RankDeficient("basis spans the constant vector".into()));
    }
    FeatureMap::shared(basis, dims)
}

/// Relative distance from the ones vector to the column span: 0 means a constant
/// function is representable, 1 means the span is orthogonal to constants.
pub fn constant_distance(basis: &DMatrix<f64>) -> f64 {
    let n = basis.nrows();
    let ones = DVector::from_element(n, 1.0);
    let gram = basis.tr_mul(basis);
    let coef = match gram.cholesky() {
        Some(ch) => ch.solve(&basis.tr_mul(&ones)),
        None => return 0.0,
    };
    (&ones - basis * coef).norm() / ones.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonconstant_basis_shape_and_orthogonality() {
        let b = nonconstant_basis(14, FeatureKind::Complete).unwrap();
        assert_eq!(b.shape(), (14, 13));
        for c in b.column_iter() {
            assert!(c.sum().abs() < 1e-12);
        }
        let gram = b.tr_mul(&b);
        assert!((gram - DMatrix::identity(13, 13)).amax() < 1e-10);
        assert!((constant_distance(&b) - 1.0).abs() < 1e-12);
        assert_eq!(nonconstant_basis(14, FeatureKind::Incomplete).unwrap().ncols(), 12);
    }

    #[test]
    fn baird_incomplete_drops_last() {
        let b = baird_basis(FeatureKind::Incomplete, None);
        assert_eq!(b.shape(), (14, 13));
        assert!(b.row(13).iter().all(|v| *v == 0.0));
        let f = baird_features(FeatureKind::Complete, &[1]).unwrap();
        assert_eq!(f.eval(3, &DVector::from_fn(14, |i, _| i as f64))[0], 3.0);
    }

    #[test]
    fn duplicate_columns_rejected() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 0.0, 0.5, 0.5]);
        assert!(matches!(FeatureMap::new(vec![m], vec![1]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn rows_normalized_to_unit_norm() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 1.0, 0.0]);
        let f = FeatureMap::new(vec![m], vec![1]).unwrap();
        assert_eq!(f.normalization_scales(), &[5.0]);
        let top = f.block(0).row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        assert!((top - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ball_projection_halves_overshoot() {
        let t = DVector::from_vec(vec![6.0, 8.0]);
        let p = project_ball(&t, 5.0);
        assert!((p - DVector::from_vec(vec![3.0, 4.0])).amax() < 1e-15);
        assert_eq!(project_ball(&DVector::from_vec(vec![0.1, 0.2]), 1.0)[1], 0.2);
    }

    #[test]
    fn dense_and_pairwise_evaluation_agree() {
        let f = FeatureMap::new(
            vec![
                DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.2, 0.5, 0.0, 0.3]),
                DMatrix::from_row_slice(3, 1, &[0.1, 0.7, -0.4]),
            ],
            vec![2, 3],
        )
        .unwrap();
        let theta = DVector::from_fn(f.num_params(), |i, _| (i as f64 * 0.37).sin());
        let full = f.dense() * &theta;
        assert!((f.apply(&theta) - &full).amax() < 1e-14);
        for x in 0..3 {
            let e = f.eval(x, &theta);
            let pm = f.pair_matrix(x) * &theta;
            assert!((e - pm).amax() < 1e-14);
            let v = DVector::from_fn(5, |i, _| i as f64 - 1.5);
            let mut out = vec![0.0; f.num_params()];
            f.add_transposed(x, v.as_slice(), 2.0, &mut out);
            let expect = f.pair_matrix(x).transpose() * v * 2.0;
            assert!((DVector::from_vec(out) - expect).amax() < 1e-14);
        }
    }

    #[test]
    fn csv_round_trip() {
        let f = baird_features(FeatureKind::Incomplete, &[1, 2]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let g = FeatureMap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }
}
