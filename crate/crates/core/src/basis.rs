//! Spline bases, penalties, identifiability constraints and design assembly.
//!
//! Smooth terms use B-splines on equally spaced knots spanning the observed
//! covariate range, extended by `degree` knots on each side. The penalties
//! are difference penalties on adjacent coefficients (P-splines). Unless a
//! smooth has a `by` variable, its basis is reparameterized so that every
//! column sums to zero over the training rows, which absorbs one dimension
//! and keeps the intercept identifiable.

use std::collections::BTreeSet;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::formula::{BasisType, ModelSpec, SmoothTerm, Term};
use crate::numeric::psd_rank;

/// Relative slack allowed when checking that fitting inputs lie in range.
const RANGE_SLACK: f64 = 1e-12;

/// Evaluate the `nbasis` B-splines of `degree` on `knots` at `x`.
///
/// `x` must lie in `[knots[degree], knots[nbasis]]`.
fn basis_row(x: f64, knots: &[f64], degree: usize, out: &mut [f64]) {
    let nbasis = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    // Interval index `span` with knots[span] <= x < knots[span + 1].
    let mut span = degree;
    while span + 1 < nbasis && x >= knots[span + 1] {
        span += 1;
    }
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (r, v) in n.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
}

fn uniform_knots(lo: f64, hi: f64, intervals: usize, degree: usize) -> Vec<f64> {
    let step = (hi - lo) / intervals as f64;
    (0..=intervals + 2 * degree).map(|j| lo + (j as f64 - degree as f64) * step).collect()
}

/// B-spline basis matrix with `k` functions on `[lo, hi]`.
///
/// Rows sum to one (partition of unity). Fitting inputs must lie in the range.
pub fn bspline_basis(x: &[f64], k: usize, degree: usize, range: (f64, f64)) -> Result<DMatrix<f64>> {
    let (lo, hi) = range;
    check_spline_args(k, degree, lo, hi)?;
    let slack = RANGE_SLACK * (hi - lo);
    if let Some(bad) = x.iter().find(|&&v| !(v >= lo - slack && v <= hi + slack)) {
        return Err(Error::InvalidArgument(format!("value {bad} outside basis range [{lo}, {hi}]")));
    }
    Ok(bspline_basis_clamped(x, k, degree, range).0)
}

/// Like [`bspline_basis`], clamping out-of-range inputs and flagging them.
pub fn bspline_basis_clamped(x: &[f64], k: usize, degree: usize, (lo, hi): (f64, f64)) -> (DMatrix<f64>, Vec<bool>) {
    let knots = uniform_knots(lo, hi, k - degree, degree);
    let mut out = DMatrix::zeros(x.len(), k);
    let mut flags = vec![false; x.len()];
    let mut row = vec![0.0; k];
    for (i, &v) in x.iter().enumerate() {
        let c = v.clamp(lo, hi);
        flags[i] = c != v;
        basis_row(c, &knots, degree, &mut row);
        for j in 0..k {
            out[(i, j)] = row[j];
        }
    }
    (out, flags)
}

fn check_spline_args(k: usize, degree: usize, lo: f64, hi: f64) -> Result<()> {
    if k < degree + 1 {
        return Err(Error::InvalidArgument(format!("k={k} must be at least degree+1={}", degree + 1)));
    }
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("empty basis range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Periodic B-spline basis with `k` functions over the period `[lo, hi]`.
fn cyclic_basis_clamped(x: &[f64], k: usize, degree: usize, (lo, hi): (f64, f64)) -> (DMatrix<f64>, Vec<bool>) {
    let knots = uniform_knots(lo, hi, k, degree);
    let nb = k + degree;
    let mut out = DMatrix::zeros(x.len(), k);
    let mut flags = vec![false; x.len()];
    let mut row = vec![0.0; nb];
    for (i, &v) in x.iter().enumerate() {
        let c = v.clamp(lo, hi);
        flags[i] = c != v;
        basis_row(c, &knots, degree, &mut row);
        for j in 0..nb {
            out[(i, j % k)] += row[j];
        }
    }
    (out, flags)
}

/// The `order`-th difference operator as a `(k - order) x k` matrix.
pub fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let r = d.nrows();
        d = DMatrix::from_fn(r - 1, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d
}

/// `S = D^T D` for the `order`-th difference operator, with its null-space dimension.
pub fn difference_penalty(k: usize, order: usize) -> Result<(DMatrix<f64>, usize)> {
    if order < 1 || order >= k {
        return Err(Error::InvalidArgument(format!("difference order {order} invalid for k={k}")));
    }
    let d = difference_matrix(k, order);
    Ok((d.transpose() * d, order))
}

/// Second-order differences taken around the circle.
fn cyclic_difference_matrix(k: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(k, k);
    for r in 0..k {
        d[(r, r)] += 1.0;
        d[(r, (r + 1) % k)] -= 2.0;
        d[(r, (r + 2) % k)] += 1.0;
    }
    d
}

pub fn cyclic_penalty(k: usize) -> DMatrix<f64> {
    let d = cyclic_difference_matrix(k);
    d.transpose() * d
}

/// Split the second-order difference penalty into `n_sp` locally weighted
/// pieces `D^T diag(w_l) D`. The weights are a B-spline basis over the
/// difference index, so the pieces sum to the plain penalty.
pub fn adaptive_penalties(k: usize, n_sp: usize) -> Result<Vec<(DMatrix<f64>, usize)>> {
    if k < 4 || n_sp < 1 || n_sp > k - 2 {
        return Err(Error::InvalidArgument(format!("adaptive penalty needs 1 <= n_sp <= k-2 (k={k}, n_sp={n_sp})")));
    }
    let d = difference_matrix(k, 2);
    let rows = d.nrows();
    let positions: Vec<f64> = (0..rows).map(|r| r as f64).collect();
    let w = if n_sp == 1 {
        DMatrix::from_element(rows, 1, 1.0)
    } else {
        let degree = (n_sp - 1).min(3);
        bspline_basis(&positions, n_sp, degree, (0.0, (rows - 1) as f64))?
    };
    let mut out = Vec::with_capacity(n_sp);
    for l in 0..n_sp {
        let mut wd = d.clone();
        for r in 0..rows {
            wd.row_mut(r).scale_mut(w[(r, l)]);
        }
        let s = d.transpose() * wd;
        let null = k - psd_rank(&s);
        out.push((s, null));
    }
    Ok(out)
}

/// Number of smoothing parameters used by adaptive smooths.
pub fn adaptive_n_sp(k: usize) -> usize {
    5.min(k - 2)
}

/// How a spline family is evaluated at new covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub basis: BasisType,
    pub k: usize,
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
}

impl SplineSpec {
    /// Raw (unconstrained) basis with clamping flags.
    pub fn evaluate(&self, x: &[f64]) -> (DMatrix<f64>, Vec<bool>) {
        match self.basis {
            BasisType::CC => cyclic_basis_clamped(x, self.k, self.degree, (self.lo, self.hi)),
            BasisType::PS | BasisType::AD => bspline_basis_clamped(x, self.k, self.degree, (self.lo, self.hi)),
        }
    }

    /// Raw penalties with null-space dimensions.
    pub fn penalties(&self) -> Result<Vec<(DMatrix<f64>, usize)>> {
        match self.basis {
            BasisType::PS => Ok(vec![difference_penalty(self.k, 2)?]),
            BasisType::CC => Ok(vec![(cyclic_penalty(self.k), 1)]),
            BasisType::AD => adaptive_penalties(self.k, adaptive_n_sp(self.k)),
        }
    }
}

/// Transformed basis for a functional covariate: entry `(i, j)` is
/// `(1/m) * sum_l b_j(probs[i, l]) * weights[i, l]`.
pub fn functional_columns(spline: &SplineSpec, probs: &DMatrix<f64>, weights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(functional_columns_flagged(spline, probs, weights)?.0)
}

fn functional_columns_flagged(
    spline: &SplineSpec,
    probs: &DMatrix<f64>,
    weights: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    if probs.shape() != weights.shape() {
        return Err(Error::InvalidArgument(format!(
            "functional covariate shapes differ: {:?} vs {:?}",
            probs.shape(),
            weights.shape()
        )));
    }
    let (n, m) = probs.shape();
    let mut out = DMatrix::zeros(n, spline.k);
    let mut flags = vec![false; n];
    let mut row = vec![0.0; m];
    for i in 0..n {
        for (l, r) in row.iter_mut().enumerate() {
            *r = probs[(i, l)];
        }
        let (b, f) = spline.evaluate(&row);
        flags[i] = f.iter().any(|&x| x);
        for j in 0..spline.k {
            let mut acc = 0.0;
            for l in 0..m {
                acc += b[(l, j)] * weights[(i, l)];
            }
            out[(i, j)] = acc / m as f64;
        }
    }
    Ok((out, flags))
}

/// Householder-based `K x (K-1)` basis for the null space of the row `c`.
pub fn constraint_nullspace(c: &DVector<f64>) -> DMatrix<f64> {
    let k = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vtv = v.dot(&v);
    let mut h = DMatrix::<f64>::identity(k, k);
    if vtv > 0.0 {
        h -= (2.0 / vtv) * &v * v.transpose();
    }
    h.columns(1, k - 1).into_owned()
}

/// Serializable recipe for producing a term's columns from data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermBasis {
    Linear {
        variable: String,
    },
    /// Treatment contrasts: one indicator per level after the first.
    Factor {
        variable: String,
        levels: Vec<String>,
    },
    Smooth {
        variable: String,
        by: Option<String>,
        spline: SplineSpec,
        /// Sum-to-zero reparameterization `K x (K-1)`; absent for `by` smooths.
        #[serde(with = "crate::matrix_serde::row_major_opt")]
        constraint: Option<DMatrix<f64>>,
    },
}

/// Recipe for one side of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub intercept: bool,
    pub names: Vec<String>,
    pub terms: Vec<TermBasis>,
}

/// One evaluated term.
#[derive(Debug, Clone)]
pub struct TermDesign {
    pub name: String,
    pub columns: Range<usize>,
    pub basis_matrix: DMatrix<f64>,
    /// Penalties in the term's (constrained) coordinates with null-space dimensions.
    pub penalties: Vec<(DMatrix<f64>, usize)>,
    pub centering: Option<DMatrix<f64>>,
    /// Structural rank of the summed penalties.
    pub penalty_rank: usize,
    pub is_smooth: bool,
}

/// A penalty placed in the full coefficient vector.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub term: usize,
    pub offset: usize,
    pub matrix: DMatrix<f64>,
    pub nullspace_dim: usize,
}

impl PenaltyBlock {
    pub fn embedded(&self, d: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(d, d);
        let k = self.matrix.nrows();
        out.view_mut((self.offset, self.offset), (k, k)).copy_from(&self.matrix);
        out
    }
}

#[derive(Debug, Clone)]
pub struct FullDesign {
    pub x: DMatrix<f64>,
    pub terms: Vec<TermDesign>,
    pub penalties: Vec<PenaltyBlock>,
    /// Null-space dimension of the total penalty.
    pub mp: usize,
    pub spec: DesignSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Quantile,
    Variance,
}

impl FullDesign {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_penalties(&self) -> usize {
        self.penalties.len()
    }

    /// `S^gamma = sum_l gamma_l S_l`, embedded in `d x d`.
    pub fn total_penalty(&self, gamma: &[f64]) -> DMatrix<f64> {
        let d = self.d();
        let mut s = DMatrix::zeros(d, d);
        for (p, &g) in self.penalties.iter().zip(gamma) {
            let k = p.matrix.nrows();
            let mut block = s.view_mut((p.offset, p.offset), (k, k));
            block += &p.matrix * g;
        }
        s
    }

    /// `log |S^gamma|_+`, the log pseudo-determinant. The penalty is block
    /// diagonal by term, and each block's rank is fixed structurally, so the
    /// result is smooth in `gamma`.
    pub fn log_pdet_penalty(&self, gamma: &[f64]) -> f64 {
        let mut total = 0.0;
        for (t, term) in self.terms.iter().enumerate() {
            let blocks: Vec<(usize, &PenaltyBlock)> =
                self.penalties.iter().enumerate().filter(|(_, p)| p.term == t).collect();
            if blocks.is_empty() {
                continue;
            }
            if let [(l, p)] = blocks.as_slice() {
                // Single penalty: log|g S|_+ = r log g + log|S|_+.
                let ev = crate::numeric::sym_eigenvalues(&p.matrix);
                let r = term.penalty_rank;
                total += r as f64 * gamma[*l].ln() + ev[..r].iter().map(|e| e.ln()).sum::<f64>();
                continue;
            }
            let k = term.columns.len();
            let mut s = DMatrix::zeros(k, k);
            for (l, p) in &blocks {
                s += &p.matrix * gamma[*l];
            }
            let ev = crate::numeric::sym_eigenvalues(&s);
            total += ev[..term.penalty_rank].iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).sum::<f64>();
        }
        total
    }

    /// A design assembled directly from a matrix and penalized column blocks
    /// `(offset, S)`, one term per block. Unpenalized columns get no term.
    pub fn from_blocks(x: DMatrix<f64>, blocks: Vec<(usize, DMatrix<f64>)>) -> Result<Self> {
        let d = x.ncols();
        let mut terms = Vec::new();
        let mut penalties = Vec::new();
        for (j, (offset, s)) in blocks.into_iter().enumerate() {
            let k = s.nrows();
            if s.ncols() != k || offset + k > d {
                return Err(Error::InvalidArgument(format!("penalty block {j} does not fit a {d}-column design")));
            }
            let rank = psd_rank(&s);
            penalties.push(PenaltyBlock { term: j, offset, matrix: s.clone(), nullspace_dim: k - rank });
            terms.push(TermDesign {
                name: format!("block{}", j + 1),
                columns: offset..offset + k,
                basis_matrix: x.columns(offset, k).into_owned(),
                penalties: vec![(s, k - rank)],
                centering: None,
                penalty_rank: rank,
                is_smooth: true,
            });
        }
        let mp = d - terms.iter().map(|t| t.penalty_rank).sum::<usize>();
        let spec = DesignSpec { intercept: false, names: terms.iter().map(|t| t.name.clone()).collect(), terms: Vec::new() };
        Ok(Self { x, terms, penalties, mp, spec })
    }

    /// Column range of each term (intercept and parametric terms included).
    pub fn term_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        if self.spec.intercept {
            out.push(("(Intercept)".to_string(), 0..1));
        }
        for t in &self.terms {
            out.push((t.name.clone(), t.columns.clone()));
        }
        out
    }
}

fn covariate_block(data: &Dataset, name: &str) -> Result<DMatrix<f64>> {
    match data.column(name)? {
        Column::Scalar(v) => Ok(DMatrix::from_column_slice(v.len(), 1, v)),
        Column::Matrix(m) => Ok(m.clone()),
        Column::Factor { .. } => Err(Error::Data(format!("column `{name}` is a factor, expected numeric"))),
    }
}

impl DesignSpec {
    /// Number of design columns contributed by each term, in order.
    pub fn term_widths(&self) -> Vec<usize> {
        self.terms
            .iter()
            .map(|t| match t {
                TermBasis::Linear { .. } => 1,
                TermBasis::Factor { levels, .. } => levels.len() - 1,
                TermBasis::Smooth { spline, constraint, .. } => constraint.as_ref().map_or(spline.k, |z| z.ncols()),
            })
            .collect()
    }

    /// Column range of each named term, intercept first when present.
    pub fn column_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0;
        if self.intercept {
            out.push(("(Intercept)".to_string(), 0..1));
            at = 1;
        }
        for (name, w) in self.names.iter().zip(self.term_widths()) {
            out.push((name.clone(), at..at + w));
            at += w;
        }
        out
    }

    /// Data columns read by the design, including `by` matrices.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in &self.terms {
            match t {
                TermBasis::Linear { variable } | TermBasis::Factor { variable, .. } => {
                    out.insert(variable.clone());
                }
                TermBasis::Smooth { variable, by, .. } => {
                    out.insert(variable.clone());
                    out.extend(by.clone());
                }
            }
        }
        out
    }

    pub fn n_columns(&self) -> usize {
        usize::from(self.intercept) + self.term_widths().iter().sum::<usize>()
    }

    /// Evaluate the design on `data`. Smooth inputs outside the stored
    /// ranges are clamped and flagged when `allow_clamp`, rejected otherwise.
    pub fn evaluate(&self, data: &Dataset, allow_clamp: bool) -> Result<(DMatrix<f64>, Vec<bool>)> {
        let n = data.n();
        let mut blocks: Vec<DMatrix<f64>> = Vec::new();
        let mut flags = vec![false; n];
        if self.intercept {
            blocks.push(DMatrix::from_element(n, 1, 1.0));
        }
        for (name, term) in self.names.iter().zip(&self.terms) {
            let block = match term {
                TermBasis::Linear { variable } => {
                    let v = data.scalar(variable).map_err(|_| kind_error(data, variable, "scalar"))?;
                    DMatrix::from_column_slice(n, 1, v)
                }
                TermBasis::Factor { variable, levels } => {
                    let (codes, own) = match data.column(variable)? {
                        Column::Factor { codes, levels } => (codes, levels),
                        _ => return Err(kind_error(data, variable, "factor")),
                    };
                    let map: Vec<usize> = own
                        .iter()
                        .map(|l| {
                            levels.iter().position(|t| t == l).ok_or_else(|| {
                                let row = codes.iter().position(|&c| own[c] == *l).unwrap_or(0);
                                Error::Data(format!(
                                    "row {}: level `{l}` of factor `{variable}` was not seen in training",
                                    row + 1
                                ))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let mut m = DMatrix::zeros(n, levels.len() - 1);
                    for (i, &c) in codes.iter().enumerate() {
                        let idx = map[c];
                        if idx > 0 {
                            m[(i, idx - 1)] = 1.0;
                        }
                    }
                    m
                }
                TermBasis::Smooth { variable, by, spline, constraint } => {
                    let (raw, f) = smooth_raw(data, variable, by.as_deref(), spline)?;
                    if !allow_clamp {
                        if let Some(i) = f.iter().position(|&b| b) {
                            return Err(Error::Data(format!(
                                "row {}: `{variable}` outside the basis range of `{name}`",
                                i + 1
                            )));
                        }
                    }
                    flags.iter_mut().zip(&f).for_each(|(a, &b)| *a |= b);
                    match constraint {
                        Some(z) => raw * z,
                        None => raw,
                    }
                }
            };
            blocks.push(block);
        }
        let d: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut x = DMatrix::zeros(n, d);
        let mut at = 0;
        for b in blocks {
            x.view_mut((0, at), (n, b.ncols())).copy_from(&b);
            at += b.ncols();
        }
        Ok((x, flags))
    }
}

type TermParts = (TermBasis, DMatrix<f64>, Vec<(DMatrix<f64>, usize)>, Option<DMatrix<f64>>, bool);

/// Treatment-contrast dummies for a factor column.
fn factor_basis(data: &Dataset, variable: &str, name: &str) -> Result<TermParts> {
    let levels = match data.column(variable)? {
        Column::Factor { levels, .. } => levels.clone(),
        _ => return Err(kind_error(data, variable, "factor")),
    };
    if levels.len() < 2 {
        return Err(Error::Data(format!("factor `{variable}` has a single level")));
    }
    let recipe = TermBasis::Factor { variable: variable.to_owned(), levels };
    let tmp = DesignSpec { intercept: false, names: vec![name.to_owned()], terms: vec![recipe.clone()] };
    let (m, _) = tmp.evaluate(data, false)?;
    Ok((recipe, m, Vec::new(), None, false))
}

fn kind_error(data: &Dataset, variable: &str, want: &str) -> Error {
    match data.column(variable) {
        Ok(c) => Error::Data(format!("column `{variable}` is a {}, expected {want}", c.kind())),
        Err(e) => e,
    }
}

fn smooth_raw(data: &Dataset, variable: &str, by: Option<&str>, spline: &SplineSpec) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let cov = covariate_block(data, variable)?;
    match by {
        None => {
            if cov.ncols() != 1 {
                return Err(Error::Data(format!("matrix covariate `{variable}` needs a `by` matrix")));
            }
            Ok(spline.evaluate(cov.as_slice()))
        }
        Some(by) => {
            let w = covariate_block(data, by)?;
            functional_columns_flagged(spline, &cov, &w)
        }
    }
}

fn smooth_spec(data: &Dataset, s: &SmoothTerm) -> Result<SplineSpec> {
    let cov = covariate_block(data, &s.variable)?;
    let lo = cov.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cov.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::Data(format!("smooth covariate `{}` is constant", s.variable)));
    }
    Ok(SplineSpec { basis: s.basis, k: s.k, degree: s.degree, lo, hi })
}

/// Assemble the design for one side of `spec` over `data`.
///
/// ```
/// use quantgam::{basis::{build_design, Side}, data::Dataset, formula::parse_formula};
///
/// let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
/// let data = Dataset::new(50).with_scalar("x", x.clone()).unwrap().with_scalar("y", x).unwrap();
/// let spec = parse_formula("y ~ s(x, k=10)").unwrap();
/// let design = build_design(&spec, &data, Side::Quantile).unwrap();
/// assert_eq!(design.d(), 10);
/// assert_eq!(design.mp, 2);
/// ```
pub fn build_design(spec: &ModelSpec, data: &Dataset, side: Side) -> Result<FullDesign> {
    let (terms, intercept) = match side {
        Side::Quantile => (&spec.quantile_terms, spec.has_intercept),
        Side::Variance => (&spec.variance_terms, true),
    };
    let n = data.n();
    let mut at = usize::from(intercept);
    let mut names = Vec::new();
    let mut recipes = Vec::new();
    let mut term_designs = Vec::new();
    let mut penalties = Vec::new();
    for term in terms {
        let name = term.name();
        let (recipe, basis_matrix, pens, centering, is_smooth) = match term {
            Term::Linear { variable } if matches!(data.column(variable)?, Column::Factor { .. }) => {
                factor_basis(data, variable, &name)?
            }
            Term::Linear { variable } => {
                let v = data.scalar(variable).map_err(|_| kind_error(data, variable, "scalar"))?;
                (
                    TermBasis::Linear { variable: variable.clone() },
                    DMatrix::from_column_slice(n, 1, v),
                    Vec::new(),
                    None,
                    false,
                )
            }
            Term::Factor { variable } => factor_basis(data, variable, &name)?,
            Term::Smooth(s) => {
                let spline = smooth_spec(data, s)?;
                let (raw, _) = smooth_raw(data, &s.variable, s.by.as_deref(), &spline)?;
                let raw_pens = spline.penalties()?;
                let (basis_matrix, pens, constraint) = if s.by.is_none() {
                    let c = DVector::from_iterator(raw.ncols(), raw.column_iter().map(|col| col.sum()));
                    let z = constraint_nullspace(&c);
                    let pens: Vec<(DMatrix<f64>, usize)> = raw_pens
                        .into_iter()
                        .map(|(s, _)| {
                            let mut zs = z.transpose() * s * &z;
                            crate::numeric::symmetrize(&mut zs);
                            let null = zs.nrows() - psd_rank(&zs);
                            (zs, null)
                        })
                        .collect();
                    (&raw * &z, pens, Some(z))
                } else {
                    (raw, raw_pens, None)
                };
                let recipe = TermBasis::Smooth {
                    variable: s.variable.clone(),
                    by: s.by.clone(),
                    spline,
                    constraint: constraint.clone(),
                };
                (recipe, basis_matrix, pens, constraint, true)
            }
        };
        let width = basis_matrix.ncols();
        let columns = at..at + width;
        let penalty_rank = if pens.is_empty() {
            0
        } else {
            let mut sum = DMatrix::zeros(width, width);
            for (s, _) in &pens {
                sum += s;
            }
            psd_rank(&sum)
        };
        for (s, null) in &pens {
            penalties.push(PenaltyBlock {
                term: term_designs.len(),
                offset: at,
                matrix: s.clone(),
                nullspace_dim: *null,
            });
        }
        term_designs.push(TermDesign {
            name: name.clone(),
            columns,
            basis_matrix,
            penalties: pens,
            centering,
            penalty_rank,
            is_smooth,
        });
        names.push(name);
        recipes.push(recipe);
        at += width;
    }
    let spec = DesignSpec { intercept, names, terms: recipes };
    let (x, _) = spec.evaluate(data, false)?;
    let d = x.ncols();
    let mp = d - term_designs.iter().map(|t| t.penalty_rank).sum::<usize>();
    Ok(FullDesign { x, terms: term_designs, penalties, mp, spec })
}

/// Minimum eigenvalue relative to the maximum, for PSD checks in tests.
pub fn relative_min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    let ev = crate::numeric::sym_eigenvalues(s);
    let max = ev.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0.0;
    }
    ev.last().copied().unwrap_or(0.0) / max
}
