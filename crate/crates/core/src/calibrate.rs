//! Learning-rate calibration.
//!
//! For each trial `log sigma0` the model is refitted and the integrated
//! Kullback–Leibler (IKL) discrepancy between the posterior variance
//! `v = x'Vx` and the sandwich variance `v_s = x'V_s x` is computed. Brent's
//! method minimizes the IKL over `log sigma0`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::FullDesign;
use crate::elf::{ElfLikelihood, ElfParams};
use crate::error::{Error, Result};
use crate::laml::{optimize_gamma, LamlResult};
use crate::numeric::{row_quadratic_forms, symmetrize};
use crate::pirls::{BetaFit, Likelihood};
use crate::preliminary::{BandwidthPlan, Decomposition};

/// Relative eigenvalue floor applied to the gradient covariance.
const EIGEN_FLOOR: f64 = 1e-6;
/// Below this relative size the raw gradient covariance counts as singular.
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// Gradient covariance before flooring.
    pub sigma_grad: DMatrix<f64>,
    pub v_s: DMatrix<f64>,
    /// Eigenvalue floor applied to `sigma_grad`, zero when none was needed.
    pub ridge_used: f64,
    /// Condition number of the raw gradient covariance.
    pub condition: f64,
}

/// `V_s = (I Sigma^-1 I + S)^-1` with `Sigma = n/(n - edf) sum_i g_i g_i'`.
pub fn sandwich_cov<L: Likelihood>(design: &FullDesign, gamma: &[f64], fit: &BetaFit, lik: &L) -> Result<SandwichCov> {
    let x = &design.x;
    let (n, d) = x.shape();
    if (n as f64) <= fit.edf_total {
        return Err(Error::Singular(format!("{n} rows cannot support {:.2} effective degrees of freedom", fit.edf_total)));
    }
    let mut g = x.clone();
    for i in 0..n {
        let d1 = lik.derivs(i, fit.eta[i]).0;
        g.row_mut(i).scale_mut(-d1);
    }
    let mut sigma = g.transpose() * &g * (n as f64 / (n as f64 - fit.edf_total));
    symmetrize(&mut sigma);
    let eig = SymmetricEigen::new(sigma.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(max > 0.0) || (n <= d && min <= SINGULAR_TOL * max) {
        return Err(Error::Singular(format!(
            "gradient covariance from {n} rows is rank deficient for {d} coefficients (condition {condition:.3e})"
        )));
    }
    let floor = EIGEN_FLOOR * max;
    let ridge_used = if min < floor { floor } else { 0.0 };
    let inv_ev = DVector::from_iterator(d, eig.eigenvalues.iter().map(|&e| 1.0 / e.max(floor)));
    let q = &eig.eigenvectors;
    let sigma_inv = q * DMatrix::from_diagonal(&inv_ev) * q.transpose();
    let info = &fit.neg_hessian;
    let mut a = info * sigma_inv * info + design.total_penalty(gamma);
    symmetrize(&mut a);
    let chol = Cholesky::new(a.clone()).ok_or_else(|| {
        let ev = SymmetricEigen::new(a).eigenvalues;
        let cond = if ev.min() > 0.0 { ev.max() / ev.min() } else { f64::INFINITY };
        Error::Singular(format!("sandwich precision is singular after flooring (condition {cond:.3e})"))
    })?;
    let mut v_s = chol.inverse();
    symmetrize(&mut v_s);
    Ok(SandwichCov { sigma_grad: sigma, v_s, ridge_used, condition })
}

/// `n^-1 sum_i (v_s/v + log(v/v_s))^(1/2)` over the rows of `x`.
pub fn ikl_loss(x: &DMatrix<f64>, v: &DMatrix<f64>, v_s: &DMatrix<f64>) -> Result<f64> {
    let vv = row_quadratic_forms(x, v);
    let vs = row_quadratic_forms(x, v_s);
    let mut total = 0.0;
    for i in 0..vv.len() {
        if !(vv[i] > 0.0 && vs[i] > 0.0) {
            return Err(Error::Numerical(format!("row {}: nonpositive posterior variance", i + 1)));
        }
        let r = vs[i] / vv[i];
        total += (r - r.ln()).sqrt();
    }
    Ok(total / vv.len() as f64)
}

#[derive(Debug, Clone)]
pub struct BrentResult {
    pub x: f64,
    pub fx: f64,
    /// Every evaluation `(x, f(x))` in order.
    pub trace: Vec<(f64, f64)>,
    /// Half-width of the final interval.
    pub tolerance_achieved: f64,
}

const MAX_BRENT_EVALS: usize = 100;

/// Brent's minimizer (golden section with parabolic interpolation) on `[a, b]`.
pub fn brent_minimize<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<BrentResult> {
    if !(a < b) {
        return Err(Error::InvalidArgument(format!("empty bracket [{a}, {b}]")));
    }
    let c = 0.5 * (3.0 - 5f64.sqrt());
    let eps = f64::EPSILON.sqrt();
    let (mut a, mut b) = (a, b);
    let mut trace = Vec::new();
    let mut eval = |x: f64, trace: &mut Vec<(f64, f64)>| {
        let v = f(x);
        trace.push((x, v));
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut v = a + c * (b - a);
    let mut w = v;
    let mut x = v;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut fx = eval(x, &mut trace);
    let mut fv = fx;
    let mut fw = fx;
    loop {
        let xm = 0.5 * (a + b);
        let tol1 = eps * x.abs() + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok(BrentResult { x, fx, trace, tolerance_achieved: 0.5 * (b - a) });
        }
        if trace.len() >= MAX_BRENT_EVALS {
            return Err(Error::NoConvergence { iterations: trace.len(), grad_norm: 0.5 * (b - a) });
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            } else {
                q = -q;
            }
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < xm { b - x } else { a - x };
            d = c * e;
        }
        let u = if d.abs() >= tol1 { x + d } else if d > 0.0 { x + tol1 } else { x - tol1 };
        let fu = eval(u, &mut trace);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub log_sigma0: f64,
    /// `None` when the fit at this point failed.
    pub ikl: Option<f64>,
    pub converged_inner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTrace {
    pub evaluations: Vec<TracePoint>,
    pub bracket: (f64, f64),
    pub argmin: f64,
    /// `None` when Brent stopped at its evaluation cap.
    pub tolerance_achieved: Option<f64>,
    /// The minimum stayed on a bracket edge after all expansions.
    pub boundary: bool,
    /// Some step between neighbouring evaluations looks like a jump.
    pub discontinuity: bool,
}

/// Flag a jump: an interior segment of the sorted trace whose secant slope
/// exceeds ten times the slopes of both adjacent segments. Convex traces
/// never trigger it.
pub fn detect_discontinuity(points: &[(f64, f64)]) -> bool {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1.is_finite()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    let slopes: Vec<(f64, f64)> = pts.windows(2).map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0), w[1].1 - w[0].1)).collect();
    (1..slopes.len().saturating_sub(1)).any(|k| {
        let (s, jump) = slopes[k];
        s.abs() > 10.0 * slopes[k - 1].0.abs().max(slopes[k + 1].0.abs()) && jump.abs() > 1e-6
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Initial bracket in `log sigma0`; defaults to `log(mean h*) + [-5, 3]`.
    pub bracket: Option<(f64, f64)>,
    pub tol: f64,
    pub max_expansions: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self { bracket: None, tol: 1e-2, max_expansions: 4 }
    }
}

/// The fit at one trial `sigma0`.
#[derive(Debug, Clone)]
pub struct CalibratedFit {
    pub sigma0: f64,
    pub decomposition: Decomposition,
    pub params: ElfParams,
    pub laml: LamlResult,
    pub sandwich: SandwichCov,
    pub ikl: f64,
}

fn evaluate(
    design: &FullDesign,
    plan: &BandwidthPlan,
    y: &[f64],
    tau: f64,
    log_sigma0: f64,
    gamma0: Option<&[f64]>,
) -> Result<CalibratedFit> {
    let sigma0 = log_sigma0.exp();
    let decomposition = plan.decompose(sigma0)?;
    let params = ElfParams::new(tau, decomposition.lambda, decomposition.sigma.clone())?;
    let lik = ElfLikelihood::new(y.to_vec(), params.clone())?;
    let laml = optimize_gamma(design, &lik, gamma0)?;
    let sandwich = sandwich_cov(design, &laml.gamma, &laml.beta_fit, &lik)?;
    let ikl = ikl_loss(&design.x, &laml.beta_fit.v, &sandwich.v_s)?;
    Ok(CalibratedFit { sigma0, decomposition, params, laml, sandwich, ikl })
}

/// Minimize IKL over `log sigma0`, returning the fit at the minimizer.
pub fn calibrate_sigma0(
    design: &FullDesign,
    plan: &BandwidthPlan,
    y: &[f64],
    tau: f64,
    opts: &CalibrationOptions,
) -> Result<(CalibratedFit, CalibrationTrace)> {
    let centre = plan.mean_h().ln();
    let (mut lo, mut hi) = opts.bracket.unwrap_or((centre - 5.0, centre + 3.0));
    let mut evaluated: Vec<(f64, Option<CalibratedFit>)> = Vec::new();
    let mut best: Option<CalibratedFit> = None;
    let mut last_error = None;
    let mut tolerance_achieved;
    let mut boundary;
    let mut expansions = 0;
    loop {
        let res = brent_minimize(
            |s| {
                // Warm start from the nearest successful evaluation.
                let gamma0 = evaluated
                    .iter()
                    .filter_map(|(t, f)| f.as_ref().map(|f| ((t - s).abs(), f.laml.gamma.clone())))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .map(|(_, g)| g);
                match evaluate(design, plan, y, tau, s, gamma0.as_deref()) {
                    Ok(fit) => {
                        let v = fit.ikl;
                        if best.as_ref().is_none_or(|b| v < b.ikl) {
                            best = Some(fit.clone());
                        }
                        evaluated.push((s, Some(fit)));
                        v
                    }
                    Err(e) => {
                        last_error = Some(e);
                        evaluated.push((s, None));
                        f64::INFINITY
                    }
                }
            },
            lo,
            hi,
            opts.tol,
        );
        let (argmin, tol_reached) = match res {
            Ok(r) => (r.x, Some(r.tolerance_achieved)),
            Err(_) => (best.as_ref().map_or(0.5 * (lo + hi), |b| b.sigma0.ln()), None),
        };
        tolerance_achieved = tol_reached;
        let edge = 2.0 * opts.tol + 1e-8 * argmin.abs();
        let at_lo = argmin - lo <= edge;
        let at_hi = hi - argmin <= edge;
        boundary = at_lo || at_hi;
        if !boundary || expansions >= opts.max_expansions {
            break;
        }
        expansions += 1;
        let w = hi - lo;
        if at_lo {
            lo -= 2.0 * w;
        } else {
            hi += 2.0 * w;
        }
    }
    let best = best.ok_or_else(|| {
        let cause = last_error.map_or_else(|| "no evaluations".to_string(), |e| e.to_string());
        Error::Numerical(format!("every calibration fit failed; last error: {cause}"))
    })?;
    let evaluations: Vec<TracePoint> = evaluated
        .iter()
        .map(|(s, f)| TracePoint {
            log_sigma0: *s,
            ikl: f.as_ref().map(|f| f.ikl),
            converged_inner: f.as_ref().is_some_and(|f| f.laml.converged),
        })
        .collect();
    let pts: Vec<(f64, f64)> = evaluations.iter().map(|p| (p.log_sigma0, p.ikl.unwrap_or(f64::INFINITY))).collect();
    let trace = CalibrationTrace {
        discontinuity: detect_discontinuity(&pts),
        evaluations,
        bracket: (lo, hi),
        argmin: best.sigma0.ln(),
        tolerance_achieved,
        boundary,
    };
    Ok((best, trace))
}
