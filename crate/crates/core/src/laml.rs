//! Laplace approximate marginal likelihood (LAML) and smoothing parameter
//! selection.
//!
//! For penalties `S = sum_l gamma_l S_l` the improper Gaussian prior
//! `beta ~ N(0, S^-)` combined with a log-likelihood `ll(beta)` gives
//!
//! ```text
//! G = ll(b) - b'Sb/2 - log|X'WX + S|/2 + log|S|_+/2 + (M_p/2) log(2 pi)
//! ```
//!
//! where `b` is the penalized fit and `M_p` the null-space dimension of `S`.
//! [`optimize_gamma`] maximizes `G` over `rho = log gamma` by BFGS with
//! central finite-difference gradients.

use nalgebra::{DMatrix, DVector};

use crate::basis::FullDesign;
use crate::error::{Error, Result};
use crate::pirls::{fit_beta, BetaFit, Likelihood};

/// Finite-difference step in `log gamma`.
const FD_STEP: f64 = 1e-4;
/// Largest change of any `log gamma` in one outer step.
const MAX_STEP: f64 = 5.0;
/// Search box half-width around the starting `log gamma`.
const RHO_RANGE: f64 = 30.0;

/// LAML at `gamma`, with the inner fit it was computed from.
pub fn laml_value<L: Likelihood>(
    design: &FullDesign,
    gamma: &[f64],
    lik: &L,
    beta0: Option<&DVector<f64>>,
) -> Result<(f64, BetaFit)> {
    let fit = fit_beta(design, gamma, lik, beta0)?;
    Ok((laml_from_fit(design, gamma, &fit), fit))
}

pub fn laml_from_fit(design: &FullDesign, gamma: &[f64], fit: &BetaFit) -> f64 {
    fit.log_lik - 0.5 * fit.penalty - 0.5 * fit.log_det_hessian
        + 0.5 * design.log_pdet_penalty(gamma)
        + 0.5 * design.mp as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Scale-matching start: `trace(X_j'X_j) / trace(S_l)` over each penalty's columns.
pub fn default_gamma0(design: &FullDesign) -> Vec<f64> {
    design
        .penalties
        .iter()
        .map(|p| {
            let k = p.matrix.nrows();
            let xb = design.x.columns(p.offset, k);
            let tx: f64 = xb.iter().map(|v| v * v).sum();
            let ts = p.matrix.trace();
            if tx > 0.0 && ts > 0.0 {
                tx / ts
            } else {
                1.0
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LamlResult {
    pub gamma: Vec<f64>,
    pub laml: f64,
    pub beta_fit: BetaFit,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Gradient of `G` in `log gamma` at the returned point.
    pub grad_at_opt: Vec<f64>,
    /// Number of inner fits performed.
    pub evaluations: usize,
}

struct Objective<'a, L: Likelihood> {
    design: &'a FullDesign,
    lik: &'a L,
    evaluations: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl<L: Likelihood> Objective<'_, L> {
    fn eval(&mut self, rho: &[f64], start: Option<&DVector<f64>>) -> Option<(f64, BetaFit)> {
        self.evaluations += 1;
        let gamma: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        match laml_value(self.design, &gamma, self.lik, start) {
            Ok((g, fit)) if g.is_finite() => Some((g, fit)),
            _ => None,
        }
    }

    /// Central differences of `G`; one-sided at the box edges.
    fn grad(&mut self, rho: &[f64], g0: f64, start: &DVector<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; rho.len()];
        for j in 0..rho.len() {
            let mut up = rho.to_vec();
            let mut dn = rho.to_vec();
            up[j] = (up[j] + FD_STEP).min(self.hi[j]);
            dn[j] = (dn[j] - FD_STEP).max(self.lo[j]);
            let gu = if up[j] == rho[j] { g0 } else { self.value(&up, start)? };
            let gd = if dn[j] == rho[j] { g0 } else { self.value(&dn, start)? };
            out[j] = (gu - gd) / (up[j] - dn[j]);
        }
        Ok(out)
    }

    fn value(&mut self, rho: &[f64], start: &DVector<f64>) -> Result<f64> {
        self.eval(rho, Some(start))
            .map(|(g, _)| g)
            .ok_or_else(|| Error::Numerical("inner fit failed during LAML gradient".into()))
    }
}

/// Maximize LAML over `log gamma`, starting from `gamma0` (or [`default_gamma0`]).
pub fn optimize_gamma<L: Likelihood>(design: &FullDesign, lik: &L, gamma0: Option<&[f64]>) -> Result<LamlResult> {
    let m = design.n_penalties();
    let gamma0 = match gamma0 {
        Some(g) if g.len() == m => g.to_vec(),
        Some(g) => return Err(Error::InvalidArgument(format!("expected {m} starting values, got {}", g.len()))),
        None => default_gamma0(design),
    };
    if let Some(g) = gamma0.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::InvalidArgument(format!("starting smoothing parameters must be positive, got {g}")));
    }
    let (g0, fit0) = laml_value(design, &gamma0, lik, None)?;
    if m == 0 {
        return Ok(LamlResult {
            gamma: gamma0,
            laml: g0,
            beta_fit: fit0,
            outer_iterations: 0,
            converged: true,
            grad_at_opt: Vec::new(),
            evaluations: 1,
        });
    }
    let rho0: Vec<f64> = gamma0.iter().map(|g| g.ln()).collect();
    let mut obj = Objective {
        design,
        lik,
        evaluations: 1,
        lo: rho0.iter().map(|r| r - RHO_RANGE).collect(),
        hi: rho0.iter().map(|r| r + RHO_RANGE).collect(),
    };

    // Minimize f = -G.
    let mut rho = rho0;
    let mut f = -g0;
    let mut fit = fit0;
    let mut grad: Vec<f64> = obj.grad(&rho, g0, &fit.beta)?.iter().map(|g| -g).collect();
    let mut hinv = DMatrix::<f64>::identity(m, m);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < 100 {
        let pg = projected(&grad, &rho, &obj.lo, &obj.hi);
        if pg.iter().fold(0.0f64, |a, g| a.max(g.abs())) < 1e-5 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_vec(pg.clone());
        let mut dir = -(&hinv * &gv);
        if dir.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(m, m);
            dir = -gv.clone();
        }
        let amax = dir.amax();
        if amax > MAX_STEP {
            dir *= MAX_STEP / amax;
        }
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = (0..m).map(|j| (rho[j] + t * dir[j]).clamp(obj.lo[j], obj.hi[j])).collect();
            if let Some((g, cf)) = obj.eval(&cand, Some(&fit.beta)) {
                if -g <= f + 1e-4 * t * slope {
                    accepted = Some((cand, -g, cf));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((cand, fc, cf)) = accepted else {
            break;
        };
        let new_grad: Vec<f64> = obj.grad(&cand, -fc, &cf.beta)?.iter().map(|g| -g).collect();
        let s = DVector::from_iterator(m, (0..m).map(|j| cand[j] - rho[j]));
        let y = DVector::from_iterator(m, (0..m).map(|j| new_grad[j] - grad[j]));
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            let rho_k = 1.0 / sy;
            let i = DMatrix::<f64>::identity(m, m);
            let a = &i - &s * y.transpose() * rho_k;
            let b = &i - &y * s.transpose() * rho_k;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho_k;
        }
        let change = f - fc;
        rho = cand;
        f = fc;
        fit = cf;
        grad = new_grad;
        if change.abs() < 1e-12 * (1.0 + f.abs()) && s.amax() < 1e-8 {
            break;
        }
    }
    let grad_at_opt: Vec<f64> = projected(&grad, &rho, &obj.lo, &obj.hi).iter().map(|g| -g).collect();
    if !converged {
        converged = grad_at_opt.iter().fold(0.0f64, |a, g| a.max(g.abs())) < 1e-5 * (1.0 + f.abs());
    }
    Ok(LamlResult {
        gamma: rho.iter().map(|r| r.exp()).collect(),
        laml: -f,
        beta_fit: fit,
        outer_iterations: iterations,
        converged,
        grad_at_opt,
        evaluations: obj.evaluations,
    })
}

/// Zero the gradient components that push against an active box edge.
fn projected(grad: &[f64], rho: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..grad.len())
        .map(|j| {
            let at_lo = rho[j] <= lo[j] && grad[j] > 0.0;
            let at_hi = rho[j] >= hi[j] && grad[j] < 0.0;
            if at_lo || at_hi {
                0.0
            } else {
                grad[j]
            }
        })
        .collect()
}

/// Finite-difference Hessian of `G` in `log gamma` at `gamma`.
pub fn laml_hessian<L: Likelihood>(design: &FullDesign, lik: &L, gamma: &[f64], start: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = gamma.len();
    let rho: Vec<f64> = gamma.iter().map(|g| g.ln()).collect();
    let h = 1e-3;
    let g_at = |r: &[f64]| -> Result<f64> {
        let gm: Vec<f64> = r.iter().map(|v| v.exp()).collect();
        Ok(laml_value(design, &gm, lik, Some(start))?.0)
    };
    let g0 = g_at(&rho)?;
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let shifted = |si: f64, sj: f64| {
                let mut r = rho.clone();
                r[i] += si;
                r[j] += sj;
                r
            };
            let v = if i == j {
                (g_at(&shifted(h, 0.0))? - 2.0 * g0 + g_at(&shifted(-h, 0.0))?) / (h * h)
            } else {
                (g_at(&shifted(h, h))? - g_at(&shifted(h, -h))? - g_at(&shifted(-h, h))? + g_at(&shifted(-h, -h))?)
                    / (4.0 * h * h)
            };
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
