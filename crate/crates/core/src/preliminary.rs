//! The preliminary stage: a Gaussian location-scale fit, a sinh-arcsinh model
//! of the standardized residuals and the loss bandwidth derived from them.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{build_design, DesignSpec, Side};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::formula::ModelSpec;
use crate::laml::optimize_gamma;
use crate::numeric::{bisect, integrate, matvec, nelder_mead, sigmoid};
use crate::pirls::{GammaLikelihood, GaussianLikelihood};

/// Largest multiplier `h / kappa` allowed for the automatic bandwidth.
pub const BANDWIDTH_CAP: f64 = 10.0;

const MAX_SWEEPS: usize = 25;
const SWEEP_TOL: f64 = 1e-4;

/// Fitted mean `alpha(x)` and standard deviation `kappa(x)` on the training rows.
#[derive(Debug, Clone)]
pub struct LocationScaleFit {
    pub alpha_hat: Vec<f64>,
    pub kappa_hat: Vec<f64>,
    /// Effective degrees of freedom of the mean model.
    pub d_alpha: f64,
    /// Standardized residuals `(y - alpha) / kappa`.
    pub z: Vec<f64>,
    pub model: LocationScaleModel,
    pub sweeps: usize,
    pub converged: bool,
}

/// Coefficients of the location-scale fit, enough to predict on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScaleModel {
    pub mean_design: DesignSpec,
    pub mean_beta: Vec<f64>,
    pub mean_gamma: Vec<f64>,
    /// Log-variance model; `None` when the variance is constant.
    pub variance_design: Option<DesignSpec>,
    pub variance_beta: Vec<f64>,
    pub variance_gamma: Vec<f64>,
    pub kappa_constant: f64,
}

impl LocationScaleModel {
    pub fn predict_alpha(&self, data: &Dataset) -> Result<Vec<f64>> {
        let (x, _) = self.mean_design.evaluate(data, true)?;
        Ok(matvec(&x, &DVector::from_column_slice(&self.mean_beta)).as_slice().to_vec())
    }

    pub fn predict_kappa(&self, data: &Dataset) -> Result<Vec<f64>> {
        match &self.variance_design {
            None => Ok(vec![self.kappa_constant; data.n()]),
            Some(spec) => {
                let (x, _) = spec.evaluate(data, true)?;
                let eta = matvec(&x, &DVector::from_column_slice(&self.variance_beta));
                Ok(eta.iter().map(|e| (0.5 * e).exp()).collect())
            }
        }
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Backfit a Gaussian location-scale model: the mean on the quantile side of
/// `spec`, the log variance on its variance side.
pub fn fit_location_scale(spec: &ModelSpec, data: &Dataset) -> Result<LocationScaleFit> {
    let y = data.scalar(&spec.response)?.to_vec();
    let n = y.len();
    let (ybar, ysd) = mean_sd(&y);
    if !(ysd > 1e-12 * ybar.abs().max(1.0)) {
        return Err(Error::ZeroVariance(format!("response `{}` is constant", spec.response)));
    }
    let mean_design = build_design(spec, data, Side::Quantile)?;
    let var_design = if spec.has_variance_model() { Some(build_design(spec, data, Side::Variance)?) } else { None };

    let mut kappa = vec![ysd; n];
    let mut mean_gamma: Option<Vec<f64>> = None;
    let mut var_gamma: Option<Vec<f64>> = None;
    let mut var_beta = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    let mut mean_fit;
    loop {
        sweeps += 1;
        let lik = GaussianLikelihood { y: y.clone(), weights: kappa.iter().map(|k| 1.0 / (k * k)).collect() };
        mean_fit = optimize_gamma(&mean_design, &lik, mean_gamma.as_deref())?;
        mean_gamma = Some(mean_fit.gamma.clone());
        let resid: Vec<f64> = (0..n).map(|i| y[i] - mean_fit.beta_fit.eta[i]).collect();
        let new_kappa: Vec<f64> = match &var_design {
            None => {
                let dof = n as f64 - mean_fit.beta_fit.edf_total;
                if dof <= 0.0 {
                    return Err(Error::Data(format!("mean model uses {dof:.2} more degrees of freedom than rows")));
                }
                let rss: f64 = resid.iter().map(|r| r * r).sum();
                vec![(rss / dof).sqrt(); n]
            }
            Some(vd) => {
                let lik = GammaLikelihood::squared_residuals(&resid, 0.5);
                let vf = optimize_gamma(vd, &lik, var_gamma.as_deref())?;
                var_gamma = Some(vf.gamma.clone());
                var_beta = vf.beta_fit.beta.as_slice().to_vec();
                vf.beta_fit.eta.iter().map(|e| (0.5 * e).exp()).collect()
            }
        };
        if new_kappa.iter().fold(0.0f64, |a, &k| a.max(k)) <= 1e-10 * ysd {
            return Err(Error::ZeroVariance("residual scale collapsed to zero".into()));
        }
        let change = (0..n).map(|i| ((new_kappa[i] - kappa[i]) / kappa[i]).abs()).fold(0.0, f64::max);
        kappa = new_kappa;
        // A constant scale does not change the mean fit, so one extra sweep suffices.
        if change < SWEEP_TOL || (var_design.is_none() && sweeps >= 2) {
            converged = true;
            break;
        }
        if sweeps >= MAX_SWEEPS {
            break;
        }
    }
    let alpha = mean_fit.beta_fit.eta.as_slice().to_vec();
    let z = (0..n).map(|i| (y[i] - alpha[i]) / kappa[i]).collect();
    Ok(LocationScaleFit {
        d_alpha: mean_fit.beta_fit.edf_total,
        alpha_hat: alpha,
        model: LocationScaleModel {
            mean_design: mean_design.spec.clone(),
            mean_beta: mean_fit.beta_fit.beta.as_slice().to_vec(),
            mean_gamma: mean_fit.gamma,
            variance_design: var_design.map(|d| d.spec),
            variance_beta: var_beta,
            variance_gamma: var_gamma.unwrap_or_default(),
            kappa_constant: kappa[0],
        },
        kappa_hat: kappa,
        z,
        sweeps,
        converged,
    })
}

/// Sinh-arcsinh density of Jones and Pewsey: `z = mu + scale * x` with
/// `sinh(delta * asinh(x) - eps)` standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinhArcsinh {
    pub mu: f64,
    pub scale: f64,
    pub eps: f64,
    pub delta: f64,
    /// Set when the maximum-likelihood fit failed and a Gaussian was used.
    pub gaussian_fallback: bool,
}

fn std_normal() -> Normal {
    Normal::standard()
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl SinhArcsinh {
    pub fn new(mu: f64, scale: f64, eps: f64, delta: f64) -> Self {
        Self { mu, scale, eps, delta, gaussian_fallback: false }
    }

    fn t_of(&self, z: f64) -> (f64, f64) {
        let x = (z - self.mu) / self.scale;
        (x, (self.delta * x.asinh() - self.eps).sinh())
    }

    pub fn log_pdf(&self, z: f64) -> f64 {
        let (x, t) = self.t_of(z);
        self.delta.ln() - self.scale.ln() + 0.5 * (t * t).ln_1p() - 0.5 * (x * x).ln_1p() - 0.5 * t * t - LN_SQRT_2PI
    }

    pub fn pdf(&self, z: f64) -> f64 {
        self.log_pdf(z).exp()
    }

    /// Derivative of the density in `z`.
    pub fn dpdf(&self, z: f64) -> f64 {
        let (x, t) = self.t_of(z);
        let dt = self.delta * (1.0 + t * t).sqrt() / (1.0 + x * x).sqrt();
        let dlog = t / (1.0 + t * t) * dt - x / (1.0 + x * x) - t * dt;
        self.pdf(z) * dlog / self.scale
    }

    pub fn cdf(&self, z: f64) -> f64 {
        std_normal().cdf(self.t_of(z).1)
    }

    /// Closed-form inverse of [`SinhArcsinh::cdf`].
    pub fn quantile(&self, p: f64) -> f64 {
        let t = std_normal().inverse_cdf(p);
        self.mu + self.scale * ((t.asinh() + self.eps) / self.delta).sinh()
    }

    /// Supremum of the density, located by a scan refined with golden section.
    pub fn sup_pdf(&self) -> f64 {
        let (a, b) = (self.quantile(0.001), self.quantile(0.999));
        let grid = 400;
        let step = (b - a) / grid as f64;
        let best = (0..=grid).map(|i| a + step * i as f64).max_by(|u, v| self.pdf(*u).total_cmp(&self.pdf(*v))).unwrap();
        let m = crate::numeric::golden_section(|z| -self.pdf(z), best - step, best + step, 1e-10 * (1.0 + best.abs()));
        self.pdf(m).max(self.pdf(best))
    }

    /// Bias `|F(u) - tau|` of the population minimizer `u` of the expected
    /// ELF loss with standardized bandwidth `b`.
    pub fn smoothing_bias(&self, tau: f64, b: f64) -> f64 {
        let u = smoothed_quantile(tau, b, |p| self.quantile(p));
        (self.cdf(u) - tau).abs()
    }
}

/// Population minimizer `u` of `E rho_tilde(Z - u)` for bandwidth `b`, where
/// `Z` has quantile function `q`. Solves `E sigmoid((Z - u) / b) = 1 - tau`.
pub fn smoothed_quantile<Q: Fn(f64) -> f64>(tau: f64, b: f64, q: Q) -> f64 {
    let edge = 1e-12;
    let expect = |u: f64| integrate(|p| sigmoid((q(p) - u) / b), edge, 1.0 - edge, 1e-11) - (1.0 - tau);
    let lo = q(1e-6) - 60.0 * b;
    let hi = q(1.0 - 1e-6) + 60.0 * b;
    bisect(expect, lo, hi, 1e-12 * (1.0 + lo.abs().max(hi.abs()))).unwrap_or(f64::NAN)
}

/// Maximum-likelihood sinh-arcsinh fit by Nelder–Mead over
/// `(mu, log scale, eps, log delta)`, falling back to a Gaussian on failure.
pub fn fit_shash(z: &[f64]) -> Result<SinhArcsinh> {
    if z.len() < 50 {
        return Err(Error::InvalidArgument(format!("sinh-arcsinh fit needs at least 50 residuals, got {}", z.len())));
    }
    let (m, sd) = mean_sd(z);
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance("standardized residuals are constant".into()));
    }
    let nll = |p: &[f64]| -> f64 {
        if p[1].abs() > 50.0 || p[3].abs() > 5.0 || p[2].abs() > 50.0 {
            return f64::INFINITY;
        }
        let d = SinhArcsinh::new(p[0], p[1].exp(), p[2], p[3].exp());
        -z.iter().map(|&v| d.log_pdf(v)).sum::<f64>()
    };
    let start = [m, sd.ln(), 0.0, 0.0];
    let step = [0.2 * sd, 0.2, 0.2, 0.2];
    let first = nelder_mead(nll, &start, &step, 1e-12, 1e-8, 4000);
    let res = nelder_mead(nll, &first.x, &step, 1e-12, 1e-8, 4000);
    let gaussian = SinhArcsinh { mu: m, scale: sd, eps: 0.0, delta: 1.0, gaussian_fallback: true };
    if !res.value.is_finite() || !res.converged || res.value > nll(&[m, sd.ln(), 0.0, 0.0]) {
        return Ok(gaussian);
    }
    Ok(SinhArcsinh::new(res.x[0], res.x[1].exp(), res.x[2], res.x[3].exp()))
}

/// Asymptotically optimal bandwidth per row, with the multiplier of `kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalBandwidth {
    pub h_star: Vec<f64>,
    pub multiplier: f64,
    pub capped: bool,
}

/// `h*(x) = [(d/n) 9 f(q) / (pi^4 f'(q)^2)]^(1/3) kappa(x)` with `q = F^-1(tau)`.
pub fn optimal_bandwidth(tau: f64, n: usize, d: f64, shash: &SinhArcsinh, kappa: &[f64]) -> Result<OptimalBandwidth> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(d > 0.0 && (n as f64) > d) {
        return Err(Error::InvalidArgument(format!("need n > d > 0, got n={n}, d={d}")));
    }
    let q = shash.quantile(tau);
    let f = shash.pdf(q);
    let fp = shash.dpdf(q);
    let pi4 = std::f64::consts::PI.powi(4);
    let raw = (d / n as f64 * 9.0 * f / (pi4 * fp * fp)).cbrt();
    let capped = !(raw.is_finite() && raw <= BANDWIDTH_CAP);
    let multiplier = if capped { BANDWIDTH_CAP } else { raw };
    Ok(OptimalBandwidth { h_star: kappa.iter().map(|k| multiplier * k).collect(), multiplier, capped })
}

/// Split bandwidths into `lambda` and per-row scales for a baseline `sigma0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub lambda: f64,
    /// Relative scales with mean one.
    pub sigma_tilde: Vec<f64>,
    /// `sigma0 * sigma_tilde`, so that `lambda * sigma = h`.
    pub sigma: Vec<f64>,
}

pub fn decompose_bandwidth(h_star: &[f64], sigma0: f64) -> Result<Decomposition> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
    }
    if h_star.is_empty() || h_star.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidArgument("bandwidths must be positive".into()));
    }
    let mean_h = h_star.iter().sum::<f64>() / h_star.len() as f64;
    let lambda = mean_h / sigma0;
    Ok(Decomposition {
        lambda,
        sigma_tilde: h_star.iter().map(|h| h / mean_h).collect(),
        sigma: h_star.iter().map(|h| h / lambda).collect(),
    })
}

/// Bandwidth giving an asymptotic quantile-level bias of at most `eps` for a
/// Gaussian response with variance `kappa_var`: `eps sqrt(2 pi kappa) / (2 log 2)`.
pub fn err_to_bandwidth(eps: f64, kappa_var: &[f64]) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("err must be positive, got {eps}")));
    }
    let c = eps * (2.0 * std::f64::consts::PI).sqrt() / (2.0 * std::f64::consts::LN_2);
    Ok(kappa_var.iter().map(|k| c * k.sqrt()).collect())
}

/// `2 log 2 h sup f`, the asymptotic bound on `|F(mu*) - tau|`.
pub fn bias_bound(h: f64, sup_f: f64) -> f64 {
    2.0 * std::f64::consts::LN_2 * h * sup_f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthMode {
    Auto,
    ManualErr(f64),
}

/// Bandwidths for one quantile, independent of `sigma0`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthPlan {
    pub h_star: Vec<f64>,
    pub mode: BandwidthMode,
    /// `h / kappa` per row.
    pub standardized: Vec<f64>,
    pub capped: bool,
}

impl BandwidthPlan {
    pub fn new(tau: f64, prelim: &LocationScaleFit, shash: &SinhArcsinh, mode: BandwidthMode) -> Result<Self> {
        let kappa = &prelim.kappa_hat;
        let (h_star, capped) = match mode {
            BandwidthMode::Auto => {
                let ob = optimal_bandwidth(tau, kappa.len(), prelim.d_alpha, shash, kappa)?;
                (ob.h_star, ob.capped)
            }
            BandwidthMode::ManualErr(eps) => {
                let var: Vec<f64> = kappa.iter().map(|k| k * k).collect();
                (err_to_bandwidth(eps, &var)?, false)
            }
        };
        let standardized = h_star.iter().zip(kappa).map(|(h, k)| h / k).collect();
        Ok(Self { h_star, mode, standardized, capped })
    }

    pub fn decompose(&self, sigma0: f64) -> Result<Decomposition> {
        decompose_bandwidth(&self.h_star, sigma0)
    }

    pub fn mean_h(&self) -> f64 {
        self.h_star.iter().sum::<f64>() / self.h_star.len() as f64
    }
}
