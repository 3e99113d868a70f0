//! End-to-end quantile fits, prediction and diagnostics.
//!
//! [`fit_quantile`] runs the whole pipeline for one quantile level: the
//! location-scale fit, the sinh-arcsinh residual model, the loss bandwidth,
//! calibration of the learning rate and the final penalized fit.
//! [`fit_multi`] shares the preliminary stage across several levels.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::basis::{build_design, DesignSpec, FullDesign, Side, TermBasis};
use crate::calibrate::{calibrate_sigma0, CalibrationOptions, CalibrationTrace};
use crate::data::Dataset;
use crate::elf::{pinball, ElfLikelihood};
use crate::error::{Error, Result};
use crate::formula::ModelSpec;
use crate::laml::laml_hessian;
use crate::numeric::{matvec, psd_rank, row_quadratic_forms, sym_eigenvalues};
use crate::preliminary::{
    bias_bound, fit_location_scale, fit_shash, BandwidthMode, BandwidthPlan, LocationScaleFit, LocationScaleModel,
    SinhArcsinh,
};

const N_BINS: usize = 10;

/// Options shared by every quantile in a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Upper bound on the smoothing bias; the bandwidth is chosen automatically when absent.
    pub err: Option<f64>,
    pub calibration: CalibrationOptions,
}

/// Spread of the relative scale `sigma_tilde` over the training rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl Spread {
    fn of(v: &[f64]) -> Self {
        Self {
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSummary {
    pub mode: BandwidthMode,
    /// True when the automatic bandwidth hit its upper cap.
    pub capped: bool,
    /// Bandwidth in units of the residual scale, `h / kappa`.
    pub standardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub name: String,
    pub start: usize,
    pub end: usize,
    /// Basis dimension after constraints.
    pub k_prime: usize,
    pub edf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreliminarySummary {
    pub shash: SinhArcsinh,
    /// Effective degrees of freedom of the mean model.
    pub d_alpha: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub location_scale: LocationScaleModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub pirls_iterations: usize,
    pub pirls_grad_norm: f64,
    pub laml_converged: bool,
    pub outer_iterations: usize,
    /// Gradient of the LAML with respect to `log gamma` at the optimum.
    pub laml_gradient: Vec<f64>,
    /// Finite-difference Hessian of the LAML with respect to `log gamma`.
    #[serde(with = "crate::matrix_serde")]
    pub laml_hessian: DMatrix<f64>,
}

/// Everything needed to predict from and diagnose one quantile fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedQuantileModel {
    pub formula: String,
    pub spec: ModelSpec,
    pub tau: f64,
    pub sigma0: f64,
    pub lambda: f64,
    pub sigma_tilde: Spread,
    /// Loss bandwidth `lambda * sigma` on each training row.
    pub h_star: Vec<f64>,
    pub bandwidth: BandwidthSummary,
    pub design: DesignSpec,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Posterior covariance.
    #[serde(with = "crate::matrix_serde")]
    pub v: DMatrix<f64>,
    /// Sandwich covariance.
    #[serde(with = "crate::matrix_serde")]
    pub v_s: DMatrix<f64>,
    pub edf_total: f64,
    pub terms: Vec<TermSummary>,
    /// Total null-space dimension of the penalties.
    pub mp: usize,
    pub laml: f64,
    pub penalized_deviance: f64,
    pub ikl: f64,
    pub fitted: Vec<f64>,
    pub calibration: CalibrationTrace,
    pub preliminary: PreliminarySummary,
    pub convergence: Convergence,
}

impl FittedQuantileModel {
    /// True when every optimizer in the pipeline met its tolerance.
    pub fn converged(&self) -> bool {
        self.convergence.laml_converged && self.calibration.tolerance_achieved.is_some() && self.preliminary.converged
    }

    pub fn n_train(&self) -> usize {
        self.fitted.len()
    }
}

/// Prediction on new rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub fit: Vec<f64>,
    pub se: Option<Vec<f64>>,
    /// Rows where a smooth input was clamped to the training range.
    pub clamped: Vec<bool>,
}

/// Shared state of the `tau`-independent preliminary stage.
#[derive(Debug, Clone)]
pub struct Preliminary {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub design: FullDesign,
    pub y: Vec<f64>,
    pub location_scale: LocationScaleFit,
    pub shash: SinhArcsinh,
}

/// Location-scale fit and residual model for `spec` on `data`.
pub fn fit_preliminary(spec: &ModelSpec, data: &Dataset) -> Result<Preliminary> {
    let run = || -> Result<Preliminary> {
        let y = data.scalar(&spec.response)?.to_vec();
        let design = build_design(spec, data, Side::Quantile)?;
        let location_scale = fit_location_scale(spec, data)?;
        let shash = fit_shash(&location_scale.z)?;
        Ok(Preliminary { spec: spec.clone(), data: data.clone(), design, y, location_scale, shash })
    };
    run().map_err(|e| e.at_stage("preliminary"))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("quantile level {tau} is outside (0, 1)")))
    }
}

/// Fit the `tau` quantile of the response.
///
/// ```
/// use quantgam::{data::Dataset, formula::parse_formula, model::{fit_quantile, FitOptions}};
///
/// let y: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 / 200.0).collect();
/// let data = Dataset::new(200).with_scalar("y", y).unwrap();
/// let spec = parse_formula("y ~ 1").unwrap();
/// let model = fit_quantile(&spec, &data, 0.25, &FitOptions::default()).unwrap();
/// assert!((model.beta[0] - 0.25).abs() < 0.05);
/// ```
pub fn fit_quantile(spec: &ModelSpec, data: &Dataset, tau: f64, opts: &FitOptions) -> Result<FittedQuantileModel> {
    check_tau(tau)?;
    let pre = fit_preliminary(spec, data)?;
    fit_from_preliminary(&pre, tau, opts)
}

/// Fit several increasing quantile levels, sharing the preliminary stage.
/// Failures are reported per level.
pub fn fit_multi(
    spec: &ModelSpec,
    data: &Dataset,
    taus: &[f64],
    opts: &FitOptions,
) -> Result<Vec<Result<FittedQuantileModel>>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("no quantile levels given".into()));
    }
    for &t in taus {
        check_tau(t)?;
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("quantile levels must be strictly increasing".into()));
    }
    let pre = fit_preliminary(spec, data)?;
    Ok(taus.par_iter().map(|&t| fit_from_preliminary(&pre, t, opts)).collect())
}

/// The `tau`-specific part of the pipeline.
pub fn fit_from_preliminary(pre: &Preliminary, tau: f64, opts: &FitOptions) -> Result<FittedQuantileModel> {
    check_tau(tau)?;
    let mode = match opts.err {
        Some(e) => BandwidthMode::ManualErr(e),
        None => BandwidthMode::Auto,
    };
    let plan = BandwidthPlan::new(tau, &pre.location_scale, &pre.shash, mode).map_err(|e| e.at_stage("preliminary"))?;
    let (best, trace) = calibrate_sigma0(&pre.design, &plan, &pre.y, tau, &opts.calibration)
        .map_err(|e| e.at_stage("calibration"))?;
    assemble(pre, tau, plan, best, trace).map_err(|e| e.at_stage("final"))
}

fn assemble(
    pre: &Preliminary,
    tau: f64,
    plan: BandwidthPlan,
    best: crate::calibrate::CalibratedFit,
    trace: CalibrationTrace,
) -> Result<FittedQuantileModel> {
    let design = &pre.design;
    let fit = &best.laml.beta_fit;
    let lik = ElfLikelihood::new(pre.y.clone(), best.params.clone())?;
    let hessian = laml_hessian(design, &lik, &best.laml.gamma, &fit.beta)?;
    let widths: Vec<(String, std::ops::Range<usize>)> = design.term_ranges();
    let terms = widths
        .into_iter()
        .zip(&fit.edf_per_term)
        .map(|((name, r), &edf)| TermSummary { name, start: r.start, end: r.end, k_prime: r.len(), edf })
        .collect();
    let beta = fit.beta.as_slice().to_vec();
    // Same path as `predict`, so predictions on the training rows match bitwise.
    let (x, _) = design.spec.evaluate(&pre.data, true)?;
    let fitted = matvec(&x, &fit.beta).as_slice().to_vec();
    let ls = &pre.location_scale;
    Ok(FittedQuantileModel {
        formula: pre.spec.render(),
        spec: pre.spec.clone(),
        tau,
        sigma0: best.sigma0,
        lambda: best.decomposition.lambda,
        sigma_tilde: Spread::of(&best.decomposition.sigma_tilde),
        bandwidth: BandwidthSummary { mode: plan.mode, capped: plan.capped, standardized: plan.standardized[0] },
        h_star: plan.h_star,
        design: design.spec.clone(),
        beta,
        gamma: best.laml.gamma.clone(),
        v: fit.v.clone(),
        v_s: best.sandwich.v_s.clone(),
        edf_total: fit.edf_total,
        terms,
        mp: design.mp,
        laml: best.laml.laml,
        penalized_deviance: fit.penalized_deviance,
        ikl: best.ikl,
        fitted,
        calibration: trace,
        preliminary: PreliminarySummary {
            shash: pre.shash,
            d_alpha: ls.d_alpha,
            sweeps: ls.sweeps,
            converged: ls.converged,
            location_scale: ls.model.clone(),
        },
        convergence: Convergence {
            pirls_iterations: fit.iterations,
            pirls_grad_norm: fit.grad_norm,
            laml_converged: best.laml.converged,
            outer_iterations: best.laml.outer_iterations,
            laml_gradient: best.laml.grad_at_opt.clone(),
            laml_hessian: hessian,
        },
    })
}

/// Predict the fitted quantile on `data`, optionally with standard errors
/// from the posterior (`use_sandwich = false`) or sandwich covariance.
pub fn predict(model: &FittedQuantileModel, data: &Dataset, want_se: bool, use_sandwich: bool) -> Result<Prediction> {
    let (x, clamped) = model.design.evaluate(data, true)?;
    let fit = matvec(&x, &DVector::from_column_slice(&model.beta)).as_slice().to_vec();
    let se = want_se.then(|| {
        let cov = if use_sandwich { &model.v_s } else { &model.v };
        row_quadratic_forms(&x, cov).into_iter().map(|q| q.max(0.0).sqrt()).collect()
    });
    Ok(Prediction { fit, se, clamped })
}

/// Observed proportion of negative residuals among rows with similar fitted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBin {
    /// Range of fitted values in the bin.
    pub fit_lo: f64,
    pub fit_hi: f64,
    pub count: usize,
    pub negatives: usize,
    pub proportion: f64,
    /// Central 95% range of the proportion under a Binomial(count, tau) law.
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LamlDiagnostics {
    pub gradient_min: Option<f64>,
    pub gradient_max: Option<f64>,
    /// True when the negative LAML Hessian in `log gamma` is positive definite.
    pub hessian_pd: bool,
    pub model_rank: usize,
    pub n_coefficients: usize,
}

/// Diagnostics of a fitted quantile on a data set, usually the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub n: usize,
    pub theor_prop_neg: f64,
    pub actual_prop_neg: f64,
    /// Quantile-level bias `|F(mu*) - tau|` caused by loss smoothing under the
    /// estimated residual density.
    pub integrated_abs_bias: f64,
    /// Upper bound `2 log 2 * b * sup f` on the smoothing bias.
    pub bias_bound: f64,
    /// Mean over rows of `|F(mu_hat) - tau|` under the preliminary model.
    pub fit_abs_deviation: f64,
    pub err: Option<f64>,
    pub binned: Vec<ResidualBin>,
    /// Histogram of the per-row `|F(mu_hat) - tau|`.
    pub bias_histogram: Vec<HistogramBin>,
    pub edf_vs_kprime: Vec<TermSummary>,
    pub laml: LamlDiagnostics,
    pub calibration_boundary: bool,
    pub calibration_discontinuity: bool,
}

fn binomial_quantile(dist: &Binomial, n: u64, p: f64) -> u64 {
    (0..=n).find(|&k| dist.cdf(k) >= p).unwrap_or(n)
}

fn residual_bins(y: &[f64], fit: &[f64], tau: f64) -> Result<Vec<ResidualBin>> {
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
    let mut bins = Vec::with_capacity(N_BINS);
    for b in 0..N_BINS {
        let rows = &order[b * n / N_BINS..(b + 1) * n / N_BINS];
        if rows.is_empty() {
            continue;
        }
        let count = rows.len();
        let negatives = rows.iter().filter(|&&i| y[i] < fit[i]).count();
        let dist = Binomial::new(tau, count as u64).map_err(|e| Error::Numerical(e.to_string()))?;
        let c = count as f64;
        bins.push(ResidualBin {
            fit_lo: fit[rows[0]],
            fit_hi: fit[rows[count - 1]],
            count,
            negatives,
            proportion: negatives as f64 / c,
            lo: binomial_quantile(&dist, count as u64, 0.025) as f64 / c,
            hi: binomial_quantile(&dist, count as u64, 0.975) as f64 / c,
        });
    }
    Ok(bins)
}

fn histogram(v: &[f64], n_bins: usize) -> Vec<HistogramBin> {
    let hi = v.iter().copied().fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / n_bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; n_bins];
    for &x in v {
        counts[((x / width) as usize).min(n_bins - 1)] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin { lo: b as f64 * width, hi: (b + 1) as f64 * width, count })
        .collect()
}

/// Diagnose `model` on `data`, which must hold the response.
pub fn check(model: &FittedQuantileModel, data: &Dataset) -> Result<CheckReport> {
    let y = data.scalar(&model.spec.response)?;
    let fit = predict(model, data, false, false)?.fit;
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("no rows to check".into()));
    }
    let tau = model.tau;
    let negatives = (0..n).filter(|&i| y[i] < fit[i]).count();
    let shash = &model.preliminary.shash;
    let ls = &model.preliminary.location_scale;
    let alpha = ls.predict_alpha(data)?;
    let kappa = ls.predict_kappa(data)?;
    let deviation: Vec<f64> = (0..n).map(|i| (shash.cdf((fit[i] - alpha[i]) / kappa[i]) - tau).abs()).collect();
    let b = model.bandwidth.standardized;
    let grad = &model.convergence.laml_gradient;
    let neg_hessian = -&model.convergence.laml_hessian;
    Ok(CheckReport {
        n,
        theor_prop_neg: tau,
        actual_prop_neg: negatives as f64 / n as f64,
        integrated_abs_bias: shash.smoothing_bias(tau, b),
        bias_bound: bias_bound(b, shash.sup_pdf()),
        fit_abs_deviation: deviation.iter().sum::<f64>() / n as f64,
        err: match model.bandwidth.mode {
            BandwidthMode::ManualErr(e) => Some(e),
            BandwidthMode::Auto => None,
        },
        binned: residual_bins(y, &fit, tau)?,
        bias_histogram: histogram(&deviation, 20),
        edf_vs_kprime: model.terms.clone(),
        laml: LamlDiagnostics {
            gradient_min: grad.iter().copied().reduce(f64::min),
            gradient_max: grad.iter().copied().reduce(f64::max),
            hessian_pd: sym_eigenvalues(&neg_hessian).last().is_none_or(|&e| e > 0.0),
            model_rank: psd_rank(&model.v),
            n_coefficients: model.beta.len(),
        },
        calibration_boundary: model.calibration.boundary,
        calibration_discontinuity: model.calibration.discontinuity,
    })
}

/// Total pinball loss `sum_i rho_tau(y_i - pred_i)` for each quantile level.
///
/// ```
/// let total = quantgam::model::pinball_score(&[1.0, 2.0], &[vec![0.0, 3.0]], &[0.9]).unwrap();
/// assert!((total[0] - 1.0).abs() < 1e-12);
/// ```
pub fn pinball_score(y: &[f64], preds: &[Vec<f64>], taus: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != taus.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction columns for {} quantile levels",
            preds.len(),
            taus.len()
        )));
    }
    preds
        .iter()
        .zip(taus)
        .map(|(p, &tau)| {
            check_tau(tau)?;
            if p.len() != y.len() {
                return Err(Error::InvalidArgument(format!("{} predictions for {} responses", p.len(), y.len())));
            }
            Ok(y.iter().zip(p).map(|(yi, pi)| pinball(yi - pi, tau, 1.0)).sum())
        })
        .collect()
}

/// Smallest gap between consecutive fitted quantiles over a grid of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    /// Negative when two quantiles cross.
    pub min_gap: f64,
    pub row: usize,
    /// Index `k` of the pair `(k, k + 1)` attaining the minimum.
    pub pair: usize,
}

pub fn crossing_report(models: &[FittedQuantileModel], grid: &Dataset) -> Result<CrossingReport> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("crossing needs at least two models".into()));
    }
    if models.iter().any(|m| m.formula != models[0].formula) {
        return Err(Error::InvalidArgument("models were fitted with different formulas".into()));
    }
    let fits = models.iter().map(|m| Ok(predict(m, grid, false, false)?.fit)).collect::<Result<Vec<_>>>()?;
    let mut best = CrossingReport { min_gap: f64::INFINITY, row: 0, pair: 0 };
    for (k, w) in fits.windows(2).enumerate() {
        for (i, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
            if b - a < best.min_gap {
                best = CrossingReport { min_gap: b - a, row: i, pair: k };
            }
        }
    }
    if !best.min_gap.is_finite() {
        return Err(Error::Data("empty prediction grid".into()));
    }
    Ok(best)
}

/// A smooth term's contribution on a grid of its covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEffect {
    pub term: String,
    pub x: Vec<f64>,
    pub effect: Vec<f64>,
    pub se: Vec<f64>,
}

/// Effect of smooth `term` (its name, e.g. `s(x)`, or its covariate) on `n`
/// evenly spaced points spanning the training range.
pub fn term_effect(model: &FittedQuantileModel, term: &str, n: usize) -> Result<TermEffect> {
    if n < 2 {
        return Err(Error::InvalidArgument("an effect grid needs at least two points".into()));
    }
    let (_, spline, _) = find_smooth(model, term)?;
    let x: Vec<f64> = (0..n).map(|i| spline.lo + (spline.hi - spline.lo) * i as f64 / (n - 1) as f64).collect();
    term_effect_at(model, term, &x)
}

/// Effect of smooth `term` at the covariate values `x`, clamped to the training range.
pub fn term_effect_at(model: &FittedQuantileModel, term: &str, x: &[f64]) -> Result<TermEffect> {
    let (idx, spline, constraint) = find_smooth(model, term)?;
    let (raw, _) = spline.evaluate(x);
    let basis = match constraint {
        Some(z) => raw * z,
        None => raw,
    };
    let (name, cols) = model.design.column_ranges().swap_remove(idx + usize::from(model.design.intercept));
    let beta = DVector::from_iterator(cols.len(), model.beta[cols.clone()].iter().copied());
    let v = model.v.view((cols.start, cols.start), (cols.len(), cols.len())).into_owned();
    let effect = matvec(&basis, &beta).as_slice().to_vec();
    let se = row_quadratic_forms(&basis, &v).into_iter().map(|q| q.max(0.0).sqrt()).collect();
    Ok(TermEffect { term: name, x: x.to_vec(), effect, se })
}

fn find_smooth<'a>(
    model: &'a FittedQuantileModel,
    term: &str,
) -> Result<(usize, &'a crate::basis::SplineSpec, Option<&'a DMatrix<f64>>)> {
    let design = &model.design;
    let idx = design
        .names
        .iter()
        .zip(&design.terms)
        .position(|(name, t)| name == term || term_variable(t) == term)
        .ok_or_else(|| Error::InvalidArgument(format!("no term `{term}` in the model")))?;
    match &design.terms[idx] {
        TermBasis::Smooth { spline, constraint, .. } => Ok((idx, spline, constraint.as_ref())),
        _ => Err(Error::InvalidArgument(format!("`{term}` is not a smooth term"))),
    }
}

fn term_variable(t: &TermBasis) -> &str {
    match t {
        TermBasis::Linear { variable } | TermBasis::Factor { variable, .. } | TermBasis::Smooth { variable, .. } => {
            variable
        }
    }
}
