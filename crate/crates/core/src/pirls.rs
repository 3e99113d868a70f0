//! Penalized iteratively re-weighted least squares.
//!
//! For fixed smoothing parameters `gamma`, [`fit_beta`] minimizes the
//! penalized deviance `sum_i Dev_i + beta' S beta` by Newton steps with
//! step halving. The same routine fits any [`Likelihood`] whose
//! log-density is concave in the linear predictor.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::basis::FullDesign;
use crate::error::{Error, Result};
use crate::numeric::{chol_logdet, cholesky_with_ridge, matvec, symmetrize, weighted_crossprod};

/// Per-observation log-density in the linear predictor `eta`.
pub trait Likelihood: Sync {
    fn n(&self) -> usize;
    fn log_lik(&self, i: usize, eta: f64) -> f64;
    /// First and second derivatives of `log_lik` in `eta`; the second must be negative.
    fn derivs(&self, i: usize, eta: f64) -> (f64, f64);
    /// Maximum of `log_lik(i, .)`.
    fn saturated(&self, i: usize) -> f64;
    /// Response on the linear-predictor scale, used for the least-squares warm start.
    fn working_response(&self) -> Vec<f64>;
}

/// Gaussian log-density with known per-observation precision `w_i`.
#[derive(Debug, Clone)]
pub struct GaussianLikelihood {
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Likelihood for GaussianLikelihood {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, i: usize, eta: f64) -> f64 {
        let w = self.weights[i];
        let r = self.y[i] - eta;
        -0.5 * w * r * r + 0.5 * (w / (2.0 * std::f64::consts::PI)).ln()
    }

    fn derivs(&self, i: usize, eta: f64) -> (f64, f64) {
        let w = self.weights[i];
        (w * (self.y[i] - eta), -w)
    }

    fn saturated(&self, i: usize) -> f64 {
        0.5 * (self.weights[i] / (2.0 * std::f64::consts::PI)).ln()
    }

    fn working_response(&self) -> Vec<f64> {
        self.y.clone()
    }
}

/// Gamma log-density with fixed shape and log link on the mean. With shape
/// 1/2 this models squared Gaussian residuals `r^2` with mean `exp(eta)`.
#[derive(Debug, Clone)]
pub struct GammaLikelihood {
    pub y: Vec<f64>,
    pub shape: f64,
}

impl GammaLikelihood {
    /// Squared residuals with a small floor so exact zeros stay in the support.
    pub fn squared_residuals(r: &[f64], shape: f64) -> Self {
        let mean = r.iter().map(|v| v * v).sum::<f64>() / r.len().max(1) as f64;
        let floor = (1e-10 * mean).max(f64::MIN_POSITIVE);
        Self { y: r.iter().map(|v| (v * v).max(floor)).collect(), shape }
    }
}

impl Likelihood for GammaLikelihood {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, i: usize, eta: f64) -> f64 {
        let a = self.shape;
        let y = self.y[i];
        a * (a.ln() - eta) + (a - 1.0) * y.ln() - a * y * (-eta).exp() - ln_gamma(a)
    }

    fn derivs(&self, i: usize, eta: f64) -> (f64, f64) {
        let a = self.shape;
        let t = a * self.y[i] * (-eta).exp();
        (t - a, -t.max(f64::MIN_POSITIVE))
    }

    fn saturated(&self, i: usize) -> f64 {
        self.log_lik(i, self.y[i].ln())
    }

    fn working_response(&self) -> Vec<f64> {
        self.y.iter().map(|v| v.ln()).collect()
    }
}

/// Predicted decreases within this many ulps of the objective count as stationary.
const STATIONARY_ULPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PirlsOptions {
    pub max_iter: usize,
    /// Gradient max-norm tolerance relative to `1 + |criterion|`.
    pub grad_tol: f64,
    /// Relative criterion change tolerance.
    pub rel_tol: f64,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-7, rel_tol: 1e-9 }
    }
}

/// Converged inner fit.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub beta: DVector<f64>,
    pub eta: DVector<f64>,
    /// `sum_i Dev_i + beta' S beta` at the optimum.
    pub penalized_deviance: f64,
    pub log_lik: f64,
    pub saturated_log_lik: f64,
    /// `beta' S beta`.
    pub penalty: f64,
    /// Loss curvature `X' W X`, `W = -d2`.
    pub neg_hessian: DMatrix<f64>,
    /// Posterior covariance `(X' W X + S)^-1`.
    pub v: DMatrix<f64>,
    /// `log |X' W X + S|`.
    pub log_det_hessian: f64,
    pub edf_total: f64,
    /// Effective degrees of freedom per entry of [`FullDesign::term_ranges`].
    pub edf_per_term: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Penalized deviance after each accepted step, starting value first.
    pub history: Vec<f64>,
    /// Diagonal ridge added to factor the final Hessian, zero when none was needed.
    pub ridge: f64,
}

struct State {
    eta: DVector<f64>,
    ll: f64,
    pen: f64,
}

impl State {
    fn objective(&self) -> f64 {
        -self.ll + 0.5 * self.pen
    }
}

fn evaluate<L: Likelihood>(x: &DMatrix<f64>, s: &DMatrix<f64>, lik: &L, beta: &DVector<f64>) -> State {
    let eta = matvec(x, beta);
    let ll = (0..lik.n()).map(|i| lik.log_lik(i, eta[i])).sum();
    let pen = beta.dot(&(s * beta));
    State { eta, ll, pen }
}

/// Penalized deviance `2 (ll_sat - ll) + beta' S beta` and its gradient in `beta`.
pub fn penalized_deviance<L: Likelihood>(
    design: &FullDesign,
    gamma: &[f64],
    lik: &L,
    beta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    if beta.len() != design.d() || lik.n() != design.n() {
        return Err(Error::InvalidArgument("coefficients, design and likelihood disagree in size".into()));
    }
    let s = design.total_penalty(gamma);
    let st = evaluate(&design.x, &s, lik, beta);
    let sat: f64 = (0..lik.n()).map(|i| lik.saturated(i)).sum();
    let d1 = DVector::from_fn(lik.n(), |i, _| lik.derivs(i, st.eta[i]).0);
    let grad = 2.0 * (&s * beta - design.x.transpose() * d1);
    Ok((2.0 * (sat - st.ll) + st.pen, grad))
}

/// Penalized least-squares start `(X'X + S)^-1 X' z`.
pub fn warm_start(x: &DMatrix<f64>, s: &DMatrix<f64>, z: &[f64]) -> Result<DVector<f64>> {
    let mut a = x.transpose() * x + s;
    symmetrize(&mut a);
    let (chol, _) = cholesky_with_ridge(&a).ok_or_else(|| Error::Singular("least-squares warm start".into()))?;
    Ok(chol.solve(&(x.transpose() * DVector::from_column_slice(z))))
}

/// Minimize the penalized deviance for fixed `gamma`.
pub fn fit_beta<L: Likelihood>(
    design: &FullDesign,
    gamma: &[f64],
    lik: &L,
    beta0: Option<&DVector<f64>>,
) -> Result<BetaFit> {
    fit_beta_with(design, gamma, lik, beta0, PirlsOptions::default())
}

pub fn fit_beta_with<L: Likelihood>(
    design: &FullDesign,
    gamma: &[f64],
    lik: &L,
    beta0: Option<&DVector<f64>>,
    opts: PirlsOptions,
) -> Result<BetaFit> {
    let x = &design.x;
    let (n, d) = x.shape();
    if lik.n() != n {
        return Err(Error::InvalidArgument(format!("design has {n} rows, likelihood has {}", lik.n())));
    }
    if gamma.len() != design.n_penalties() {
        return Err(Error::InvalidArgument(format!(
            "expected {} smoothing parameters, got {}",
            design.n_penalties(),
            gamma.len()
        )));
    }
    if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::InvalidArgument(format!("smoothing parameters must be positive, got {g}")));
    }
    let s = design.total_penalty(gamma);
    let mut beta = match beta0 {
        Some(b) if b.len() == d => b.clone(),
        Some(b) => return Err(Error::InvalidArgument(format!("start has length {}, expected {d}", b.len()))),
        None => warm_start(x, &s, &lik.working_response())?,
    };
    let mut state = evaluate(x, &s, lik, &beta);
    if !state.objective().is_finite() {
        beta = warm_start(x, &s, &lik.working_response())?;
        state = evaluate(x, &s, lik, &beta);
    }
    let ll_sat: f64 = (0..n).map(|i| lik.saturated(i)).sum();
    let criterion = |st: &State| 2.0 * (ll_sat - st.ll) + st.pen;

    let mut iterations = 0;
    let mut grad_norm;
    let mut last_change = f64::INFINITY;
    let mut history = vec![criterion(&state)];
    loop {
        let (d1, w): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| {
                let (a, b) = lik.derivs(i, state.eta[i]);
                (a, -b)
            })
            .unzip();
        // Gradient of the objective `-ll + beta' S beta / 2`.
        let grad = &s * &beta - x.transpose() * DVector::from_vec(d1);
        let dev = criterion(&state);
        grad_norm = 2.0 * grad.amax();
        let scale = 1.0 + dev.abs();
        let grad_ok = grad_norm < opts.grad_tol * scale;
        if grad_ok && last_change < opts.rel_tol * scale {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations, grad_norm });
        }
        iterations += 1;
        let mut h = weighted_crossprod(x, &w) + &s;
        symmetrize(&mut h);
        let (chol, _) = cholesky_with_ridge(&h).ok_or_else(|| Error::Singular("penalized working system".into()))?;
        let step = chol.solve(&(-&grad));
        // Stationary to working precision: the predicted decrease is below the
        // objective's resolution, so no representable step can improve it.
        let decrement = -grad.dot(&step);
        if last_change < opts.rel_tol * scale && decrement <= STATIONARY_ULPS * f64::EPSILON * (1.0 + state.objective().abs()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let st = evaluate(x, &s, lik, &cand);
            let obj = st.objective();
            if obj.is_finite() && obj <= state.objective() {
                accepted = Some((cand, st));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, st)) => {
                last_change = (criterion(&st) - dev).abs();
                history.push(criterion(&st));
                beta = b;
                state = st;
            }
            None => {
                // No decrease along the Newton direction: only round-off remains.
                if grad_norm < 1e2 * opts.grad_tol * scale {
                    break;
                }
                return Err(Error::NoConvergence { iterations, grad_norm });
            }
        }
    }

    let w: Vec<f64> = (0..n).map(|i| -lik.derivs(i, state.eta[i]).1).collect();
    let info = weighted_crossprod(x, &w);
    let mut h = &info + &s;
    symmetrize(&mut h);
    let (chol, ridge) = cholesky_with_ridge(&h).ok_or_else(|| Error::Singular("penalized Hessian".into()))?;
    let mut v = chol.inverse();
    symmetrize(&mut v);
    let vi = &v * &info;
    let edf_total = vi.trace();
    let edf_per_term =
        design.term_ranges().into_iter().map(|(_, r)| r.map(|j| vi[(j, j)]).sum::<f64>()).collect();
    Ok(BetaFit {
        penalized_deviance: criterion(&state),
        log_lik: state.ll,
        saturated_log_lik: ll_sat,
        penalty: state.pen,
        eta: state.eta,
        beta,
        neg_hessian: info,
        v,
        log_det_hessian: chol_logdet(&chol),
        edf_total,
        edf_per_term,
        iterations,
        grad_norm,
        history,
        ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_design, Side};
    use crate::data::Dataset;
    use crate::elf::{ElfLikelihood, ElfParams};
    use crate::formula::parse_formula;
    use crate::numeric::nelder_mead;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn intercept_only_recovers_empirical_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let design = FullDesign::from_blocks(DMatrix::from_element(n, 1, 1.0), vec![]).unwrap();
        let lik = ElfLikelihood::new(y.clone(), ElfParams::constant(0.9, 0.01, 1.0, n).unwrap()).unwrap();
        let fit = fit_beta(&design, &[], &lik, None).unwrap();
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        let q = sorted[(0.9 * n as f64) as usize];
        assert!((fit.beta[0] - q).abs() < 0.05, "{} vs {q}", fit.beta[0]);
    }

    fn toy(seed: u64) -> (FullDesign, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let x = DMatrix::from_fn(n, 4, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let y: Vec<f64> = (0..n).map(|i| x[(i, 1)] - 0.5 * x[(i, 2)] + normal(&mut rng)).collect();
        let s = DMatrix::from_fn(3, 3, |i, j| if i == j { 2.0 } else { -0.5 });
        (FullDesign::from_blocks(x, vec![(1, s)]).unwrap(), y)
    }

    #[test]
    fn matches_derivative_free_minimizer() {
        let (design, y) = toy(3);
        let n = y.len();
        let params = ElfParams::constant(0.7, 0.3, 0.8, n).unwrap();
        let lik = ElfLikelihood::new(y.clone(), params.clone()).unwrap();
        let gamma = [1.7];
        let fit = fit_beta(&design, &gamma, &lik, None).unwrap();
        // Criterion written directly from the log-density.
        let s = design.total_penalty(&gamma);
        let crit = |b: &[f64]| {
            let beta = DVector::from_column_slice(b);
            let eta = &design.x * &beta;
            let ll: f64 = (0..n).map(|i| params.at(i).logpdf(y[i], eta[i])).sum();
            -2.0 * ll + beta.dot(&(&s * &beta))
        };
        let nm = nelder_mead(crit, &[0.0; 4], &[0.5; 4], 1e-14, 1e-10, 40_000);
        for j in 0..4 {
            assert!((fit.beta[j] - nm.x[j]).abs() < 1e-4, "coef {j}: {} vs {}", fit.beta[j], nm.x[j]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (design, y) = toy(5);
        let n = y.len();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.3, 0.5, 1.2, n).unwrap()).unwrap();
        let gamma = [0.4];
        let s = design.total_penalty(&gamma);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let beta = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let st = evaluate(&design.x, &s, &lik, &beta);
            let d1: Vec<f64> = (0..n).map(|i| lik.derivs(i, st.eta[i]).0).collect();
            let grad = &s * &beta - design.x.transpose() * DVector::from_vec(d1);
            for j in 0..4 {
                let h = 1e-5;
                let mut bp = beta.clone();
                bp[j] += h;
                let mut bm = beta.clone();
                bm[j] -= h;
                let fd = (evaluate(&design.x, &s, &lik, &bp).objective()
                    - evaluate(&design.x, &s, &lik, &bm).objective())
                    / (2.0 * h);
                assert!((grad[j] - fd).abs() <= 1e-5 * grad[j].abs().max(1e-2), "{} vs {fd}", grad[j]);
            }
        }
    }

    #[test]
    fn public_criterion_matches_fit() {
        let (design, y) = toy(6);
        let n = y.len();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.6, 0.4, 1.1, n).unwrap()).unwrap();
        let fit = fit_beta(&design, &[0.9], &lik, None).unwrap();
        let (vd, grad) = penalized_deviance(&design, &[0.9], &lik, &fit.beta).unwrap();
        assert!((vd - fit.penalized_deviance).abs() <= 1e-10 * vd.abs());
        assert!(grad.amax() <= 2e-7 * (1.0 + vd.abs()));
        let beta = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let (_, grad) = penalized_deviance(&design, &[0.9], &lik, &beta).unwrap();
        for j in 0..4 {
            let h = 1e-5;
            let at = |t: f64| {
                let mut b = beta.clone();
                b[j] += t;
                penalized_deviance(&design, &[0.9], &lik, &b).unwrap().0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((grad[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn converged_fit_meets_tolerance_and_edf_bounds() {
        let (design, y) = toy(4);
        let n = y.len();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.5, 0.2, 1.0, n).unwrap()).unwrap();
        let fit = fit_beta(&design, &[3.0], &lik, None).unwrap();
        assert!(fit.grad_norm < 1e-7 * (1.0 + fit.penalized_deviance.abs()));
        assert!(fit.edf_total > 0.0 && fit.edf_total < 4.0);
        assert!((fit.edf_per_term.iter().sum::<f64>() + (fit.v.clone() * &fit.neg_hessian)[(0, 0)] - fit.edf_total).abs() < 1e-10);
        assert_eq!(fit.ridge, 0.0);
    }

    fn sine_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin() + 0.3 * normal(&mut rng)).collect();
        Dataset::new(n).with_scalar("x", x).unwrap().with_scalar("y", y).unwrap()
    }

    #[test]
    fn huge_penalty_gives_straight_line() {
        let data = sine_data(300, 2);
        let spec = parse_formula("y ~ s(x, k=12)").unwrap();
        let design = build_design(&spec, &data, Side::Quantile).unwrap();
        let y = data.scalar("y").unwrap().to_vec();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.5, 0.1, 1.0, 300).unwrap()).unwrap();
        let fit = fit_beta(&design, &[1e8], &lik, None).unwrap();
        let x = data.scalar("x").unwrap();
        // Second differences of a linear function on an even grid vanish.
        let f = &fit.eta;
        let max2 = (1..299).map(|i| (f[i + 1] - 2.0 * f[i] + f[i - 1]).abs()).fold(0.0, f64::max);
        let slope = (f[299] - f[0]) / (x[299] - x[0]);
        assert!(max2 < 1e-5 * slope.abs().max(1.0), "{max2}");
        assert!(fit.edf_total < 2.01);
    }

    #[test]
    fn edf_decreases_along_gamma_ladder() {
        let data = sine_data(200, 3);
        let spec = parse_formula("y ~ s(x, k=15)").unwrap();
        let design = build_design(&spec, &data, Side::Quantile).unwrap();
        let y = data.scalar("y").unwrap().to_vec();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.8, 0.1, 0.3, 200).unwrap()).unwrap();
        let mut last = f64::INFINITY;
        for e in -4..=8 {
            let fit = fit_beta(&design, &[10f64.powi(e)], &lik, None).unwrap();
            assert!(fit.edf_total < last, "gamma 1e{e}: {} >= {last}", fit.edf_total);
            last = fit.edf_total;
        }
    }

    #[test]
    fn criterion_decreases_monotonically() {
        let (design, y) = toy(8);
        let n = y.len();
        let lik = ElfLikelihood::new(y, ElfParams::constant(0.2, 0.05, 0.5, n).unwrap()).unwrap();
        let start = DVector::from_element(4, 3.0);
        let fit = fit_beta(&design, &[0.1], &lik, Some(&start)).unwrap();
        assert!(fit.history.len() > 3);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gaussian_family_is_penalized_least_squares() {
        let (design, y) = toy(6);
        let n = y.len();
        let lik = GaussianLikelihood { y: y.clone(), weights: vec![1.0; n] };
        let fit = fit_beta(&design, &[2.0], &lik, None).unwrap();
        let direct = warm_start(&design.x, &design.total_penalty(&[2.0]), &y).unwrap();
        assert!((fit.beta - direct).amax() < 1e-9);
    }

    #[test]
    fn gamma_family_recovers_log_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let r: Vec<f64> = (0..n).map(|_| 2.0 * normal(&mut rng)).collect();
        let lik = GammaLikelihood::squared_residuals(&r, 0.5);
        let design = FullDesign::from_blocks(DMatrix::from_element(n, 1, 1.0), vec![]).unwrap();
        let fit = fit_beta(&design, &[], &lik, None).unwrap();
        let mean_sq = r.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((fit.beta[0] - mean_sq.ln()).abs() < 1e-6);
        // Gamma derivatives against finite differences.
        for &eta in &[-1.0, 0.5, 2.0] {
            let (d1, d2) = lik.derivs(3, eta);
            let h = 1e-5;
            let fd1 = (lik.log_lik(3, eta + h) - lik.log_lik(3, eta - h)) / (2.0 * h);
            let fd2 = (lik.derivs(3, eta + h).0 - lik.derivs(3, eta - h).0) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-6 * d1.abs().max(1.0));
            assert!((d2 - fd2).abs() < 1e-5 * d2.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_gamma() {
        let (design, y) = toy(1);
        let lik = GaussianLikelihood { y, weights: vec![1.0; 200] };
        assert!(fit_beta(&design, &[0.0], &lik, None).is_err());
        assert!(fit_beta(&design, &[], &lik, None).is_err());
    }
}
