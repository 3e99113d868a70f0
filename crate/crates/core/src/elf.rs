//! The extended log-F (ELF) loss and density.
//!
//! The ELF loss is a smoothed pinball loss,
//! `(tau - 1) z / sigma + lambda * log(1 + exp(z / (lambda sigma)))`,
//! which tends to the pinball loss as `lambda -> 0`. Normalizing
//! `exp(-loss)` gives the ELF density used as a pseudo-likelihood; `1/sigma`
//! acts as a learning rate and `h = lambda * sigma` is the loss bandwidth.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, sigmoid_var, softplus};
use crate::pirls::Likelihood;

/// Scaled pinball (check) loss.
#[inline]
pub fn pinball(z: f64, tau: f64, sigma: f64) -> f64 {
    let u = z / sigma;
    if z < 0.0 {
        (tau - 1.0) * u
    } else {
        tau * u
    }
}

/// Loss parameters at a single observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Elf {
    pub tau: f64,
    pub lambda: f64,
    pub sigma: f64,
}

impl Elf {
    pub fn new(tau: f64, lambda: f64, sigma: f64) -> Result<Self> {
        validate(tau, lambda)?;
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { tau, lambda, sigma })
    }

    pub fn bandwidth(&self) -> f64 {
        self.lambda * self.sigma
    }

    /// Smoothed pinball loss at residual `z`.
    pub fn loss(&self, z: f64) -> f64 {
        (self.tau - 1.0) * z / self.sigma + self.lambda * softplus(z / self.bandwidth())
    }

    /// `log(lambda sigma Beta(lambda(1-tau), lambda tau))`.
    pub fn log_normalizer(&self) -> f64 {
        let a = self.lambda * (1.0 - self.tau);
        let b = self.lambda * self.tau;
        self.bandwidth().ln() + ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
    }

    pub fn logpdf(&self, y: f64, mu: f64) -> f64 {
        let z = y - mu;
        (1.0 - self.tau) * z / self.sigma - self.lambda * softplus(z / self.bandwidth()) - self.log_normalizer()
    }

    /// First and second derivatives of the log-density in `mu`.
    pub fn derivs(&self, y: f64, mu: f64) -> (f64, f64) {
        let u = (y - mu) / self.bandwidth();
        let s = sigmoid(u);
        let d1 = (s - (1.0 - self.tau)) / self.sigma;
        // Floored so the curvature stays strictly negative far in the tails.
        let w = sigmoid_var(u).max(f64::MIN_POSITIVE);
        let d2 = -w / (self.bandwidth() * self.sigma);
        (d1, d2)
    }

    /// The `mu` maximizing the log-density for a given `y`.
    pub fn saturated_mu(&self, y: f64) -> f64 {
        y - self.bandwidth() * ((1.0 - self.tau) / self.tau).ln()
    }

    pub fn saturated_logpdf(&self, y: f64) -> f64 {
        self.logpdf(y, self.saturated_mu(y))
    }
}

fn validate(tau: f64, lambda: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Loss family state for a whole dataset: per-observation scales `sigma_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElfParams {
    pub tau: f64,
    pub lambda: f64,
    pub sigma: Vec<f64>,
}

impl ElfParams {
    pub fn new(tau: f64, lambda: f64, sigma: Vec<f64>) -> Result<Self> {
        validate(tau, lambda)?;
        if let Some(bad) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {bad}")));
        }
        Ok(Self { tau, lambda, sigma })
    }

    pub fn constant(tau: f64, lambda: f64, sigma: f64, n: usize) -> Result<Self> {
        Self::new(tau, lambda, vec![sigma; n])
    }

    #[inline]
    pub fn at(&self, i: usize) -> Elf {
        Elf { tau: self.tau, lambda: self.lambda, sigma: self.sigma[i] }
    }

    pub fn bandwidth(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * self.lambda).collect()
    }
}

/// Deviance components `2 (ll_sat_i - ll_i)` and the total saturated log-likelihood.
pub fn deviance_and_saturated(y: &[f64], mu: &[f64], p: &ElfParams) -> Result<(Vec<f64>, f64)> {
    if y.len() != mu.len() || y.len() != p.sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: y {}, mu {}, sigma {}",
            y.len(),
            mu.len(),
            p.sigma.len()
        )));
    }
    let mut dev = Vec::with_capacity(y.len());
    let mut ll_sat = 0.0;
    for i in 0..y.len() {
        let e = p.at(i);
        let sat = e.saturated_logpdf(y[i]);
        ll_sat += sat;
        dev.push((2.0 * (sat - e.logpdf(y[i], mu[i]))).max(0.0));
    }
    Ok((dev, ll_sat))
}

/// ELF pseudo-likelihood over a response vector.
#[derive(Debug, Clone)]
pub struct ElfLikelihood {
    pub y: Vec<f64>,
    pub params: ElfParams,
}

impl ElfLikelihood {
    pub fn new(y: Vec<f64>, params: ElfParams) -> Result<Self> {
        if y.len() != params.sigma.len() {
            return Err(Error::InvalidArgument(format!(
                "response has {} rows but sigma has {}",
                y.len(),
                params.sigma.len()
            )));
        }
        Ok(Self { y, params })
    }
}

impl Likelihood for ElfLikelihood {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn log_lik(&self, i: usize, eta: f64) -> f64 {
        self.params.at(i).logpdf(self.y[i], eta)
    }

    fn derivs(&self, i: usize, eta: f64) -> (f64, f64) {
        self.params.at(i).derivs(self.y[i], eta)
    }

    fn saturated(&self, i: usize) -> f64 {
        self.params.at(i).saturated_logpdf(self.y[i])
    }

    fn working_response(&self) -> Vec<f64> {
        self.y.clone()
    }
}
