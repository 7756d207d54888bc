//! Gaussian toy ABC model: `θ ~ N(0, 1)`, `y_i | θ ~ N(θ, 1)` for
//! `i = 1..n`, identity summaries and a Gaussian kernel of bandwidth `h`.
//!
//! Convolving the kernel with the model gives the ABC likelihood in closed
//! form, `p̃(y*|θ) = ∏ φ(y*_i; θ, 1 + h)`, so the ABC posterior, evidence and
//! ELBO of a Gaussian `q` are all analytic.

use serde::{Deserialize, Serialize};

use super::{AbcModel, GaussianKernel, Model, SummaryMap};
use crate::numerics::{ln_2pi, uniform_to_normal};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAbc {
    y_star: Vec<f64>,
    kernel: GaussianKernel,
}

impl ToyAbc {
    pub fn new(y_star: Vec<f64>, h: f64) -> Result<Self> {
        let kernel = GaussianKernel::new(h, y_star.len())?;
        Ok(ToyAbc { y_star, kernel })
    }

    /// `n` zero observations.
    pub fn zeros(n: usize, h: f64) -> Result<Self> {
        Self::new(vec![0.0; n], h)
    }

    pub fn n(&self) -> usize {
        self.y_star.len()
    }

    pub fn h(&self) -> f64 {
        self.kernel.h
    }

    pub fn y_star(&self) -> &[f64] {
        &self.y_star
    }

    fn y_bar(&self) -> f64 {
        self.y_star.iter().sum::<f64>() / self.n() as f64
    }

    /// `log p̃(y*|θ)`.
    pub fn abc_log_likelihood(&self, theta: f64) -> f64 {
        let v = 1.0 + self.h();
        self.y_star
            .iter()
            .map(|y| -0.5 * (ln_2pi() + v.ln()) - (y - theta) * (y - theta) / (2.0 * v))
            .sum()
    }

    /// Mean and variance of the ABC posterior.
    pub fn abc_posterior(&self) -> (f64, f64) {
        let n = self.n() as f64;
        let h = self.h();
        (n * self.y_bar() / (n + 1.0 + h), (1.0 + h) / (n + 1.0 + h))
    }

    /// Mean and variance of the exact (`h = 0`) posterior.
    pub fn exact_posterior(&self) -> (f64, f64) {
        let n = self.n() as f64;
        (n * self.y_bar() / (1.0 + n), 1.0 / (1.0 + n))
    }

    /// `log p̃(y*)`, the ABC evidence: `y* ~ N(0, (1+h) I + 1 1ᵀ)`.
    pub fn abc_log_evidence(&self) -> f64 {
        let n = self.n() as f64;
        let v = 1.0 + self.h();
        let sum: f64 = self.y_star.iter().sum();
        let sq: f64 = self.y_star.iter().map(|y| y * y).sum();
        let log_det = n * v.ln() + (1.0 + n / v).ln();
        let quad = sq / v - sum * sum / (v * (v + n));
        -0.5 * (n * ln_2pi() + log_det + quad)
    }

    /// ELBO of `q = N(m, s²)` against the ABC likelihood and the `N(0,1)`
    /// prior, with its gradient in `(m, s)`.
    pub fn abc_elbo(&self, m: f64, s: f64) -> (f64, [f64; 2]) {
        let n = self.n() as f64;
        let v = 1.0 + self.h();
        let resid: f64 = self.y_star.iter().map(|y| (y - m) * (y - m)).sum();
        let sum_dev: f64 = self.y_star.iter().map(|y| y - m).sum();
        let loglik = -0.5 * n * (ln_2pi() + v.ln()) - (resid + n * s * s) / (2.0 * v);
        let prior = -0.5 * ln_2pi() - 0.5 * (m * m + s * s);
        let entropy = 0.5 * (ln_2pi() + 1.0) + s.ln();
        let value = loglik + prior + entropy;
        let dm = sum_dev / v - m;
        let ds = -n * s / v - s + 1.0 / s;
        (value, [dm, ds])
    }
}

impl Model for ToyAbc {
    fn name(&self) -> &str {
        "toy"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn inner_dim(&self) -> usize {
        self.n()
    }

    fn prior_logpdf(&self, theta: &[f64]) -> f64 {
        -0.5 * ln_2pi() - 0.5 * theta[0] * theta[0]
    }

    fn prior_grad(&self, theta: &[f64]) -> Vec<f64> {
        vec![-theta[0]]
    }

    fn latent(&self, _factor: usize, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n() {
            return Err(Error::Config(format!(
                "toy model needs {} uniforms, got {}",
                self.n(),
                v.len()
            )));
        }
        Ok(v.iter().map(|u| theta[0] + uniform_to_normal(*u)).collect())
    }

    fn log_integrand(&self, _factor: usize, x: &[f64]) -> Result<f64> {
        Ok(self.kernel.log_value(x, &self.y_star))
    }

    fn log_f(&self, _factor: usize, theta: &[f64], v: &[f64]) -> Result<f64> {
        let mut r2 = 0.0;
        for (u, y) in v.iter().zip(&self.y_star) {
            let d = theta[0] + uniform_to_normal(*u) - y;
            r2 += d * d;
        }
        Ok(self.kernel.log_max() - r2 / (2.0 * self.h()))
    }

    fn supports_rp(&self) -> bool {
        true
    }

    fn rp_chain(&self, _factor: usize, theta: &[f64], v: &[f64], grad: &mut [f64]) -> Result<f64> {
        let mut r2 = 0.0;
        let mut g = 0.0;
        for (u, y) in v.iter().zip(&self.y_star) {
            let d = theta[0] + uniform_to_normal(*u) - y;
            r2 += d * d;
            g -= d;
        }
        grad[0] = g / self.h();
        Ok(self.kernel.log_max() - r2 / (2.0 * self.h()))
    }

    fn abc(&self) -> Option<&dyn AbcModel> {
        Some(self)
    }

    fn reference_posterior(&self) -> Option<Vec<(f64, f64)>> {
        let (m, v) = self.abc_posterior();
        Some(vec![(m, v.sqrt())])
    }
}

impl AbcModel for ToyAbc {
    fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    fn summary_map(&self) -> SummaryMap {
        SummaryMap::Identity
    }

    fn observed_summary(&self) -> &[f64] {
        &self.y_star
    }

    fn prior_from_normals(&self, z: &[f64]) -> Vec<f64> {
        vec![z[0]]
    }
}
