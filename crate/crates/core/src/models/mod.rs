//! Models whose likelihood is an expectation `p(y*|θ) = E[f(x; y*) | θ]`.
//!
//! A model exposes the map `x = Λ(v; θ)` from inner uniforms `v ∈ [0,1)^s` to
//! latent draws, and the positive integrand `f`, always in log space. Models
//! whose likelihood factorises over independent units (the GLMM) report one
//! factor per unit; each factor has its own inner expectation.

mod glmm;
mod gk;
mod toy;

use serde::{Deserialize, Serialize};

pub use glmm::{load_sixcity, synth_sixcity, write_sixcity, Glmm, SixCityData};
pub use gk::{gk_quantile, gk_summaries, GAndK, GkParams};
pub use toy::ToyAbc;

use crate::numerics::ln_2pi;
use crate::{Error, Result};

pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    /// Dimension `p` of θ.
    fn param_dim(&self) -> usize;

    /// Number of independent likelihood factors.
    fn factor_count(&self) -> usize {
        1
    }

    /// Inner dimension `s` of one latent draw.
    fn inner_dim(&self) -> usize;

    fn prior_logpdf(&self, theta: &[f64]) -> f64;

    fn prior_grad(&self, theta: &[f64]) -> Vec<f64>;

    /// The latent map `Λ(v; θ)` for one factor.
    fn latent(&self, factor: usize, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>;

    /// `log f(x; y*)` for one factor.
    fn log_integrand(&self, factor: usize, x: &[f64]) -> Result<f64>;

    /// `log f(Λ(v; θ); y*)`.
    fn log_f(&self, factor: usize, theta: &[f64], v: &[f64]) -> Result<f64> {
        let x = self.latent(factor, theta, v)?;
        self.log_integrand(factor, &x)
    }

    fn supports_rp(&self) -> bool {
        false
    }

    /// Returns `log f(Λ(v; θ))` and writes `∇_θ log f(Λ(v; θ))` into `grad`,
    /// i.e. `∇_θΛ · ∇_x f / f`.
    fn rp_chain(&self, _factor: usize, _theta: &[f64], _v: &[f64], _grad: &mut [f64]) -> Result<f64> {
        Err(Error::Capability(format!(
            "model `{}` has no differentiable integrand; use the score-function method",
            self.name()
        )))
    }

    /// ABC view of the model, when it is defined through a summary kernel.
    fn abc(&self) -> Option<&dyn AbcModel> {
        None
    }

    /// Marginal means and standard deviations of a known posterior, used as a
    /// reference in reports.
    fn reference_posterior(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

/// Models defined through `f(x; y*) = K_h(S(x), S(y*))`.
pub trait AbcModel: Model {
    fn kernel(&self) -> &GaussianKernel;

    fn summary_map(&self) -> SummaryMap;

    fn observed_summary(&self) -> &[f64];

    /// Maps `p` standard normals to a prior draw.
    fn prior_from_normals(&self, z: &[f64]) -> Vec<f64>;

    fn simulate_summary(&self, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let x = self.latent(0, theta, v)?;
        self.summary_map().apply(&x)
    }
}

/// The Gaussian ABC kernel
/// `K_h(s, s*) = (2πh)^(-d/2) exp(-|s - s*|² / (2h))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub h: f64,
    pub d: usize,
}

impl GaussianKernel {
    pub fn new(h: f64, d: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("kernel bandwidth must be positive, got {h}")));
        }
        if d == 0 {
            return Err(Error::Config("kernel dimension must be positive".into()));
        }
        Ok(GaussianKernel { h, d })
    }

    /// `log K_max = -(d/2) log(2πh)`, the value at `s = s*`.
    pub fn log_max(&self) -> f64 {
        -0.5 * self.d as f64 * (ln_2pi() + self.h.ln())
    }

    pub fn log_value(&self, s: &[f64], s_star: &[f64]) -> f64 {
        debug_assert_eq!(s.len(), s_star.len());
        let r2: f64 = s.iter().zip(s_star).map(|(a, b)| (a - b) * (a - b)).sum();
        self.log_max() - r2 / (2.0 * self.h)
    }
}

pub fn gaussian_kernel(s: &[f64], s_star: &[f64], h: f64) -> Result<f64> {
    if s.len() != s_star.len() {
        return Err(Error::Config(format!(
            "summary lengths differ: {} vs {}",
            s.len(),
            s_star.len()
        )));
    }
    Ok(GaussianKernel::new(h, s.len())?.log_value(s, s_star).exp())
}

/// The summary statistic map `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMap {
    Identity,
    /// The four robust octile summaries of a g-and-k sample.
    GkOctiles,
}

impl SummaryMap {
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            SummaryMap::Identity => Ok(y.to_vec()),
            SummaryMap::GkOctiles => gk_summaries(y).map(|s| s.to_vec()),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, SummaryMap::Identity)
    }
}

/// `∇_y K_h(S(y), S(y*)) = K_h · ∇_y S(y) [S(y*) - S(y)] / h`.
pub fn kernel_grad_y(y: &[f64], y_star: &[f64], h: f64, summary: SummaryMap) -> Result<Vec<f64>> {
    if !summary.is_differentiable() {
        return Err(Error::Capability(
            "octile summaries are not differentiable; use the score-function method".into(),
        ));
    }
    let k = gaussian_kernel(y, y_star, h)?;
    Ok(y.iter().zip(y_star).map(|(a, b)| k * (b - a) / h).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_peak_value() {
        let s = [0.3, -1.0, 2.0, 0.0];
        let k = gaussian_kernel(&s, &s, 0.1).unwrap();
        let expected = (0.2 * std::f64::consts::PI).powi(-2);
        assert!((k - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn kernel_scalar_and_symmetry() {
        let k = gaussian_kernel(&[1.0], &[0.0], 1.0).unwrap();
        let expected = (2.0 * std::f64::consts::PI).powf(-0.5) * (-0.5f64).exp();
        assert!((k - expected).abs() < 1e-15);
        let a = [0.1, 0.7];
        let b = [-0.4, 1.3];
        assert_eq!(gaussian_kernel(&a, &b, 0.3).unwrap(), gaussian_kernel(&b, &a, 0.3).unwrap());
    }

    #[test]
    fn kernel_rejects_bad_bandwidth() {
        assert!(gaussian_kernel(&[0.0], &[0.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[0.0], -1.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn kernel_gradient_cases() {
        let g = kernel_grad_y(&[0.5, 1.0], &[0.5, 1.0], 0.1, SummaryMap::Identity).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = kernel_grad_y(&[0.0], &[2.0], 1.0, SummaryMap::Identity).unwrap();
        let k = gaussian_kernel(&[0.0], &[2.0], 1.0).unwrap();
        assert!((g[0] - 2.0 * k).abs() < 1e-15);
        let y = vec![0.0; 8];
        assert!(matches!(
            kernel_grad_y(&y, &y, 1.0, SummaryMap::GkOctiles),
            Err(Error::Capability(_))
        ));
    }
}
