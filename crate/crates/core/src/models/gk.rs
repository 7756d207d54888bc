//! The univariate g-and-k distribution, simulated by pushing normals through
//! its quantile function, and its ABC model on octile summaries.
//!
//! The variational parameters are unconstrained:
//! `θ̃ = (A, log B, g, log(k + 1/2))`, with prior `N(0, 4 I)`.

use serde::{Deserialize, Serialize};

use super::{AbcModel, GaussianKernel, Model, SummaryMap};
use crate::numerics::{ln_2pi, normal_inv_cdf, uniform_to_normal};
use crate::{Error, Result};

const PRIOR_VAR: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GkParams {
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub k: f64,
}

impl GkParams {
    pub fn new(a: f64, b: f64, g: f64, k: f64) -> Result<Self> {
        let p = GkParams { a, b, g, k };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) || !(self.k > -0.5) {
            return Err(Error::Domain(format!(
                "g-and-k needs B > 0 and k > -1/2, got B = {}, k = {}",
                self.b, self.k
            )));
        }
        Ok(())
    }

    pub fn from_unconstrained(t: &[f64]) -> Self {
        GkParams {
            a: t[0],
            b: t[1].exp(),
            g: t[2],
            k: t[3].exp() - 0.5,
        }
    }

    pub fn to_unconstrained(&self) -> [f64; 4] {
        [self.a, self.b.ln(), self.g, (self.k + 0.5).ln()]
    }

    #[inline]
    fn quantile_of_normal(&self, z: f64) -> f64 {
        self.a + self.b * (1.0 + 0.8 * (0.5 * self.g * z).tanh()) * (1.0 + z * z).powf(self.k) * z
    }
}

/// `Q(q | A, B, g, k) = A + B [1 + 0.8 tanh(g z / 2)] (1 + z²)^k z`, with
/// `z = Φ⁻¹(q)`.
pub fn gk_quantile(q: f64, theta: &GkParams) -> Result<f64> {
    theta.validate()?;
    let z = normal_inv_cdf(q)?;
    Ok(theta.quantile_of_normal(z))
}

/// Sample quantile with linear interpolation between order statistics at
/// position `(n - 1) q`.
fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Octiles `E_1..E_7` of a sample.
pub fn octiles(y: &[f64]) -> Result<[f64; 7]> {
    if y.len() < 8 {
        return Err(Error::Domain(format!("octiles need at least 8 values, got {}", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in sample".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut e = [0.0; 7];
    for (j, ej) in e.iter_mut().enumerate() {
        *ej = interpolated_quantile(&sorted, (j + 1) as f64 / 8.0);
    }
    Ok(e)
}

/// `(E4, E6 - E2, (E6 + E2 - 2 E4) / S_B, (E7 - E5 + E3 - E1) / S_B)`.
pub fn gk_summaries(y: &[f64]) -> Result<[f64; 4]> {
    let e = octiles(y)?;
    let sb = e[5] - e[1];
    if !(sb > 0.0) {
        return Err(Error::Domain("degenerate sample: E6 - E2 is zero".into()));
    }
    Ok([
        e[3],
        sb,
        (e[5] + e[1] - 2.0 * e[3]) / sb,
        (e[6] - e[4] + e[2] - e[0]) / sb,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GAndK {
    t: usize,
    kernel: GaussianKernel,
    observed: Vec<f64>,
}

impl GAndK {
    /// Reference summaries of a length-1000 sample at `(3, 1, 2, 0.5)`, in
    /// `(S_A, S_B, S_g, S_k)` order.
    pub const REFERENCE_SUMMARY: [f64; 4] = [3.05, 1.63, 0.42, 1.58];

    pub fn new(t: usize, h: f64, observed: Vec<f64>) -> Result<Self> {
        if t < 8 {
            return Err(Error::Config(format!("g-and-k needs T >= 8, got {t}")));
        }
        if observed.len() != 4 {
            return Err(Error::Config(format!(
                "g-and-k observed summary must have 4 entries, got {}",
                observed.len()
            )));
        }
        Ok(GAndK {
            t,
            kernel: GaussianKernel::new(h, 4)?,
            observed,
        })
    }

    pub fn with_reference_summary(t: usize, h: f64) -> Result<Self> {
        Self::new(t, h, Self::REFERENCE_SUMMARY.to_vec())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Draws a sample of length `T` at constrained parameters from uniforms.
    pub fn sample(&self, params: &GkParams, v: &[f64]) -> Vec<f64> {
        v.iter().map(|u| params.quantile_of_normal(uniform_to_normal(*u))).collect()
    }
}

impl Model for GAndK {
    fn name(&self) -> &str {
        "gk"
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn inner_dim(&self) -> usize {
        self.t
    }

    fn prior_logpdf(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .map(|t| -0.5 * (ln_2pi() + PRIOR_VAR.ln()) - t * t / (2.0 * PRIOR_VAR))
            .sum()
    }

    fn prior_grad(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().map(|t| -t / PRIOR_VAR).collect()
    }

    fn latent(&self, _factor: usize, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.t {
            return Err(Error::Config(format!(
                "g-and-k needs {} uniforms, got {}",
                self.t,
                v.len()
            )));
        }
        Ok(self.sample(&GkParams::from_unconstrained(theta), v))
    }

    fn log_integrand(&self, _factor: usize, x: &[f64]) -> Result<f64> {
        let s = gk_summaries(x)?;
        Ok(self.kernel.log_value(&s, &self.observed))
    }

    fn abc(&self) -> Option<&dyn AbcModel> {
        Some(self)
    }
}

impl AbcModel for GAndK {
    fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    fn summary_map(&self) -> SummaryMap {
        SummaryMap::GkOctiles
    }

    fn observed_summary(&self) -> &[f64] {
        &self.observed
    }

    fn prior_from_normals(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| PRIOR_VAR.sqrt() * v).collect()
    }
}
