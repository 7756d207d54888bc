//! Reference methods: plug-in (VBIL) log-likelihood gradients with a fixed
//! inner sample size, the unbiased Gaussian synthetic log-likelihood (VBSL)
//! and acceptance-rejection ABC.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gaussian::{ControlVariate, SfParams};
use crate::mlmc::{correction, LevelDistribution};
use crate::models::{AbcModel, Model};
use crate::numerics::{cholesky, digamma, ln_2pi, uniform_to_normal, SquareMatrix};
use crate::qmc::PointStream;
use crate::{Error, Result};

/// How the plug-in gradient is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VbilForm {
    /// `∇ log q · (log p̂_N + log p - log q - c)`.
    ScoreFunction,
    /// Reparameterization through the ratio `Σ∇f / Σf` of `N` draws.
    Reparameterization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VbilConfig {
    pub n: usize,
    #[serde(default = "default_form")]
    pub form: VbilForm,
}

fn default_form() -> VbilForm {
    VbilForm::ScoreFunction
}

impl VbilConfig {
    pub fn new(n: usize, form: VbilForm) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("VBIL needs N >= 1".into()));
        }
        Ok(VbilConfig { n, form })
    }

    fn fixed_level(&self) -> Result<LevelDistribution> {
        LevelDistribution::with_max_level(1.0, self.n, 0)
    }
}

/// `log p̂_N(y*|θ)`: the log of the `N`-draw sample mean of `f`, summed over
/// factors.
pub fn plugin_log_likelihood(model: &dyn Model, theta: &[f64], n: usize, inner: &PointStream) -> Result<f64> {
    let cfg = VbilConfig::new(n, VbilForm::ScoreFunction)?;
    Ok(correction(model, theta, 0, &cfg.fixed_level()?, inner, false)?.delta)
}

/// `log p̂_N` together with the ratio estimate `Σ∇_θ f / Σ f` from the same
/// draws.
pub fn plugin_log_likelihood_grad(
    model: &dyn Model,
    theta: &[f64],
    n: usize,
    inner: &PointStream,
) -> Result<(f64, Vec<f64>)> {
    let cfg = VbilConfig::new(n, VbilForm::Reparameterization)?;
    let c = correction(model, theta, 0, &cfg.fixed_level()?, inner, true)?;
    Ok((c.delta, c.delta_grad.unwrap_or_default()))
}

/// Score-function plug-in gradient averaged over outer draws
/// `θ_i = μ + C⁻ᵀ z_i`, each with its own inner stream.
pub fn vbil_gradient(
    params: &SfParams,
    model: &dyn Model,
    config: &VbilConfig,
    outer_normals: &[Vec<f64>],
    inner_streams: &[PointStream],
    cv: &ControlVariate,
) -> Result<Vec<f64>> {
    if outer_normals.len() != inner_streams.len() || outer_normals.is_empty() {
        return Err(Error::Config("need one inner stream per outer draw".into()));
    }
    let rows: Vec<Vec<f64>> = outer_normals
        .par_iter()
        .zip(inner_streams)
        .map(|(z, s)| {
            let theta = params.sample(z);
            let loglik = plugin_log_likelihood(model, &theta, config.n, s)?;
            let xi = loglik + model.prior_logpdf(&theta) - params.logq(&theta);
            Ok(params
                .score(&theta)
                .iter()
                .zip(&cv.c)
                .map(|(s, c)| s * (xi - c))
                .collect())
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let d = rows[0].len();
    Ok((0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLikConfig {
    pub n: usize,
}

/// Unbiased estimate of `log φ(s; μ(θ), Σ(θ))` from `N` simulated summaries,
/// assuming the summaries are Gaussian. Requires `N > d + 2`.
pub fn synthetic_log_likelihood(s_obs: &[f64], summaries: &[Vec<f64>]) -> Result<f64> {
    let d = s_obs.len();
    let n = summaries.len();
    if n <= d + 2 {
        return Err(Error::Config(format!(
            "synthetic likelihood needs N > d + 2, got N = {n}, d = {d}"
        )));
    }
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for s in summaries {
        if s.len() != d {
            return Err(Error::Config("summary dimension mismatch".into()));
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / nf;
        }
    }
    let mut cov = SquareMatrix::zeros(d);
    for s in summaries {
        for i in 0..d {
            for j in 0..=i {
                let v = cov.get(i, j) + (s[i] - mean[i]) * (s[j] - mean[j]) / (nf - 1.0);
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
    }
    let l = cholesky(&cov)?;
    let r: Vec<f64> = s_obs.iter().zip(&mean).map(|(a, b)| a - b).collect();
    let w = l.solve(&r);
    let quad: f64 = w.iter().map(|x| x * x).sum();
    let df = d as f64;
    let mut psi_sum = 0.0;
    for i in 1..=d {
        psi_sum += digamma((nf - i as f64) / 2.0)?;
    }
    let log_det = 2.0 * l.log_abs_det();
    Ok(-0.5 * df * ln_2pi()
        - 0.5 * (log_det + df * ((nf - 1.0) / 2.0).ln() - psi_sum)
        - 0.5 * ((nf - df - 2.0) / (nf - 1.0) * quad - df / nf))
}

/// VBSL log-likelihood at θ: simulates `N` summaries, one per row of
/// `stream`.
pub fn vbsl_loglik(
    s_obs: &[f64],
    theta: &[f64],
    model: &dyn AbcModel,
    config: &SyntheticLikConfig,
    stream: &PointStream,
) -> Result<f64> {
    let d = s_obs.len();
    if config.n <= d + 2 {
        return Err(Error::Config(format!(
            "synthetic likelihood needs N > d + 2, got N = {}, d = {d}",
            config.n
        )));
    }
    let pts = stream.with_dimension(model.inner_dim())?.generate(config.n)?;
    let summaries = pts
        .rows()
        .map(|v| model.simulate_summary(theta, v))
        .collect::<Result<Vec<_>>>()?;
    synthetic_log_likelihood(s_obs, &summaries)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcArConfig {
    pub n_accepted: usize,
    /// Proposals evaluated before the acceptance rate is checked.
    pub probe_window: usize,
    pub min_acceptance: f64,
    pub batch: usize,
}

impl Default for AbcArConfig {
    fn default() -> Self {
        AbcArConfig {
            n_accepted: 10_000,
            probe_window: 1_000_000,
            min_acceptance: 1e-6,
            batch: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcArResult {
    pub samples: Vec<Vec<f64>>,
    pub proposals: usize,
}

impl AbcArResult {
    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.proposals as f64
    }
}

/// Acceptance-rejection ABC: propose `θ` from the prior, simulate summaries
/// and accept with probability `K_h(S(y), S(y*)) / K_max`. Proposal `k` uses
/// row `k` of a pseudorandom stream of width `p + s + 1`, so the output does
/// not depend on the thread count.
pub fn abc_ar(model: &dyn AbcModel, config: &AbcArConfig, seed: u64) -> Result<AbcArResult> {
    let p = model.param_dim();
    let s = model.inner_dim();
    let stream = PointStream::pseudorandom(p + s + 1, seed)?;
    let kernel = *model.kernel();
    let obs = model.observed_summary().to_vec();
    let mut samples = Vec::with_capacity(config.n_accepted);
    let mut proposals = 0usize;
    let batch = config.batch.max(1);
    while samples.len() < config.n_accepted {
        let pts = stream.generate_range(proposals as u64, batch)?;
        let outcomes: Vec<Option<Vec<f64>>> = (0..batch)
            .into_par_iter()
            .map(|k| {
                let row = pts.row(k);
                let z: Vec<f64> = row[..p].iter().map(|u| uniform_to_normal(*u)).collect();
                let theta = model.prior_from_normals(&z);
                let summary = model.simulate_summary(&theta, &row[p..p + s])?;
                let log_ratio = kernel.log_value(&summary, &obs) - kernel.log_max();
                Ok((row[p + s].ln() < log_ratio).then_some(theta))
            })
            .collect::<Result<_>>()?;
        for o in outcomes {
            proposals += 1;
            if let Some(theta) = o {
                samples.push(theta);
                if samples.len() == config.n_accepted {
                    break;
                }
            }
        }
        if proposals >= config.probe_window
            && (samples.len() as f64) < config.min_acceptance * proposals as f64
        {
            return Err(Error::Domain(format!(
                "ABC acceptance rate {:.3e} after {proposals} proposals is below {:.0e}; \
                 increase the bandwidth h",
                samples.len() as f64 / proposals as f64,
                config.min_acceptance
            )));
        }
    }
    Ok(AbcArResult { samples, proposals })
}

/// Writes one accepted θ per row.
pub fn write_samples_csv(samples: &[Vec<f64>], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    if let Some(first) = samples.first() {
        let header: Vec<String> = (0..first.len()).map(|i| format!("theta{}", i + 1)).collect();
        w.write_record(&header).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    for s in samples {
        w.write_record(s.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ToyAbc;

    #[test]
    fn synthetic_likelihood_needs_enough_draws() {
        let s = vec![vec![0.0, 1.0]; 4];
        assert!(matches!(
            synthetic_log_likelihood(&[0.0, 0.0], &s),
            Err(Error::Config(_))
        ));
        let m = ToyAbc::zeros(4, 0.1).unwrap();
        let stream = PointStream::pseudorandom(4, 1).unwrap();
        assert!(vbsl_loglik(&[0.0; 4], &[0.0], &m, &SyntheticLikConfig { n: 6 }, &stream).is_err());
        assert!(vbsl_loglik(&[0.0; 4], &[0.0], &m, &SyntheticLikConfig { n: 7 }, &stream).is_ok());
    }

    #[test]
    fn identical_summaries_are_singular() {
        let s = vec![vec![1.0, 2.0]; 10];
        assert!(matches!(
            synthetic_log_likelihood(&[0.0, 0.0], &s),
            Err(Error::Decomposition { .. })
        ));
    }

    // In one dimension the estimator is
    // -½ log 2π - ½ (log σ̂² + log((N-1)/2) - ψ((N-1)/2)) - ½ ((N-3)/(N-1) r²/σ̂² - 1/N).
    #[test]
    fn scalar_reduction() {
        let xs = [0.3, -1.2, 0.8, 2.1, 0.0, -0.4];
        let summaries: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        let s = 0.7;
        let direct = -0.5 * ln_2pi()
            - 0.5 * (var.ln() + ((n - 1.0) / 2.0).ln() - digamma((n - 1.0) / 2.0).unwrap())
            - 0.5 * ((n - 3.0) / (n - 1.0) * (s - mean) * (s - mean) / var - 1.0 / n);
        let got = synthetic_log_likelihood(&[s], &summaries).unwrap();
        assert!((got - direct).abs() < 1e-13);
    }

    #[test]
    fn plugin_matches_direct_average() {
        let m = ToyAbc::zeros(4, 0.1).unwrap();
        let stream = PointStream::pseudorandom(4, 3).unwrap();
        let pts = stream.generate(16).unwrap();
        let direct: Vec<f64> = pts.rows().map(|v| m.log_f(0, &[0.2], v).unwrap()).collect();
        let mx = direct.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lme = mx + (direct.iter().map(|x| (x - mx).exp()).sum::<f64>() / 16.0).ln();
        let got = plugin_log_likelihood(&m, &[0.2], 16, &stream).unwrap();
        assert!((got - lme).abs() < 1e-12);
        let (l2, g) = plugin_log_likelihood_grad(&m, &[0.2], 16, &stream).unwrap();
        assert!((l2 - lme).abs() < 1e-12);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn abc_ar_is_reproducible_and_flat_kernel_accepts_everything() {
        let m = ToyAbc::zeros(4, 1e12).unwrap();
        let cfg = AbcArConfig {
            n_accepted: 500,
            ..Default::default()
        };
        let a = abc_ar(&m, &cfg, 4).unwrap();
        assert_eq!(a.proposals, 500);
        assert_eq!(a, abc_ar(&m, &cfg, 4).unwrap());
        let mean = a.samples.iter().map(|t| t[0]).sum::<f64>() / 500.0;
        assert!(mean.abs() < 4.0 / 500f64.sqrt());
    }

    #[test]
    fn abc_ar_aborts_when_nothing_is_accepted() {
        let m = ToyAbc::new(vec![40.0; 4], 1e-4).unwrap();
        let cfg = AbcArConfig {
            n_accepted: 10,
            probe_window: 20_000,
            min_acceptance: 1e-3,
            batch: 5_000,
        };
        assert!(matches!(abc_ar(&m, &cfg, 1), Err(Error::Domain(_))));
    }
}
