//! Randomized single-term multilevel Monte Carlo for `log p(y*|θ)` and its
//! gradient.
//!
//! Level `ℓ` uses `M_ℓ = M_0 2^ℓ` inner draws and is chosen with probability
//! `w_ℓ = w_0 2^(-αℓ)`. The level-`ℓ` correction is the antithetic difference
//! between the estimate from all `M_ℓ` draws and the average of the estimates
//! from its two halves; dividing one correction by `w_ℓ` gives an unbiased
//! estimate of the limit.
//!
//! Everything is computed in log space. The log-likelihood estimate is the
//! log-sum-exp of `log f`, and the ratio estimator `Σ∇f / Σf` is the
//! softmax-weighted mean of `∇ log f`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::models::Model;
use crate::numerics::least_squares;
use crate::qmc::PointStream;
use crate::{Error, Result};

pub const DEFAULT_MAX_LEVEL: usize = 20;

/// Upper bound on the number of uniforms materialised at once per factor.
const BLOCK_VALUES: usize = 1 << 18;

/// Level law `w_ℓ = w_0 2^(-αℓ)` with `M_ℓ = M_0 2^ℓ`, truncated at
/// `max_level` with the tail mass `2^(-α·max_level)` moved onto the last level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LevelSpec", into = "LevelSpec")]
pub struct LevelDistribution {
    alpha: f64,
    m0: usize,
    max_level: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelSpec {
    alpha: f64,
    m0: usize,
    #[serde(default = "default_max_level")]
    max_level: usize,
}

fn default_max_level() -> usize {
    DEFAULT_MAX_LEVEL
}

impl TryFrom<LevelSpec> for LevelDistribution {
    type Error = Error;

    fn try_from(s: LevelSpec) -> Result<Self> {
        LevelDistribution::with_max_level(s.alpha, s.m0, s.max_level)
    }
}

impl From<LevelDistribution> for LevelSpec {
    fn from(d: LevelDistribution) -> Self {
        LevelSpec {
            alpha: d.alpha,
            m0: d.m0,
            max_level: d.max_level,
        }
    }
}

impl LevelDistribution {
    pub fn new(alpha: f64, m0: usize) -> Result<Self> {
        Self::with_max_level(alpha, m0, DEFAULT_MAX_LEVEL)
    }

    pub fn with_max_level(alpha: f64, m0: usize, max_level: usize) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if m0 == 0 {
            return Err(Error::Config("M0 must be at least 1".into()));
        }
        if max_level > 40 || m0.checked_shl(max_level as u32).is_none_or(|m| m >> max_level != m0) {
            return Err(Error::Config(format!(
                "M0 * 2^{max_level} overflows; lower max_level"
            )));
        }
        Ok(LevelDistribution { alpha, m0, max_level })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn m0(&self) -> usize {
        self.m0
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn w0(&self) -> f64 {
        1.0 - (-self.alpha).exp2()
    }

    pub fn weight(&self, level: usize) -> f64 {
        match level.cmp(&self.max_level) {
            std::cmp::Ordering::Less => self.w0() * (-self.alpha * level as f64).exp2(),
            std::cmp::Ordering::Equal => (-self.alpha * level as f64).exp2(),
            std::cmp::Ordering::Greater => 0.0,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..=self.max_level).map(|l| self.weight(l)).collect()
    }

    pub fn inner_size(&self, level: usize) -> usize {
        self.m0 << level
    }

    /// Inverse-CDF draw: the smallest `L` with `Σ_{j≤L} w_j > u`.
    pub fn sample_level(&self, u: f64) -> usize {
        let mut cum = 0.0;
        for l in 0..self.max_level {
            cum += self.weight(l);
            if cum > u {
                return l;
            }
        }
        self.max_level
    }

    /// `E[M_I] = (1 + 1/(2^α - 2)) M_0` for the untruncated law; infinite for
    /// `α ≤ 1`.
    pub fn expected_cost(&self) -> Result<f64> {
        if self.alpha <= 1.0 {
            return Err(Error::Config(format!(
                "expected cost is infinite for alpha = {} <= 1",
                self.alpha
            )));
        }
        Ok((1.0 + 1.0 / (self.alpha.exp2() - 2.0)) * self.m0 as f64)
    }

    /// `E[M_I]` under the truncated law actually sampled.
    pub fn truncated_cost(&self) -> f64 {
        (0..=self.max_level)
            .map(|l| self.weight(l) * self.inner_size(l) as f64)
            .sum()
    }
}

/// Streaming `log Σ exp(log f_k)` together with `Σ exp(log f_k) g_k`, kept
/// relative to the running maximum.
#[derive(Clone, Debug)]
struct LogMeanAccumulator {
    n: usize,
    max: f64,
    sum: f64,
    grad: Vec<f64>,
}

impl LogMeanAccumulator {
    fn new(grad_dim: usize) -> Self {
        LogMeanAccumulator {
            n: 0,
            max: f64::NEG_INFINITY,
            sum: 0.0,
            grad: vec![0.0; grad_dim],
        }
    }

    fn push(&mut self, log_f: f64, grad: &[f64]) {
        self.n += 1;
        if log_f > self.max {
            let scale = (self.max - log_f).exp();
            self.sum = self.sum * scale + 1.0;
            for (a, g) in self.grad.iter_mut().zip(grad) {
                *a = *a * scale + g;
            }
            self.max = log_f;
        } else {
            let w = (log_f - self.max).exp();
            self.sum += w;
            for (a, g) in self.grad.iter_mut().zip(grad) {
                *a += w * g;
            }
        }
    }

    fn merged(&self, other: &Self) -> Self {
        let max = self.max.max(other.max);
        let (sa, sb) = ((self.max - max).exp(), (other.max - max).exp());
        LogMeanAccumulator {
            n: self.n + other.n,
            max,
            sum: self.sum * sa + other.sum * sb,
            grad: self
                .grad
                .iter()
                .zip(&other.grad)
                .map(|(a, b)| a * sa + b * sb)
                .collect(),
        }
    }

    /// `log((1/n) Σ f_k)`.
    fn log_mean(&self) -> f64 {
        self.max + self.sum.ln() - (self.n as f64).ln()
    }

    /// `Σ f_k g_k / Σ f_k`.
    fn ratio(&self) -> Vec<f64> {
        self.grad.iter().map(|g| g / self.sum).collect()
    }
}

/// Antithetic difference computed from the two half-batch accumulators.
fn delta_from_halves(a: &LogMeanAccumulator, b: Option<&LogMeanAccumulator>) -> (f64, Vec<f64>) {
    match b {
        None => (a.log_mean(), a.ratio()),
        Some(b) => {
            let full = a.merged(b);
            let value = full.log_mean() - 0.5 * (a.log_mean() + b.log_mean());
            let (ra, rb) = (a.ratio(), b.ratio());
            let grad = full
                .ratio()
                .iter()
                .zip(ra.iter().zip(&rb))
                .map(|(f, (x, y))| f - 0.5 * (x + y))
                .collect();
            (value, grad)
        }
    }
}

fn check_layout(n: usize, level: usize) -> Result<()> {
    if n == 0 || (level > 0 && n % 2 != 0) {
        return Err(Error::Config(format!(
            "level {level} needs a positive{} number of draws, got {n}",
            if level > 0 { " even" } else { "" }
        )));
    }
    Ok(())
}

/// `Δψ_ℓ` from the `log f` values of the `M_ℓ` draws in draw order: the first
/// half is batch (a), the second half batch (b). At level 0 it is `ψ_{M_0}`.
pub fn antithetic_delta(log_f: &[f64], level: usize) -> Result<f64> {
    check_layout(log_f.len(), level)?;
    let half = if level == 0 { log_f.len() } else { log_f.len() / 2 };
    let mut a = LogMeanAccumulator::new(0);
    let mut b = LogMeanAccumulator::new(0);
    for (k, lf) in log_f.iter().enumerate() {
        if k < half { &mut a } else { &mut b }.push(*lf, &[]);
    }
    Ok(delta_from_halves(&a, (level > 0).then_some(&b)).0)
}

/// `(Δψ_ℓ, Δψ̃_ℓ)` from per-draw `log f` and `∇_θ log f` (row-major), where
/// `ψ̃_M = Σ∇f / Σf`.
pub fn antithetic_ratio_delta(log_f: &[f64], grad_log_f: &[f64], level: usize) -> Result<(f64, Vec<f64>)> {
    check_layout(log_f.len(), level)?;
    let p = grad_log_f.len() / log_f.len();
    if p * log_f.len() != grad_log_f.len() {
        return Err(Error::Config("gradient rows do not match draw count".into()));
    }
    let half = if level == 0 { log_f.len() } else { log_f.len() / 2 };
    let mut a = LogMeanAccumulator::new(p);
    let mut b = LogMeanAccumulator::new(p);
    for (k, (lf, g)) in log_f.iter().zip(grad_log_f.chunks(p.max(1))).enumerate() {
        if k < half { &mut a } else { &mut b }.push(*lf, g);
    }
    Ok(delta_from_halves(&a, (level > 0).then_some(&b)))
}

/// One draw of the level-`ℓ` correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub level: usize,
    pub weight: f64,
    /// `M_ℓ`, the inner draws used per likelihood factor.
    pub inner_cost: usize,
    /// `Δψ_ℓ` summed over factors.
    pub delta: f64,
    /// `Δψ̃_ℓ` summed over factors, when requested.
    pub delta_grad: Option<Vec<f64>>,
}

impl Correction {
    /// `Δψ_I / w_I`.
    pub fn single_term(&self) -> f64 {
        self.delta / self.weight
    }

    /// `Δψ̃_I / w_I`.
    pub fn single_term_grad(&self) -> Option<Vec<f64>> {
        self.delta_grad
            .as_ref()
            .map(|g| g.iter().map(|v| v / self.weight).collect())
    }
}

pub fn single_term(corr: &Correction) -> f64 {
    corr.single_term()
}

/// Inner stream for one likelihood factor.
pub fn factor_stream(inner: &PointStream, factor_count: usize, factor: usize) -> PointStream {
    if factor_count == 1 {
        *inner
    } else {
        inner.child(factor as u64)
    }
}

fn estimator_error(theta: &[f64], level: usize, reason: String) -> Error {
    Error::Estimator {
        theta: theta.to_vec(),
        level,
        reason,
    }
}

fn factor_delta(
    model: &dyn Model,
    factor: usize,
    theta: &[f64],
    level: usize,
    m: usize,
    stream: &PointStream,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let p = if with_grad { model.param_dim() } else { 0 };
    let half = if level == 0 { m } else { m / 2 };
    let mut a = LogMeanAccumulator::new(p);
    let mut b = LogMeanAccumulator::new(p);
    let mut g = vec![0.0; p];
    let block = (BLOCK_VALUES / stream.dimension).max(1);
    stream.for_each_block(m, block, |start, pts| {
        for (j, v) in pts.rows().enumerate() {
            let res = if with_grad {
                model.rp_chain(factor, theta, v, &mut g)
            } else {
                model.log_f(factor, theta, v)
            };
            let log_f = res.map_err(|e| match e {
                Error::Domain(r) => estimator_error(theta, level, format!("factor {factor}: {r}")),
                other => other,
            })?;
            if !(log_f > f64::NEG_INFINITY) || log_f.is_nan() || g.iter().any(|x| !x.is_finite()) {
                return Err(estimator_error(
                    theta,
                    level,
                    format!("factor {factor}: integrand is not positive (log f = {log_f})"),
                ));
            }
            if start + j < half { &mut a } else { &mut b }.push(log_f, &g);
        }
        Ok(())
    })?;
    Ok(delta_from_halves(&a, (level > 0).then_some(&b)))
}

/// Level-`ℓ` correction summed over the model's factors. Factor `i` draws its
/// `M_ℓ` inner points from its own child of `inner` (or `inner` itself for a
/// single factor); the point dimension is set to the model's inner dimension.
pub fn correction(
    model: &dyn Model,
    theta: &[f64],
    level: usize,
    dist: &LevelDistribution,
    inner: &PointStream,
    with_grad: bool,
) -> Result<Correction> {
    if level > dist.max_level() {
        return Err(Error::Config(format!(
            "level {level} exceeds max_level {}",
            dist.max_level()
        )));
    }
    if with_grad && !model.supports_rp() {
        return Err(Error::Capability(format!(
            "model `{}` has no reparameterization chain; use the score-function method",
            model.name()
        )));
    }
    let m = dist.inner_size(level);
    let stream = inner.with_dimension(model.inner_dim())?;
    let k = model.factor_count();
    let one = |i: usize| factor_delta(model, i, theta, level, m, &factor_stream(&stream, k, i), with_grad);
    let parts: Vec<(f64, Vec<f64>)> = if k == 1 {
        vec![one(0)?]
    } else {
        (0..k).into_par_iter().map(one).collect::<Result<_>>()?
    };
    let p = if with_grad { model.param_dim() } else { 0 };
    let mut delta = 0.0;
    let mut grad = vec![0.0; p];
    for (d, g) in &parts {
        delta += d;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(Correction {
        level,
        weight: dist.weight(level),
        inner_cost: m,
        delta,
        delta_grad: with_grad.then_some(grad),
    })
}

/// `Δψ_ℓ` for the log-likelihood.
pub fn sf_correction(
    model: &dyn Model,
    theta: &[f64],
    level: usize,
    dist: &LevelDistribution,
    inner: &PointStream,
) -> Result<Correction> {
    correction(model, theta, level, dist, inner, false)
}

/// `Δψ_ℓ` and `Δψ̃_ℓ` from the same inner draws.
pub fn rp_correction(
    model: &dyn Model,
    theta: &[f64],
    level: usize,
    dist: &LevelDistribution,
    inner: &PointStream,
) -> Result<Correction> {
    correction(model, theta, level, dist, inner, true)
}

/// Empirical decay of `E[X_ℓ²]` over levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub levels: Vec<usize>,
    pub second_moments: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `-slope` of `log2 E[X_ℓ²]` against `ℓ`.
    pub r: f64,
}

impl DecayFit {
    /// Logs a warning when `α ≥ r`, where the single-term variance is
    /// infinite.
    pub fn check_alpha(&self, alpha: f64) -> bool {
        let ok = alpha < self.r;
        if !ok {
            log::warn!("fitted decay rate r = {:.3} does not exceed alpha = {alpha}", self.r);
        }
        ok
    }
}

/// Fits `r` from `replicates` draws of a squared norm at each level
/// `1..=max_level`. `sample(level, replicate)` must return one draw of
/// `X_ℓ²`; level 0 is not a difference and is excluded.
pub fn decay_rate(
    max_level: usize,
    replicates: usize,
    sample: impl Fn(usize, usize) -> Result<f64> + Sync,
) -> Result<DecayFit> {
    if max_level < 3 {
        return Err(Error::Config(format!(
            "decay_rate needs levels 1..L with L >= 3, got L = {max_level}"
        )));
    }
    if replicates < 100 {
        return Err(Error::Config(format!(
            "decay_rate needs at least 100 replicates, got {replicates}"
        )));
    }
    let levels: Vec<usize> = (1..=max_level).collect();
    let draws = levels
        .iter()
        .map(|&l| (0..replicates).into_par_iter().map(|r| sample(l, r)).collect::<Result<Vec<f64>>>())
        .collect::<Result<Vec<_>>>()?;
    fit_decay(levels, &draws)
}

/// Fits `r` from per-level draws of `X_ℓ²` (`draws[k]` belongs to
/// `levels[k]`).
pub fn fit_decay(levels: Vec<usize>, draws: &[Vec<f64>]) -> Result<DecayFit> {
    if levels.len() != draws.len() || levels.len() < 2 {
        return Err(Error::Config("need draws for at least two levels".into()));
    }
    let mut second_moments = Vec::with_capacity(levels.len());
    let mut std_errors = Vec::with_capacity(levels.len());
    for (&l, d) in levels.iter().zip(draws) {
        let (mean, se) = crate::numerics::mean_and_se(d);
        if !(mean > 0.0) {
            return Err(Error::Domain(format!(
                "second moment at level {l} is {mean}; cannot take its logarithm"
            )));
        }
        second_moments.push(mean);
        std_errors.push(se);
    }
    let x: Vec<f64> = levels.iter().map(|l| *l as f64).collect();
    let y: Vec<f64> = second_moments.iter().map(|m| m.log2()).collect();
    let (slope, _) = least_squares(&x, &y)?;
    Ok(DecayFit {
        levels,
        second_moments,
        std_errors,
        r: -slope,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use super::*;
    use crate::models::ToyAbc;

    /// `log f(v) = v[0]`-driven test model that records every evaluation.
    struct Recorder {
        log_values: Vec<f64>,
        seen: Mutex<Vec<usize>>,
    }

    impl Model for Recorder {
        fn name(&self) -> &str {
            "recorder"
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn inner_dim(&self) -> usize {
            1
        }
        fn prior_logpdf(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn prior_grad(&self, _: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn latent(&self, _: usize, _: &[f64], v: &[f64]) -> Result<Vec<f64>> {
            Ok(v.to_vec())
        }
        fn log_integrand(&self, _: usize, _: &[f64]) -> Result<f64> {
            unreachable!()
        }
        fn log_f(&self, _: usize, _: &[f64], _: &[f64]) -> Result<f64> {
            let mut seen = self.seen.lock().unwrap();
            let k = seen.len();
            seen.push(k);
            Ok(self.log_values[k % self.log_values.len()])
        }
    }

    struct Constant(f64);

    impl Model for Constant {
        fn name(&self) -> &str {
            "constant"
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn inner_dim(&self) -> usize {
            2
        }
        fn prior_logpdf(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn prior_grad(&self, _: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn latent(&self, _: usize, _: &[f64], v: &[f64]) -> Result<Vec<f64>> {
            Ok(v.to_vec())
        }
        fn log_integrand(&self, _: usize, _: &[f64]) -> Result<f64> {
            Ok(self.0.ln())
        }
        fn supports_rp(&self) -> bool {
            true
        }
        fn rp_chain(&self, _: usize, _: &[f64], _: &[f64], g: &mut [f64]) -> Result<f64> {
            g[0] = 0.0;
            Ok(self.0.ln())
        }
    }

    struct NonPositive;

    impl Model for NonPositive {
        fn name(&self) -> &str {
            "zero"
        }
        fn param_dim(&self) -> usize {
            1
        }
        fn inner_dim(&self) -> usize {
            1
        }
        fn prior_logpdf(&self, _: &[f64]) -> f64 {
            0.0
        }
        fn prior_grad(&self, _: &[f64]) -> Vec<f64> {
            vec![0.0]
        }
        fn latent(&self, _: usize, _: &[f64], v: &[f64]) -> Result<Vec<f64>> {
            Ok(v.to_vec())
        }
        fn log_integrand(&self, _: usize, x: &[f64]) -> Result<f64> {
            Ok(if x[0] < 0.5 { f64::NEG_INFINITY } else { 0.0 })
        }
    }

    #[test]
    fn level_sampling_examples() {
        let d = LevelDistribution::new(1.5, 4).unwrap();
        assert!((d.w0() - 0.646_446_609_406_726_2).abs() < 1e-15);
        assert_eq!(d.sample_level(0.5), 0);
        assert_eq!(d.sample_level(0.0), 0);
        let one = LevelDistribution::new(1.0, 1).unwrap();
        assert_eq!(one.weights()[..3], [0.5, 0.25, 0.125]);
        assert_eq!(one.sample_level(0.8), 2);
        assert_eq!(one.sample_level(0.75), 2);
        assert_eq!(one.sample_level(0.7499), 1);
    }

    #[test]
    fn truncated_weights_sum_to_one() {
        for alpha in [0.5, 1.0, 1.1, 1.5, 2.0, 3.0] {
            let d = LevelDistribution::new(alpha, 1).unwrap();
            let total: f64 = d.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "alpha = {alpha}");
            assert_eq!(d.sample_level(1.0 - 1e-17), d.max_level());
        }
    }

    #[test]
    fn expected_cost_closed_form() {
        assert_eq!(LevelDistribution::new(2.0, 1).unwrap().expected_cost().unwrap(), 1.5);
        let big = LevelDistribution::new(30.0, 8).unwrap().expected_cost().unwrap();
        assert!((big - 8.0).abs() < 1e-6);
        let c = LevelDistribution::new(1.3, 8).unwrap().expected_cost().unwrap();
        assert!((c - 8.0 * (1.0 + 1.0 / (2f64.powf(1.3) - 2.0))).abs() < 1e-12);
        assert!(LevelDistribution::new(1.0, 8).unwrap().expected_cost().is_err());
        assert!(LevelDistribution::new(0.0, 8).is_err());
        assert!(LevelDistribution::new(1.5, 0).is_err());
    }

    #[test]
    fn cost_identity_by_simulation() {
        let d = LevelDistribution::new(2.0, 3).unwrap();
        let n = 1_000_000;
        let pts = PointStream::pseudorandom(1, 17).unwrap().generate(n).unwrap();
        let total: usize = pts.rows().map(|u| d.inner_size(d.sample_level(u[0]))).sum();
        let mean = total as f64 / n as f64;
        let expected = d.expected_cost().unwrap();
        assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn hand_antithetic_values() {
        let lf: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|f| f.ln()).collect();
        let d = antithetic_delta(&lf, 1).unwrap();
        let expected = 2.5f64.ln() - 0.5 * (1.5f64.ln() + 3.5f64.ln());
        assert!((d - expected).abs() < 1e-15);
        assert!((antithetic_delta(&lf, 0).unwrap() - 2.5f64.ln()).abs() < 1e-15);
        assert!(antithetic_delta(&lf[..3], 1).is_err());

        // f = (2, 4), ∇f = (1, 3): ∇ log f = (1/2, 3/4)
        let lf = [2f64.ln(), 4f64.ln()];
        let (_, g) = antithetic_ratio_delta(&lf, &[0.5, 0.75], 1).unwrap();
        assert!((g[0] - 1.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn accumulator_handles_extreme_logs() {
        let lf = [-800.0, -801.0, -799.0, -802.0];
        let d = antithetic_delta(&lf, 1).unwrap();
        let shifted: Vec<f64> = lf.iter().map(|x| x + 800.0).collect();
        assert!((d - antithetic_delta(&shifted, 1).unwrap()).abs() < 1e-12);
        assert!(d.is_finite());
    }

    #[test]
    fn constant_integrand() {
        let m = Constant(3.0);
        let d = LevelDistribution::new(1.5, 2).unwrap();
        let s = PointStream::pseudorandom(2, 1).unwrap();
        let c0 = rp_correction(&m, &[0.0], 0, &d, &s).unwrap();
        assert!((c0.delta - 3f64.ln()).abs() < 1e-15);
        assert!((c0.single_term() - 3f64.ln() / d.w0()).abs() < 1e-14);
        assert_eq!(c0.delta_grad, Some(vec![0.0]));
        for level in 1..4 {
            let c = rp_correction(&m, &[0.0], level, &d, &s).unwrap();
            assert!(c.delta.abs() < 1e-14);
            assert_eq!(c.delta_grad, Some(vec![0.0]));
            assert_eq!(c.inner_cost, 2 << level);
        }
    }

    #[test]
    fn batches_partition_the_level_draws() {
        let values: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
        let m = Recorder {
            log_values: values.clone(),
            seen: Mutex::new(Vec::new()),
        };
        let d = LevelDistribution::new(1.5, 2).unwrap();
        let s = PointStream::pseudorandom(1, 1).unwrap();
        let c = sf_correction(&m, &[0.0], 3, &d, &s).unwrap();
        let seen = m.seen.lock().unwrap().clone();
        assert_eq!(seen.len(), 16);
        let lme = |xs: &[f64]| {
            let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + (xs.iter().map(|x| (x - mx).exp()).sum::<f64>() / xs.len() as f64).ln()
        };
        let expected = lme(&values) - 0.5 * (lme(&values[..8]) + lme(&values[8..]));
        assert!((c.delta - expected).abs() < 1e-14);
    }

    #[test]
    fn non_positive_integrand_is_an_estimator_error() {
        let d = LevelDistribution::new(1.5, 64).unwrap();
        let s = PointStream::pseudorandom(1, 3).unwrap();
        match sf_correction(&NonPositive, &[0.25], 1, &d, &s) {
            Err(Error::Estimator { theta, level, .. }) => {
                assert_eq!(theta, vec![0.25]);
                assert_eq!(level, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rp_needs_capability() {
        let m = crate::models::GAndK::with_reference_summary(16, 1.0).unwrap();
        let d = LevelDistribution::new(1.5, 2).unwrap();
        let s = PointStream::pseudorandom(16, 3).unwrap();
        assert!(matches!(
            rp_correction(&m, &[0.0; 4], 0, &d, &s),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn corrections_are_deterministic() {
        let m = ToyAbc::zeros(4, 0.1).unwrap();
        let d = LevelDistribution::new(1.5, 4).unwrap();
        for kind in [crate::qmc::StreamKind::Pseudorandom, crate::qmc::StreamKind::ScrambledNet] {
            let s = PointStream::new(kind, 1, 77).unwrap();
            let a = rp_correction(&m, &[0.3], 2, &d, &s).unwrap();
            let b = rp_correction(&m, &[0.3], 2, &d, &s).unwrap();
            assert_eq!(a, b);
            let sf = sf_correction(&m, &[0.3], 2, &d, &s).unwrap();
            assert_eq!(sf.delta, a.delta);
        }
    }

    #[test]
    fn noiseless_decay_regression() {
        let fit = decay_rate(6, 100, |l, _| Ok((-2.0 * l as f64).exp2())).unwrap();
        assert!((fit.r - 2.0).abs() < 1e-12);
        assert!(fit.check_alpha(1.5));
        assert!(!fit.check_alpha(2.5));
        assert!(decay_rate(2, 100, |_, _| Ok(1.0)).is_err());
        assert!(decay_rate(4, 99, |_, _| Ok(1.0)).is_err());
    }

    #[test]
    fn serde_validates() {
        let d: LevelDistribution = serde_json::from_str(r#"{"alpha":1.3,"m0":8}"#).unwrap();
        assert_eq!(d.max_level(), DEFAULT_MAX_LEVEL);
        assert!(serde_json::from_str::<LevelDistribution>(r#"{"alpha":-1,"m0":8}"#).is_err());
        let back: LevelDistribution = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
