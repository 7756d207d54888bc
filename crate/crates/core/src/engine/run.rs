use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EarlyStop, LearningRate, Method, Placement, RunConfig};
use crate::baselines::{plugin_log_likelihood, plugin_log_likelihood_grad, vbsl_loglik, SyntheticLikConfig};
use crate::gaussian::{lambda_len, rp_assemble, ControlVariate, VariationalParams};
use crate::mlmc::{correction, LevelDistribution};
use crate::models::Model;
use crate::numerics::{mean_and_se, uniform_to_normal};
use crate::qmc::{derive_seed, PointStream};
use crate::{Error, Result};

const TAG_OUTER: u64 = 1;
const TAG_LEVEL: u64 = 2;
const TAG_INNER: u64 = 3;
const TAG_FRESH: u64 = 4;
const MAX_ATTEMPTS: u64 = 8;

/// Seeds of the streams used in one iteration; re-creating the streams from
/// these reproduces the iteration exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub run: u64,
    pub outer: u64,
    pub level: u64,
    pub inner: u64,
}

impl SeedLineage {
    pub fn new(run: u64, iteration: usize, tag: u64) -> Self {
        let t = iteration as u64;
        SeedLineage {
            run,
            outer: derive_seed(&[run, t, tag, TAG_OUTER]),
            level: derive_seed(&[run, t, tag, TAG_LEVEL]),
            inner: derive_seed(&[run, t, tag, TAG_INNER]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `λ^(t)`, the parameters the iteration's draws were taken under.
    pub lambda: Vec<f64>,
    pub grad_norm: f64,
    /// ELBO (or the method's own objective) from the gradient's draws.
    pub elbo: f64,
    pub elbo_se: Option<f64>,
    /// Independent estimate on fresh streams, when `fresh_elbo` is set.
    pub fresh_elbo: Option<f64>,
    /// Inner draws per factor spent in this iteration.
    pub cost: u64,
    pub cumulative_cost: u64,
    pub max_level: usize,
    pub resampled: usize,
    pub clamped: usize,
    pub seeds: SeedLineage,
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: RunConfig,
    pub records: Vec<IterationRecord>,
    pub final_params: VariationalParams,
    pub control_variate: Option<ControlVariate>,
    pub stopped_early: bool,
}

impl RunTrace {
    pub fn total_cost(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_cost)
    }

    pub fn draws(&self) -> usize {
        self.records.len() * self.config.outer_samples
    }

    /// ELBO values, preferring the fresh estimates when present.
    pub fn elbo_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fresh_elbo.unwrap_or(r.elbo)).collect()
    }

    /// Mean and standard error of the ELBO over the last `window` iterations
    /// (the SE treats iterations as independent).
    pub fn tail_elbo(&self, window: usize) -> Result<(f64, f64)> {
        let series = self.elbo_series();
        if series.is_empty() {
            return Err(Error::Config("trace has no iterations".into()));
        }
        let start = series.len().saturating_sub(window.max(1));
        Ok(mean_and_se(&series[start..]))
    }
}

/// Hooks for diagnostics that need to steer the draws.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Replaces the outer standard normals: `(iteration, draw) -> z`.
    pub outer_normals: Option<&'a (dyn Fn(usize, usize) -> Vec<f64> + Sync)>,
}

/// How the log-likelihood term of a draw is estimated.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Payoff {
    Mlmc(LevelDistribution),
    Plugin(usize),
    Synthetic(usize),
}

impl Payoff {
    pub(crate) fn for_config(config: &RunConfig) -> Self {
        match config.method {
            Method::SfMlmc | Method::RpMlmc => Payoff::Mlmc(config.levels),
            Method::Vbil => Payoff::Plugin(config.plugin_n),
            Method::Vbsl => Payoff::Synthetic(config.plugin_n),
        }
    }
}

/// One outer draw: θ, the likelihood term and optionally its θ-gradient.
#[derive(Clone, Debug)]
pub(crate) struct Draw {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub level: usize,
    pub cost: u64,
    pub loglik: f64,
    pub loglik_grad: Option<Vec<f64>>,
    pub resampled: usize,
}

/// Immutable description of a batch of `S` draws.
pub(crate) struct DrawPlan<'a> {
    pub model: &'a dyn Model,
    pub payoff: Payoff,
    pub placement: Placement,
    pub seeds: SeedLineage,
    pub samples: usize,
    pub with_grad: bool,
    pub skip_bad_draws: bool,
}

impl DrawPlan<'_> {
    pub(crate) fn outer_normals(&self) -> Result<Vec<Vec<f64>>> {
        let p = self.model.param_dim();
        let pts = PointStream::new(self.placement.outer_kind(), p, self.seeds.outer)?.generate(self.samples)?;
        Ok(pts
            .rows()
            .map(|r| r.iter().map(|u| uniform_to_normal(*u)).collect())
            .collect())
    }

    pub(crate) fn levels(&self) -> Result<Vec<usize>> {
        match self.payoff {
            Payoff::Mlmc(dist) => {
                let pts = PointStream::pseudorandom(1, self.seeds.level)?.generate(self.samples)?;
                Ok(pts.rows().map(|r| dist.sample_level(r[0])).collect())
            }
            _ => Ok(vec![0; self.samples]),
        }
    }

    fn inner_stream(&self, draw: usize, attempt: u64) -> Result<PointStream> {
        let dim = self.model.inner_dim().max(1);
        let base = PointStream::new(self.placement.inner_kind(), dim, self.seeds.inner)?.child(draw as u64);
        Ok(if attempt == 0 { base } else { base.child(attempt) })
    }

    fn loglik(&self, theta: &[f64], level: usize, stream: &PointStream) -> Result<(f64, u64, Option<Vec<f64>>)> {
        match self.payoff {
            Payoff::Mlmc(dist) => {
                let c = correction(self.model, theta, level, &dist, stream, self.with_grad)?;
                let grad = c.single_term_grad();
                Ok((c.single_term(), c.inner_cost as u64, grad))
            }
            Payoff::Plugin(n) => {
                if self.with_grad {
                    let (v, g) = plugin_log_likelihood_grad(self.model, theta, n, stream)?;
                    Ok((v, n as u64, Some(g)))
                } else {
                    Ok((plugin_log_likelihood(self.model, theta, n, stream)?, n as u64, None))
                }
            }
            Payoff::Synthetic(n) => {
                let abc = self.model.abc().ok_or_else(|| {
                    Error::Capability(format!("model `{}` has no summary statistics for VBSL", self.model.name()))
                })?;
                let v = vbsl_loglik(abc.observed_summary(), theta, abc, &SyntheticLikConfig { n }, stream)?;
                Ok((v, n as u64, None))
            }
        }
    }

    /// Evaluates all draws in parallel; results keep the draw order.
    pub(crate) fn evaluate(&self, params: &VariationalParams, normals: Vec<Vec<f64>>) -> Result<Vec<Draw>> {
        let levels = self.levels()?;
        normals
            .into_par_iter()
            .zip(levels)
            .enumerate()
            .map(|(i, (z, level))| {
                let theta = params.sample(&z);
                let mut attempt = 0;
                loop {
                    let stream = self.inner_stream(i, attempt)?;
                    match self.loglik(&theta, level, &stream) {
                        Ok((loglik, cost, loglik_grad)) => {
                            return Ok(Draw {
                                z,
                                theta,
                                level,
                                cost,
                                loglik,
                                loglik_grad,
                                resampled: attempt as usize,
                            })
                        }
                        Err(e @ (Error::Estimator { .. } | Error::Domain(_)))
                            if self.skip_bad_draws && attempt + 1 < MAX_ATTEMPTS =>
                        {
                            log::warn!("draw {i}: {e}; redrawing the inner sample");
                            attempt += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            })
            .collect()
    }
}

fn check_method(config: &RunConfig, model: &dyn Model) -> Result<()> {
    if config.uses_rp() && !model.supports_rp() {
        return Err(Error::Capability(format!(
            "model `{}` has no reparameterization chain; use a score-function method",
            model.name()
        )));
    }
    if config.method == Method::Vbsl && model.abc().is_none() {
        return Err(Error::Capability(format!(
            "model `{}` has no summary statistics for VBSL",
            model.name()
        )));
    }
    Ok(())
}

struct Optimizer {
    rule: LearningRate,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    fn new(rule: LearningRate, d: usize) -> Self {
        Optimizer {
            rule,
            m: vec![0.0; d],
            v: vec![0.0; d],
            steps: 0,
        }
    }

    /// Ascent step for the gradient at iteration `t`.
    fn step(&mut self, t: usize, grad: &[f64]) -> Vec<f64> {
        match self.rule {
            LearningRate::RobbinsMonro { a, b } => {
                let rho = a / (t as f64 + b);
                grad.iter().map(|g| rho * g).collect()
            }
            LearningRate::Adam { step, beta1, beta2, eps } => {
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                grad.iter()
                    .enumerate()
                    .map(|(k, g)| {
                        self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
                        self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
                        step * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

struct EarlyStopState {
    rule: EarlyStop,
    previous: Option<f64>,
    stalls: usize,
}

impl EarlyStopState {
    /// Checks at the end of each full window; true when the windowed mean
    /// has improved by less than `tol` for `patience` windows in a row.
    fn should_stop(&mut self, series: &[f64]) -> bool {
        let w = self.rule.window;
        if series.len() % w != 0 {
            return false;
        }
        let mean = series[series.len() - w..].iter().sum::<f64>() / w as f64;
        if let Some(prev) = self.previous {
            if mean - prev < self.rule.tol {
                self.stalls += 1;
            } else {
                self.stalls = 0;
            }
        }
        self.previous = Some(mean);
        self.stalls >= self.rule.patience
    }
}

fn score_rows(params: &VariationalParams, draws: &[Draw]) -> Result<Vec<Vec<f64>>> {
    let sf = params.to_sf()?;
    Ok(draws.iter().map(|d| sf.score(&d.theta)).collect())
}

type Contributions = (Vec<Vec<f64>>, Vec<f64>, Option<Vec<Vec<f64>>>);

/// Per-draw gradient contributions in `λ`, the payoffs `ξ_i` and, for
/// score-function methods, the scores.
fn contributions(
    config: &RunConfig,
    model: &dyn Model,
    params: &VariationalParams,
    draws: &[Draw],
    cv: &ControlVariate,
) -> Result<Contributions> {
    let xi: Vec<f64> = draws
        .iter()
        .map(|dr| dr.loglik + model.prior_logpdf(&dr.theta) - params.logq(&dr.theta))
        .collect();
    if config.uses_rp() {
        let rp = params.to_rp()?;
        let rows = draws
            .iter()
            .map(|dr| {
                let lg = dr.loglik_grad.as_ref().ok_or_else(|| {
                    Error::Capability("reparameterization draw is missing its gradient".into())
                })?;
                let prior = model.prior_grad(&dr.theta);
                let q = rp.grad_logq_theta(&dr.theta);
                let g: Vec<f64> = (0..lg.len()).map(|k| lg[k] + prior[k] - q[k]).collect();
                Ok(rp_assemble(&g, &dr.z))
            })
            .collect::<Result<_>>()?;
        Ok((rows, xi, None))
    } else {
        let scores = score_rows(params, draws)?;
        let rows = scores
            .iter()
            .zip(&xi)
            .map(|(s, x)| s.iter().zip(&cv.c).map(|(sk, ck)| sk * (x - ck)).collect())
            .collect();
        Ok((rows, xi, Some(scores)))
    }
}

/// Mean gradient and the payoffs for one batch of draws.
fn gradient(
    config: &RunConfig,
    model: &dyn Model,
    params: &VariationalParams,
    draws: &[Draw],
    cv: &ControlVariate,
) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<Vec<f64>>>)> {
    let (rows, xi, scores) = contributions(config, model, params, draws, cv)?;
    let n = rows.len() as f64;
    let mut grad = vec![0.0; lambda_len(params.dim())];
    for r in &rows {
        for (a, b) in grad.iter_mut().zip(r) {
            *a += b / n;
        }
    }
    Ok((grad, xi, scores))
}

/// Runs the configured method on the model the config describes.
pub fn run(config: &RunConfig) -> Result<RunTrace> {
    let model = config.model.build()?;
    run_with(config, model.as_ref(), &RunOptions::default())
}

/// Score-function MLMC (the `t = 0` iteration only initialises the control
/// variate).
pub fn run_sf(config: &RunConfig, model: &dyn Model) -> Result<RunTrace> {
    if config.method != Method::SfMlmc {
        return Err(Error::Config("run_sf needs method = sf_mlmc".into()));
    }
    run_with(config, model, &RunOptions::default())
}

/// Reparameterization MLMC.
pub fn run_rp(config: &RunConfig, model: &dyn Model) -> Result<RunTrace> {
    if config.method != Method::RpMlmc {
        return Err(Error::Config("run_rp needs method = rp_mlmc".into()));
    }
    run_with(config, model, &RunOptions::default())
}

pub fn run_with(config: &RunConfig, model: &dyn Model, options: &RunOptions) -> Result<RunTrace> {
    config.validate()?;
    check_method(config, model)?;
    let p = model.param_dim();
    let mut params = config.initial_params(p)?;
    let d = lambda_len(p);
    let rp = config.uses_rp();
    let payoff = Payoff::for_config(config);
    let mut cv = ControlVariate::zeros(d);
    let mut cv_fitted = false;
    let mut optimizer = Optimizer::new(config.learning_rate, d);
    let mut early = config.early_stop.map(|rule| EarlyStopState {
        rule,
        previous: None,
        stalls: 0,
    });
    let mut records = Vec::with_capacity(config.iterations);
    let mut series = Vec::with_capacity(config.iterations);
    let mut cumulative = 0u64;
    let mut stopped_early = false;
    let started = Instant::now();

    for t in 0..config.iterations {
        let seeds = SeedLineage::new(config.seed, t, 0);
        let plan = DrawPlan {
            model,
            payoff,
            placement: config.placement,
            seeds,
            samples: config.outer_samples,
            with_grad: rp,
            skip_bad_draws: config.skip_bad_draws,
        };
        let normals = match options.outer_normals {
            Some(f) => (0..config.outer_samples).map(|i| f(t, i)).collect(),
            None => plan.outer_normals()?,
        };
        let draws = plan
            .evaluate(&params, normals)
            .map_err(|e| e.in_iteration(t))?;
        let (grad, xi, scores) = gradient(config, model, &params, &draws, &cv)?;
        let (elbo, se) = mean_and_se(&xi);
        let fresh_elbo = if config.fresh_elbo {
            let fresh = DrawPlan {
                seeds: SeedLineage::new(config.seed, t, TAG_FRESH),
                with_grad: false,
                ..plan
            };
            let normals = fresh.outer_normals()?;
            let fd = fresh.evaluate(&params, normals).map_err(|e| e.in_iteration(t))?;
            let vals: Vec<f64> = fd
                .iter()
                .map(|dr| dr.loglik + model.prior_logpdf(&dr.theta) - params.logq(&dr.theta))
                .collect();
            Some(mean_and_se(&vals).0)
        } else {
            None
        };

        let lambda = params.to_lambda();
        let skip_update = !rp && t == 0;
        let mut clamped = 0;
        if !skip_update {
            let step = optimizer.step(t, &grad);
            clamped = params.apply_step(&step).map_err(|e| e.in_iteration(t))?;
            if clamped > 0 {
                log::debug!("iteration {t}: clamped {clamped} Cholesky diagonal entries");
            }
        }
        if config.control_variates && !rp {
            if let Some(scores) = &scores {
                cv = ControlVariate::fit(scores, &xi).unwrap_or_else(|_| ControlVariate::zeros(d));
                cv_fitted = true;
            }
        }

        let cost: u64 = draws.iter().map(|dr| dr.cost).sum();
        cumulative += cost;
        let record = IterationRecord {
            iteration: t,
            lambda,
            grad_norm: grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            elbo,
            elbo_se: se.is_finite().then_some(se),
            fresh_elbo,
            cost,
            cumulative_cost: cumulative,
            max_level: draws.iter().map(|dr| dr.level).max().unwrap_or(0),
            resampled: draws.iter().map(|dr| dr.resampled).sum(),
            clamped,
            seeds,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "iteration {t}: elbo {:.4} |grad| {:.3e} cost {}",
            record.elbo,
            record.grad_norm,
            record.cost
        );
        series.push(fresh_elbo.unwrap_or(elbo));
        records.push(record);
        if let Some(es) = early.as_mut() {
            if es.should_stop(&series) {
                log::info!("early stop after {} iterations", t + 1);
                stopped_early = true;
                break;
            }
        }
    }

    Ok(RunTrace {
        config: config.clone(),
        records,
        final_params: params,
        control_variate: cv_fitted.then_some(cv),
        stopped_early,
    })
}

/// Draws `S` payoffs `ξ_i` at fixed parameters with the config's estimator,
/// placement and seed. Used for ELBO estimation and variance diagnostics.
pub(crate) fn payoff_draws(
    model: &dyn Model,
    params: &VariationalParams,
    payoff: Payoff,
    placement: Placement,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let plan = DrawPlan {
        model,
        payoff,
        placement,
        seeds: SeedLineage::new(seed, 0, TAG_FRESH),
        samples,
        with_grad: false,
        skip_bad_draws: false,
    };
    let draws = plan.evaluate(params, plan.outer_normals()?)?;
    Ok(draws
        .iter()
        .map(|dr| dr.loglik + model.prior_logpdf(&dr.theta) - params.logq(&dr.theta))
        .collect())
}

/// Per-draw gradient contributions at fixed parameters (no control
/// variate), as the first iteration of a run would compute them. Their mean
/// is the iteration's gradient.
pub fn gradient_draws(
    config: &RunConfig,
    model: &dyn Model,
    params: &VariationalParams,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_method(config, model)?;
    let params = if config.uses_rp() {
        VariationalParams::Rp(params.to_rp()?)
    } else {
        VariationalParams::Sf(params.to_sf()?)
    };
    let plan = DrawPlan {
        model,
        payoff: Payoff::for_config(config),
        placement: config.placement,
        seeds: SeedLineage::new(seed, 0, 0),
        samples: config.outer_samples,
        with_grad: config.uses_rp(),
        skip_bad_draws: config.skip_bad_draws,
    };
    let draws = plan.evaluate(&params, plan.outer_normals()?)?;
    let d = lambda_len(params.dim());
    Ok(contributions(config, model, &params, &draws, &ControlVariate::zeros(d))?.0)
}

/// Mean of [`gradient_draws`].
pub fn gradient_at(
    config: &RunConfig,
    model: &dyn Model,
    params: &VariationalParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let rows = gradient_draws(config, model, params, seed)?;
    let n = rows.len() as f64;
    Ok((0..rows[0].len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::config::ModelConfig;
    use crate::models::{GAndK, ToyAbc};

    fn toy() -> ToyAbc {
        ToyAbc::zeros(4, 0.1).unwrap()
    }

    #[test]
    fn single_iteration_sf_leaves_lambda_unchanged() {
        let mut cfg = RunConfig::toy(Method::SfMlmc, 1, 3);
        cfg.control_variates = true;
        let tr = run_sf(&cfg, &toy()).unwrap();
        assert_eq!(tr.records.len(), 1);
        assert_eq!(tr.final_params.to_lambda(), tr.records[0].lambda);
        assert!(tr.control_variate.is_some());
    }

    #[test]
    fn same_seed_same_trace() {
        for placement in Placement::ALL {
            let mut cfg = RunConfig::toy(Method::RpMlmc, 5, 11);
            cfg.outer_samples = 8;
            cfg.placement = placement;
            let a = run_rp(&cfg, &toy()).unwrap();
            let b = run_rp(&cfg, &toy()).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn cumulative_cost_is_monotone_and_matches_draws() {
        let mut cfg = RunConfig::toy(Method::SfMlmc, 20, 2);
        cfg.outer_samples = 10;
        let tr = run_sf(&cfg, &toy()).unwrap();
        let mut prev = 0;
        for r in &tr.records {
            assert!(r.cumulative_cost >= prev);
            assert_eq!(r.cumulative_cost, prev + r.cost);
            prev = r.cumulative_cost;
        }
    }

    #[test]
    fn zero_u_keeps_theta_at_mean() {
        let mut cfg = RunConfig::toy(Method::RpMlmc, 4, 5);
        cfg.outer_samples = 6;
        let zeros = |_: usize, _: usize| vec![0.0];
        let opts = RunOptions {
            outer_normals: Some(&zeros),
        };
        let tr = run_with(&cfg, &toy(), &opts).unwrap();
        for w in tr.records.windows(2) {
            assert_eq!(w[0].lambda[1], w[1].lambda[1]);
        }
        assert_ne!(tr.records[0].lambda[0], tr.records[3].lambda[0]);
    }

    #[test]
    fn rp_on_gk_is_a_capability_error() {
        let mut cfg = RunConfig::toy(Method::RpMlmc, 2, 1);
        cfg.model = ModelConfig::Gk {
            t: 100,
            h: 1.0,
            observed: None,
        };
        let m = GAndK::with_reference_summary(100, 1.0).unwrap();
        assert!(matches!(run_rp(&cfg, &m), Err(Error::Capability(_))));
        assert!(matches!(run_sf(&cfg, &m), Err(Error::Config(_))));
    }

    #[test]
    fn adam_and_early_stop() {
        let mut cfg = RunConfig::toy(Method::RpMlmc, 400, 9);
        cfg.outer_samples = 10;
        cfg.learning_rate = LearningRate::Adam {
            step: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        cfg.early_stop = Some(EarlyStop {
            window: 20,
            tol: 1e9,
            patience: 2,
        });
        let tr = run_rp(&cfg, &toy()).unwrap();
        assert!(tr.stopped_early);
        assert_eq!(tr.records.len(), 60);
    }

    #[test]
    fn vbil_and_vbsl_run() {
        let mut cfg = RunConfig::toy(Method::Vbil, 10, 1);
        cfg.outer_samples = 10;
        assert!(run(&cfg).is_ok());
        cfg.vbil_form = crate::baselines::VbilForm::Reparameterization;
        assert!(run(&cfg).is_ok());
        cfg.method = Method::Vbsl;
        cfg.plugin_n = 20;
        let tr = run(&cfg).unwrap();
        assert!(tr.records.iter().all(|r| r.cost == 200));
    }
}
