use serde::{Deserialize, Serialize};

use super::config::Placement;
use super::run::{payoff_draws, Payoff};
use crate::gaussian::VariationalParams;
use crate::mlmc::LevelDistribution;
use crate::models::Model;
use crate::numerics::mean_and_se;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

fn summarize(values: &[f64]) -> ElboEstimate {
    let (value, std_error) = mean_and_se(values);
    ElboEstimate {
        value,
        std_error,
        samples: values.len(),
    }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::Config(format!("ELBO estimation needs S >= 2, got {samples}")));
    }
    Ok(())
}

/// Unbiased ELBO estimate from `S` single-term draws
/// `Δψ_I / w_I + log p(θ) - log q(θ)`.
pub fn estimate_elbo(
    params: &VariationalParams,
    model: &dyn Model,
    dist: &LevelDistribution,
    samples: usize,
    placement: Placement,
    seed: u64,
) -> Result<ElboEstimate> {
    check_samples(samples)?;
    let values = payoff_draws(model, params, Payoff::Mlmc(*dist), placement, samples, seed)?;
    Ok(summarize(&values))
}

/// The plug-in objective `E[log p̂_N + log p - log q]`, which lies below the
/// ELBO by the Jensen gap.
pub fn estimate_plugin_objective(
    params: &VariationalParams,
    model: &dyn Model,
    n: usize,
    samples: usize,
    placement: Placement,
    seed: u64,
) -> Result<ElboEstimate> {
    check_samples(samples)?;
    if n == 0 {
        return Err(Error::Config("plug-in objective needs N >= 1".into()));
    }
    let values = payoff_draws(model, params, Payoff::Plugin(n), placement, samples, seed)?;
    Ok(summarize(&values))
}
