use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Placement, RunConfig};
use super::run::gradient_at;
use crate::gaussian::{lambda_len, rp_assemble, VariationalParams};
use crate::mlmc::{correction, fit_decay, DecayFit, LevelDistribution};
use crate::models::Model;
use crate::numerics::{mean_and_se, sample_variance, uniform_to_normal};
use crate::qmc::{derive_seed, PointStream};
use crate::{Error, Result};

/// Which gradient correction the decay sweep measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientForm {
    /// `Δψ_ℓ² · |∇_λ log q(θ)|²`.
    Score,
    /// `|(Δψ̃_ℓ, vech(Δψ̃_ℓ uᵀ))|²`.
    Reparameterization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySweep {
    pub placement: Placement,
    pub elbo: DecayFit,
    pub gradient: DecayFit,
}

/// Measures `E[Δψ_ℓ²]` and the matching gradient quantity for levels
/// `1..=max_level` with `θ ~ q`. The same `replicates` outer draws are reused
/// at every level; inner draws are independent across levels and replicates.
#[allow(clippy::too_many_arguments)]
pub fn decay_rates(
    model: &dyn Model,
    params: &VariationalParams,
    m0: usize,
    max_level: usize,
    replicates: usize,
    placement: Placement,
    form: GradientForm,
    seed: u64,
) -> Result<DecaySweep> {
    if max_level < 3 || replicates < 100 {
        return Err(Error::Config(format!(
            "decay sweep needs L >= 3 and at least 100 replicates, got L = {max_level}, R = {replicates}"
        )));
    }
    let with_grad = form == GradientForm::Reparameterization;
    if with_grad && !model.supports_rp() {
        return Err(Error::Capability(format!(
            "model `{}` has no reparameterization chain",
            model.name()
        )));
    }
    let dist = LevelDistribution::with_max_level(1.0, m0, max_level)?;
    let p = model.param_dim();
    let outer = PointStream::new(placement.outer_kind(), p, derive_seed(&[seed, 1]))?.generate(replicates)?;
    let normals: Vec<Vec<f64>> = outer
        .rows()
        .map(|r| r.iter().map(|u| uniform_to_normal(*u)).collect())
        .collect();
    let inner = PointStream::new(placement.inner_kind(), model.inner_dim().max(1), derive_seed(&[seed, 2]))?;
    let sf = params.to_sf()?;
    let levels: Vec<usize> = (1..=max_level).collect();
    let mut elbo_draws = Vec::with_capacity(max_level);
    let mut grad_draws = Vec::with_capacity(max_level);
    for &level in &levels {
        let pairs: Vec<(f64, f64)> = normals
            .par_iter()
            .enumerate()
            .map(|(r, z)| {
                let theta = params.sample(z);
                let stream = inner.child(level as u64).child(r as u64);
                let c = correction(model, &theta, level, &dist, &stream, with_grad)?;
                let g = match &c.delta_grad {
                    Some(dg) => rp_assemble(dg, z).iter().map(|v| v * v).sum::<f64>(),
                    None => c.delta * c.delta * sf.score(&theta).iter().map(|v| v * v).sum::<f64>(),
                };
                Ok((c.delta * c.delta, g))
            })
            .collect::<Result<_>>()?;
        elbo_draws.push(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        grad_draws.push(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    }
    Ok(DecaySweep {
        placement,
        elbo: fit_decay(levels.clone(), &elbo_draws)?,
        gradient: fit_decay(levels, &grad_draws)?,
    })
}

/// Writes `level, placement, quantity, log2_second_moment, se` rows.
pub fn write_decay_csv(sweeps: &[DecaySweep], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["placement", "quantity", "level", "second_moment", "log2_second_moment", "std_error", "fitted_r"])
        .map_err(|e| csv_error(path, e))?;
    for s in sweeps {
        for (name, fit) in [("elbo", &s.elbo), ("gradient", &s.gradient)] {
            for k in 0..fit.levels.len() {
                w.write_record([
                    s.placement.label().to_string(),
                    name.to_string(),
                    fit.levels[k].to_string(),
                    fit.second_moments[k].to_string(),
                    fit.second_moments[k].log2().to_string(),
                    fit.std_errors[k].to_string(),
                    fit.r.to_string(),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serialization(format!("{}: {other:?}", path.display())),
    }
}

/// Per-coordinate variances of the gradient estimator at the initial `λ`,
/// one row per placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceTable {
    pub placements: Vec<Placement>,
    pub repetitions: usize,
    /// `variances[k][i]` for placement `k` and coordinate `i` of `λ`.
    pub variances: Vec<Vec<f64>>,
}

impl VarianceTable {
    pub fn row(&self, placement: Placement) -> Option<&[f64]> {
        self.placements
            .iter()
            .position(|p| *p == placement)
            .map(|k| self.variances[k].as_slice())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let d = self.variances.first().map_or(0, |v| v.len());
        let mut header = vec!["placement".to_string()];
        header.extend((0..d).map(|i| format!("lambda_{i}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (p, row) in self.placements.iter().zip(&self.variances) {
            let mut rec = vec![p.label().to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Repeats the first-iteration gradient `repetitions` times per placement,
/// with independent seeds, at the config's initial parameters.
pub fn variance_table(config: &RunConfig, model: &dyn Model, repetitions: usize) -> Result<VarianceTable> {
    if repetitions < 10 {
        return Err(Error::Config(format!(
            "variance table needs at least 10 repetitions, got {repetitions}"
        )));
    }
    let params = config.initial_params(model.param_dim())?;
    let d = lambda_len(model.param_dim());
    let mut variances = Vec::with_capacity(4);
    for placement in Placement::ALL {
        let mut cfg = config.clone();
        cfg.placement = placement;
        let grads = (0..repetitions)
            .map(|r| gradient_at(&cfg, model, &params, derive_seed(&[config.seed, r as u64])))
            .collect::<Result<Vec<_>>>()?;
        variances.push(
            (0..d)
                .map(|i| sample_variance(&grads.iter().map(|g| g[i]).collect::<Vec<_>>()))
                .collect(),
        );
    }
    Ok(VarianceTable {
        placements: Placement::ALL.to_vec(),
        repetitions,
        variances,
    })
}

/// Means and standard errors of consecutive blocks of `window` values; a
/// trailing partial block is dropped.
pub fn block_means(series: &[f64], window: usize) -> Vec<(f64, f64)> {
    if window == 0 {
        return Vec::new();
    }
    series.chunks_exact(window).map(mean_and_se).collect()
}
