use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::diagnostics::csv_error;
use super::run::RunTrace;
use crate::gaussian::VariationalParams;
use crate::numerics::normal_pdf;
use crate::{Error, Result};

const GRID_POINTS: usize = 201;

/// JSON run summary. Its `config` field loads back through
/// [`RunConfig::load`] for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub final_params: VariationalParams,
    pub final_mean: Vec<f64>,
    pub final_sd: Vec<f64>,
    pub iterations: usize,
    pub stopped_early: bool,
    pub total_cost: u64,
    pub mean_cost_per_draw: f64,
    /// Closed-form expected cost per draw of the level law, when finite.
    pub expected_cost: Option<f64>,
    pub tail_window: usize,
    pub tail_elbo: f64,
    pub tail_elbo_se: Option<f64>,
    pub resampled_draws: usize,
    pub clamped_entries: usize,
    /// Largest absolute gap between a `q` marginal and the reference curve.
    pub max_density_gap: Option<f64>,
}

impl RunSummary {
    pub fn from_trace(trace: &RunTrace) -> Result<Self> {
        if trace.records.is_empty() {
            return Err(Error::Config("cannot summarise an empty trace".into()));
        }
        let (tail, se) = trace.tail_elbo(trace.config.tail_window)?;
        let draws = trace.draws().max(1) as f64;
        Ok(RunSummary {
            config: trace.config.clone(),
            final_params: trace.final_params.clone(),
            final_mean: trace.final_params.mean().to_vec(),
            final_sd: trace.final_params.std_devs(),
            iterations: trace.records.len(),
            stopped_early: trace.stopped_early,
            total_cost: trace.total_cost(),
            mean_cost_per_draw: trace.total_cost() as f64 / draws,
            expected_cost: trace.config.levels.expected_cost().ok(),
            tail_window: trace.config.tail_window,
            tail_elbo: tail,
            tail_elbo_se: se.is_finite().then_some(se),
            resampled_draws: trace.records.iter().map(|r| r.resampled).sum(),
            clamped_entries: trace.records.iter().map(|r| r.clamped).sum(),
            max_density_gap: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes the per-iteration trace; wall-clock time is left out so the file
/// is identical across replays.
pub fn write_trace_csv(trace: &RunTrace, path: &Path) -> Result<()> {
    if trace.records.is_empty() {
        return Err(Error::Config("cannot write an empty trace".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let d = trace.records[0].lambda.len();
    let mut header: Vec<String> = [
        "iteration",
        "elbo",
        "elbo_se",
        "fresh_elbo",
        "grad_norm",
        "cost",
        "cumulative_cost",
        "max_level",
        "resampled",
        "clamped",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..d).map(|i| format!("lambda_{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &trace.records {
        let mut rec = vec![
            r.iteration.to_string(),
            r.elbo.to_string(),
            opt(r.elbo_se),
            opt(r.fresh_elbo),
            r.grad_norm.to_string(),
            r.cost.to_string(),
            r.cumulative_cost.to_string(),
            r.max_level.to_string(),
            r.resampled.to_string(),
            r.clamped.to_string(),
        ];
        rec.extend(r.lambda.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub coordinate: usize,
    pub x: f64,
    pub q: f64,
    pub reference: Option<f64>,
    pub kde: Option<f64>,
}

/// Marginal densities of `q` on a grid per coordinate, with an optional
/// Gaussian reference curve and a kernel density estimate of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub rows: Vec<GridRow>,
    pub max_reference_gap: Option<f64>,
}

/// Silverman's rule-of-thumb bandwidth.
fn silverman(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((n - 1.0) * p).round() as usize];
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    0.9 * spread.max(1e-12) * n.powf(-0.2)
}

pub fn density_grid(
    params: &VariationalParams,
    reference: Option<&[(f64, f64)]>,
    samples: Option<&[Vec<f64>]>,
) -> Result<DensityGrid> {
    let p = params.dim();
    if let Some(r) = reference {
        if r.len() != p {
            return Err(Error::Config(format!("reference has {} marginals, q has {p}", r.len())));
        }
    }
    let mean = params.mean();
    let sd = params.std_devs();
    let mut rows = Vec::with_capacity(p * GRID_POINTS);
    let mut gap: Option<f64> = None;
    for i in 0..p {
        let mut lo = mean[i] - 5.0 * sd[i];
        let mut hi = mean[i] + 5.0 * sd[i];
        if let Some(r) = reference {
            lo = lo.min(r[i].0 - 5.0 * r[i].1);
            hi = hi.max(r[i].0 + 5.0 * r[i].1);
        }
        let column: Option<Vec<f64>> = samples.map(|s| s.iter().map(|t| t[i]).collect());
        let bw = column.as_deref().filter(|c| c.len() > 1).map(silverman);
        for k in 0..GRID_POINTS {
            let x = lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64;
            let q = normal_pdf((x - mean[i]) / sd[i]) / sd[i];
            let reference = reference.map(|r| normal_pdf((x - r[i].0) / r[i].1) / r[i].1);
            if let Some(rv) = reference {
                let g = (q - rv).abs();
                gap = Some(gap.map_or(g, |m| m.max(g)));
            }
            let kde = match (&column, bw) {
                (Some(c), Some(h)) => {
                    Some(c.iter().map(|v| normal_pdf((x - v) / h)).sum::<f64>() / (c.len() as f64 * h))
                }
                _ => None,
            };
            rows.push(GridRow {
                coordinate: i,
                x,
                q,
                reference,
                kde,
            });
        }
    }
    Ok(DensityGrid {
        rows,
        max_reference_gap: gap,
    })
}

impl DensityGrid {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Paths written by [`report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub trace: PathBuf,
    pub density: PathBuf,
    pub summary: PathBuf,
}

/// Writes `trace.csv`, `density.csv` and `summary.json` into `out_dir`.
pub fn report(
    trace: &RunTrace,
    reference: Option<&[(f64, f64)]>,
    samples: Option<&[Vec<f64>]>,
    out_dir: &Path,
) -> Result<(RunSummary, ReportFiles)> {
    let mut summary = RunSummary::from_trace(trace)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        trace: out_dir.join("trace.csv"),
        density: out_dir.join("density.csv"),
        summary: out_dir.join("summary.json"),
    };
    write_trace_csv(trace, &files.trace)?;
    let grid = density_grid(&trace.final_params, reference, samples)?;
    grid.write_csv(&files.density)?;
    summary.max_density_gap = grid.max_reference_gap;
    summary.write(&files.summary)?;
    Ok((summary, files))
}
