//! Stochastic-gradient driver, ELBO estimation, diagnostics, configuration
//! and run artifacts.
//!
//! Every iteration derives its streams from `(seed, iteration)` alone, the
//! `S` draws run in parallel and all reductions are taken in draw order, so a
//! config and seed determine the whole trace.

mod config;
mod diagnostics;
mod elbo;
mod report;
mod run;

pub use config::{EarlyStop, InitConfig, LearningRate, Method, ModelConfig, Placement, RunConfig};
pub use diagnostics::{block_means, decay_rates, variance_table, write_decay_csv, DecaySweep, GradientForm, VarianceTable};
pub use elbo::{estimate_elbo, estimate_plugin_objective, ElboEstimate};
pub use report::{density_grid, report, write_trace_csv, DensityGrid, GridRow, ReportFiles, RunSummary};
pub use run::{gradient_at, gradient_draws, run, run_rp, run_sf, run_with, IterationRecord, RunOptions, RunTrace, SeedLineage};
