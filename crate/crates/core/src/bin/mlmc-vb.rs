use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mlmc_vb::baselines::{abc_ar, write_samples_csv, AbcArConfig};
use mlmc_vb::engine::{
    decay_rates, estimate_elbo, estimate_plugin_objective, report, run, variance_table, write_decay_csv,
    GradientForm, Method, Placement, RunConfig, RunSummary,
};
use mlmc_vb::gaussian::VariationalParams;
use mlmc_vb::{Error, Result};

#[derive(Parser)]
#[command(name = "mlmc-vb", version, about = "Variational Bayes with unbiased multilevel Monte Carlo gradients")]
struct Cli {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a config and writes the trace, density grid and summary.
    Fit { config: PathBuf },
    /// Estimates the ELBO at the config's initial parameters, or at the final
    /// parameters of a run summary.
    Elbo {
        config: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Sweeps levels and fits the variance decay rate for each inner placement.
    Rates {
        config: PathBuf,
        #[arg(long, default_value_t = 7)]
        max_level: usize,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        #[arg(long, value_enum, default_value_t = Form::Auto)]
        form: Form,
    },
    /// Gradient variances at the initial parameters for the four placements.
    Variance {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        repetitions: usize,
    },
    /// Acceptance-rejection ABC samples for the config's model.
    AbcAr {
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        accepted: usize,
    },
    /// Re-runs the config embedded in a run summary.
    Replay { summary: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Auto,
    Score,
    Reparameterization,
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn fit(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    let model = cfg.model.build()?;
    let trace = run(cfg)?;
    let reference = model.reference_posterior();
    let (summary, files) = report(&trace, reference.as_deref(), None, out)?;
    log::info!("wrote {}", files.summary.display());
    println!(
        "iterations {}  tail ELBO {:.4}  mean {:?}  sd {:?}  cost {}",
        summary.iterations, summary.tail_elbo, summary.final_mean, summary.final_sd, summary.total_cost
    );
    Ok(summary)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { config } => {
            fit(&load(&config, cli.seed)?, &cli.out_dir)?;
        }
        Command::Replay { summary } => {
            let cfg = load(&summary, cli.seed)?;
            let text = std::fs::read_to_string(&summary).map_err(|e| Error::Io {
                path: summary.clone(),
                source: e,
            })?;
            let previous: RunSummary =
                serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
            let now = fit(&cfg, &cli.out_dir)?;
            if now.final_params == previous.final_params {
                println!("replay reproduced the recorded parameters");
            } else {
                println!("replay differs from the recorded parameters");
            }
        }
        Command::Elbo {
            config,
            params,
            samples,
        } => {
            let cfg = load(&config, cli.seed)?;
            let model = cfg.model.build()?;
            let q: VariationalParams = match params {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    let s: RunSummary =
                        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
                    s.final_params
                }
                None => cfg.initial_params(model.param_dim())?,
            };
            let e = match cfg.method {
                Method::Vbil => {
                    estimate_plugin_objective(&q, model.as_ref(), cfg.plugin_n, samples, cfg.placement, cfg.seed)?
                }
                _ => estimate_elbo(&q, model.as_ref(), &cfg.levels, samples, cfg.placement, cfg.seed)?,
            };
            println!("{}", serde_json::to_string(&e).map_err(|e| Error::Serialization(e.to_string()))?);
        }
        Command::Rates {
            config,
            max_level,
            replicates,
            form,
        } => {
            let cfg = load(&config, cli.seed)?;
            let model = cfg.model.build()?;
            let q = cfg.initial_params(model.param_dim())?;
            let form = match form {
                Form::Score => GradientForm::Score,
                Form::Reparameterization => GradientForm::Reparameterization,
                Form::Auto if model.supports_rp() => GradientForm::Reparameterization,
                Form::Auto => GradientForm::Score,
            };
            let mut sweeps = Vec::new();
            for placement in [Placement::Outer, Placement::Both] {
                let s = decay_rates(
                    model.as_ref(),
                    &q,
                    cfg.levels.m0(),
                    max_level,
                    replicates,
                    placement,
                    form,
                    cfg.seed,
                )?;
                let inner = if placement == Placement::Both { "rqmc" } else { "mc" };
                println!("inner {inner}: r_elbo = {:.3}, r_gradient = {:.3}", s.elbo.r, s.gradient.r);
                s.gradient.check_alpha(cfg.levels.alpha());
                sweeps.push(s);
            }
            create(&cli.out_dir)?;
            write_decay_csv(&sweeps, &cli.out_dir.join("rates.csv"))?;
        }
        Command::Variance { config, repetitions } => {
            let cfg = load(&config, cli.seed)?;
            let model = cfg.model.build()?;
            let table = variance_table(&cfg, model.as_ref(), repetitions)?;
            create(&cli.out_dir)?;
            table.write_csv(&cli.out_dir.join("variance.csv"))?;
            for (p, row) in table.placements.iter().zip(&table.variances) {
                println!("{:>6}: {:?}", p.label(), row);
            }
        }
        Command::AbcAr { config, accepted } => {
            let cfg = load(&config, cli.seed)?;
            let model = cfg.model.build()?;
            let abc = model
                .abc()
                .ok_or_else(|| Error::Capability(format!("model `{}` is not an ABC model", model.name())))?;
            let ar = abc_ar(
                abc,
                &AbcArConfig {
                    n_accepted: accepted,
                    ..Default::default()
                },
                cfg.seed,
            )?;
            create(&cli.out_dir)?;
            write_samples_csv(&ar.samples, &cli.out_dir.join("abc_samples.csv"))?;
            println!(
                "accepted {} of {} proposals (rate {:.3e})",
                ar.samples.len(),
                ar.proposals,
                ar.acceptance_rate()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
