use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::VbilForm;
use crate::gaussian::{RpParams, VariationalParams};
use crate::mlmc::LevelDistribution;
use crate::models::{load_sixcity, GAndK, Glmm, Model, ToyAbc};
use crate::qmc::StreamKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SfMlmc,
    RpMlmc,
    Vbil,
    Vbsl,
}

/// Where scrambled nets replace pseudorandom points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Inner,
    Outer,
    Both,
}

impl Placement {
    pub const ALL: [Placement; 4] = [Placement::None, Placement::Inner, Placement::Outer, Placement::Both];

    pub fn inner_kind(&self) -> StreamKind {
        match self {
            Placement::Inner | Placement::Both => StreamKind::ScrambledNet,
            _ => StreamKind::Pseudorandom,
        }
    }

    pub fn outer_kind(&self) -> StreamKind {
        match self {
            Placement::Outer | Placement::Both => StreamKind::ScrambledNet,
            _ => StreamKind::Pseudorandom,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Placement::None => "none",
            Placement::Inner => "inner",
            Placement::Outer => "outer",
            Placement::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearningRate {
    /// `ρ_t = a / (t + b)`.
    RobbinsMonro { a: f64, b: f64 },
    Adam {
        step: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate::RobbinsMonro { a: 1.0, b: 5.0 }
    }
}

impl LearningRate {
    fn validate(&self) -> Result<()> {
        match *self {
            LearningRate::RobbinsMonro { a, b } => {
                if !(a > 0.0 && b > 0.0) {
                    return Err(Error::Config(format!(
                        "Robbins-Monro schedule needs a, b > 0, got a = {a}, b = {b}"
                    )));
                }
            }
            LearningRate::Adam { step, beta1, beta2, eps } => {
                if !(step > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err(Error::Config("invalid Adam settings".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Toy {
        #[serde(default = "toy_n")]
        n: usize,
        #[serde(default = "toy_h")]
        h: f64,
        /// Observations; `n` zeros when absent.
        #[serde(default)]
        y_star: Option<Vec<f64>>,
    },
    Gk {
        #[serde(default = "gk_t")]
        t: usize,
        h: f64,
        #[serde(default)]
        observed: Option<Vec<f64>>,
    },
    Glmm {
        /// Six-city CSV; the bundled synthetic fixture when absent.
        #[serde(default)]
        data: Option<PathBuf>,
    },
}

fn toy_n() -> usize {
    4
}
fn toy_h() -> f64 {
    0.1
}
fn gk_t() -> usize {
    1000
}

impl ModelConfig {
    pub fn build(&self) -> Result<Box<dyn Model>> {
        Ok(match self {
            ModelConfig::Toy { n, h, y_star } => {
                let y = y_star.clone().unwrap_or_else(|| vec![0.0; *n]);
                if y.len() != *n {
                    return Err(Error::Config(format!("y_star has {} entries but n = {n}", y.len())));
                }
                Box::new(ToyAbc::new(y, *h)?)
            }
            ModelConfig::Gk { t, h, observed } => match observed {
                Some(o) => Box::new(GAndK::new(*t, *h, o.clone())?),
                None => Box::new(GAndK::with_reference_summary(*t, *h)?),
            },
            ModelConfig::Glmm { data } => match data {
                Some(path) => Box::new(Glmm::new(load_sixcity(path)?)?),
                None => Box::new(Glmm::bundled_fixture()?),
            },
        })
    }
}

/// Initial `q = N(mean, sd² I)`, or explicit parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default = "unit")]
    pub sd: f64,
    #[serde(default)]
    pub params: Option<VariationalParams>,
}

fn unit() -> f64 {
    1.0
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mean: Vec::new(),
            sd: 1.0,
            params: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    #[serde(default = "window")]
    pub window: usize,
    pub tol: f64,
    #[serde(default = "patience")]
    pub patience: usize,
}

fn window() -> usize {
    50
}
fn patience() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub method: Method,
    pub levels: LevelDistribution,
    pub outer_samples: usize,
    #[serde(default = "none_placement")]
    pub placement: Placement,
    #[serde(default)]
    pub learning_rate: LearningRate,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub control_variates: bool,
    #[serde(default)]
    pub init: InitConfig,
    /// Inner sample size of the plug-in baselines (VBIL and VBSL).
    #[serde(default = "plugin_n")]
    pub plugin_n: usize,
    #[serde(default = "vbil_form")]
    pub vbil_form: VbilForm,
    #[serde(default)]
    pub fresh_elbo: bool,
    #[serde(default)]
    pub skip_bad_draws: bool,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    /// Iterations averaged for the final ELBO summary.
    #[serde(default = "tail_window")]
    pub tail_window: usize,
}

fn none_placement() -> Placement {
    Placement::None
}
fn plugin_n() -> usize {
    16
}
fn vbil_form() -> VbilForm {
    VbilForm::ScoreFunction
}
fn tail_window() -> usize {
    50
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_samples == 0 {
            return Err(Error::Config("outer_samples must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.plugin_n == 0 {
            return Err(Error::Config("plugin_n must be at least 1".into()));
        }
        if self.init.params.is_none() && !(self.init.sd > 0.0) {
            return Err(Error::Config("init.sd must be positive".into()));
        }
        if let Some(es) = &self.early_stop {
            if es.window == 0 || es.patience == 0 {
                return Err(Error::Config("early_stop window and patience must be positive".into()));
            }
        }
        self.learning_rate.validate()
    }

    /// Whether the method works on `(μ, vech(L))`.
    pub fn uses_rp(&self) -> bool {
        match self.method {
            Method::RpMlmc => true,
            Method::Vbil => self.vbil_form == VbilForm::Reparameterization,
            _ => false,
        }
    }

    /// Initial parameters in the parameterization the method needs.
    pub fn initial_params(&self, p: usize) -> Result<VariationalParams> {
        let base = match &self.init.params {
            Some(v) => v.clone(),
            None => {
                let mean = if self.init.mean.is_empty() {
                    vec![0.0; p]
                } else {
                    self.init.mean.clone()
                };
                VariationalParams::Rp(RpParams::isotropic(mean, self.init.sd)?)
            }
        };
        if base.dim() != p {
            return Err(Error::Config(format!(
                "initial mean has dimension {}, model needs {p}",
                base.dim()
            )));
        }
        Ok(if self.uses_rp() {
            VariationalParams::Rp(base.to_rp()?)
        } else {
            VariationalParams::Sf(base.to_sf()?)
        })
    }

    /// Loads TOML or JSON, picked by extension (JSON for `.json`). A run
    /// summary (which embeds its config under `config`) is also accepted.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg = if is_json { Self::from_json(&text)? } else { Self::from_toml(&text)? };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("final_params").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Toy ABC with the replication settings: `S = 100`, `M_0 = 100`,
    /// `ρ_t = 1/(5+t)`, `α = 1.3` (SF) or `1.1` (RP), start `N(ȳ*, 1)`.
    pub fn toy(method: Method, iterations: usize, seed: u64) -> Self {
        let alpha = if method == Method::RpMlmc { 1.1 } else { 1.3 };
        RunConfig {
            model: ModelConfig::Toy {
                n: 4,
                h: 0.1,
                y_star: None,
            },
            method,
            levels: LevelDistribution::new(alpha, 100).expect("valid level law"),
            outer_samples: 100,
            placement: Placement::None,
            learning_rate: LearningRate::default(),
            iterations,
            seed,
            control_variates: method == Method::SfMlmc,
            init: InitConfig {
                mean: vec![0.0],
                sd: 1.0,
                params: None,
            },
            plugin_n: 100,
            vbil_form: VbilForm::ScoreFunction,
            fresh_elbo: false,
            skip_bad_draws: false,
            early_stop: None,
            tail_window: 50,
        }
    }

    /// Six-city GLMM with `M_0 = 8`, `α = 1.4`, RP gradients, start
    /// `N(0, I)` and Adam steps of 0.02 (the gradient is a sum over 537
    /// children, too large for `1/(5+t)`).
    pub fn glmm(method: Method, iterations: usize, seed: u64) -> Self {
        RunConfig {
            model: ModelConfig::Glmm { data: None },
            method,
            levels: LevelDistribution::new(1.4, 8).expect("valid level law"),
            outer_samples: 32,
            placement: Placement::None,
            learning_rate: LearningRate::Adam {
                step: 0.02,
                beta1: beta1(),
                beta2: beta2(),
                eps: adam_eps(),
            },
            iterations,
            seed,
            control_variates: false,
            init: InitConfig {
                mean: vec![0.0; 4],
                sd: 1.0,
                params: None,
            },
            plugin_n: 16,
            vbil_form: VbilForm::Reparameterization,
            fresh_elbo: false,
            skip_bad_draws: false,
            early_stop: None,
            tail_window: 100,
        }
    }
}
