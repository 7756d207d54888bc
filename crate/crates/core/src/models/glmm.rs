//! Random-intercept logistic regression (the six-city wheeze model).
//!
//! `logit P(y_ij = 1) = β1 + β2 A_ij + β3 S_i + α_i`, `α_i ~ N(0, τ²)`.
//! Parameters are `θ = (β1, β2, β3, log τ²)`; the likelihood factorises over
//! children, and each factor is an expectation over `α_i = τ Φ⁻¹(v)` with
//! `s = 1`. Priors: `β ~ N(0, 50 I)` and `τ ~ Gamma(shape 1, rate 0.1)`, the
//! latter carried to `log τ²` with its Jacobian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::numerics::{ln_2pi, uniform_to_normal};
use crate::qmc::PointStream;
use crate::{Error, Result};

const BETA_PRIOR_VAR: f64 = 50.0;
const TAU_RATE: f64 = 0.1;
const VISITS: usize = 4;
/// Centred ages of the four visits (7 to 10 years, centred at 9).
const AGES: [f64; VISITS] = [-2.0, -1.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Child {
    pub id: u64,
    pub y: Vec<u8>,
    pub age: Vec<f64>,
    pub smoking: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SixCityData {
    pub children: Vec<Child>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: u64,
    visit: usize,
    y: i64,
    age_centered: f64,
    smoking: f64,
}

impl SixCityData {
    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn response_rate(&self) -> f64 {
        let (ones, total) = self.children.iter().fold((0usize, 0usize), |(o, t), c| {
            (o + c.y.iter().filter(|v| **v == 1).count(), t + c.y.len())
        });
        ones as f64 / total as f64
    }
}

/// Reads the `id, visit, y, age_centered, smoking` CSV. Every child must have
/// visits 1 to 4 with binary responses and a constant smoking status.
pub fn load_sixcity(path: impl AsRef<Path>) -> Result<SixCityData> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sixcity(file)
}

pub fn read_sixcity(reader: impl std::io::Read) -> Result<SixCityData> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut by_id: BTreeMap<u64, (usize, Vec<Option<(u8, f64)>>, f64)> = BTreeMap::new();
    let mut rows = 0;
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = i + 1;
        let r = rec.map_err(|e| Error::Ingestion {
            row,
            reason: e.to_string(),
        })?;
        rows += 1;
        if !(r.y == 0 || r.y == 1) {
            return Err(Error::Ingestion {
                row,
                reason: format!("response must be 0 or 1, got {}", r.y),
            });
        }
        if !(r.smoking == 0.0 || r.smoking == 1.0) {
            return Err(Error::Ingestion {
                row,
                reason: format!("smoking must be 0 or 1, got {}", r.smoking),
            });
        }
        if !(1..=VISITS).contains(&r.visit) {
            return Err(Error::Ingestion {
                row,
                reason: format!("visit must be in 1..={VISITS}, got {}", r.visit),
            });
        }
        if !r.age_centered.is_finite() {
            return Err(Error::Ingestion {
                row,
                reason: "age is not finite".into(),
            });
        }
        let entry = by_id
            .entry(r.id)
            .or_insert_with(|| (row, vec![None; VISITS], r.smoking));
        if entry.2 != r.smoking {
            return Err(Error::Ingestion {
                row,
                reason: format!("smoking status changes within child {}", r.id),
            });
        }
        let slot = &mut entry.1[r.visit - 1];
        if slot.is_some() {
            return Err(Error::Ingestion {
                row,
                reason: format!("duplicate visit {} for child {}", r.visit, r.id),
            });
        }
        *slot = Some((r.y as u8, r.age_centered));
    }
    if rows == 0 {
        return Err(Error::Ingestion {
            row: 0,
            reason: "no data rows".into(),
        });
    }
    let children = by_id
        .into_iter()
        .map(|(id, (first_row, visits, smoking))| {
            let mut y = Vec::with_capacity(VISITS);
            let mut age = Vec::with_capacity(VISITS);
            for (k, v) in visits.into_iter().enumerate() {
                let (yy, a) = v.ok_or_else(|| Error::Ingestion {
                    row: first_row,
                    reason: format!("child {id} is missing visit {}", k + 1),
                })?;
                y.push(yy);
                age.push(a);
            }
            Ok(Child { id, y, age, smoking })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SixCityData { children })
}

pub fn write_sixcity(data: &SixCityData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for c in &data.children {
        for (k, (y, a)) in c.y.iter().zip(&c.age).enumerate() {
            w.serialize(Row {
                id: c.id,
                visit: k + 1,
                y: *y as i64,
                age_centered: *a,
                smoking: c.smoking,
            })
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Simulates `n` children at `θ = (β1, β2, β3, log τ²)` with smoking
/// prevalence 0.35.
pub fn synth_sixcity(theta: &[f64], n: usize, seed: u64) -> Result<SixCityData> {
    if theta.len() != 4 {
        return Err(Error::Config("GLMM parameter has 4 entries".into()));
    }
    let tau = (0.5 * theta[3]).exp();
    let pts = PointStream::pseudorandom(2 + VISITS, seed)?.generate(n.max(1))?;
    let children = (0..n)
        .map(|i| {
            let u = pts.row(i);
            let smoking = if u[0] < 0.35 { 1.0 } else { 0.0 };
            let alpha = tau * uniform_to_normal(u[1]);
            let y = AGES
                .iter()
                .zip(&u[2..])
                .map(|(a, w)| {
                    let eta = theta[0] + theta[1] * a + theta[2] * smoking + alpha;
                    u8::from(*w < sigmoid(eta))
                })
                .collect();
            Child {
                id: i as u64 + 1,
                y,
                age: AGES.to_vec(),
                smoking,
            }
        })
        .collect();
    Ok(SixCityData { children })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
pub struct Glmm {
    data: SixCityData,
}

impl Glmm {
    pub fn new(data: SixCityData) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("GLMM needs at least one child".into()));
        }
        Ok(Glmm { data })
    }

    /// The synthetic six-city fixture shipped with the crate.
    pub fn bundled_fixture() -> Result<Self> {
        Self::new(read_sixcity(FIXTURE.as_bytes())?)
    }

    /// Parameter value used to generate the bundled fixture.
    pub const FIXTURE_THETA: [f64; 4] = [-3.0, -0.18, 0.4, 1.386_294_361_119_890_6];
    pub const FIXTURE_SEED: u64 = 9;

    pub fn data(&self) -> &SixCityData {
        &self.data
    }

    fn linear_predictors(&self, factor: usize, theta: &[f64]) -> impl Iterator<Item = (f64, u8)> + '_ {
        let c = &self.data.children[factor];
        let base = theta[0] + theta[2] * c.smoking;
        let b2 = theta[1];
        c.age.iter().zip(&c.y).map(move |(a, y)| (base + b2 * a, *y))
    }

    fn bernoulli_loglik(eta: f64, y: u8) -> f64 {
        if y == 1 {
            -softplus(-eta)
        } else {
            -softplus(eta)
        }
    }
}

static FIXTURE: &str = include_str!("../../data/sixcity_synthetic.csv");

impl Model for Glmm {
    fn name(&self) -> &str {
        "glmm"
    }

    fn param_dim(&self) -> usize {
        4
    }

    fn factor_count(&self) -> usize {
        self.data.len()
    }

    fn inner_dim(&self) -> usize {
        1
    }

    fn prior_logpdf(&self, theta: &[f64]) -> f64 {
        let beta: f64 = theta[..3]
            .iter()
            .map(|b| -0.5 * (ln_2pi() + BETA_PRIOR_VAR.ln()) - b * b / (2.0 * BETA_PRIOR_VAR))
            .sum();
        let tau = (0.5 * theta[3]).exp();
        beta + TAU_RATE.ln() - TAU_RATE * tau + (0.5 * tau).ln()
    }

    fn prior_grad(&self, theta: &[f64]) -> Vec<f64> {
        let tau = (0.5 * theta[3]).exp();
        vec![
            -theta[0] / BETA_PRIOR_VAR,
            -theta[1] / BETA_PRIOR_VAR,
            -theta[2] / BETA_PRIOR_VAR,
            -0.5 * TAU_RATE * tau + 0.5,
        ]
    }

    fn latent(&self, factor: usize, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let alpha = (0.5 * theta[3]).exp() * uniform_to_normal(v[0]);
        Ok(self.linear_predictors(factor, theta).map(|(z, _)| z + alpha).collect())
    }

    fn log_integrand(&self, factor: usize, x: &[f64]) -> Result<f64> {
        let c = &self.data.children[factor];
        Ok(x.iter().zip(&c.y).map(|(eta, y)| Self::bernoulli_loglik(*eta, *y)).sum())
    }

    fn log_f(&self, factor: usize, theta: &[f64], v: &[f64]) -> Result<f64> {
        let alpha = (0.5 * theta[3]).exp() * uniform_to_normal(v[0]);
        Ok(self
            .linear_predictors(factor, theta)
            .map(|(z, y)| Self::bernoulli_loglik(z + alpha, y))
            .sum())
    }

    fn supports_rp(&self) -> bool {
        true
    }

    fn rp_chain(&self, factor: usize, theta: &[f64], v: &[f64], grad: &mut [f64]) -> Result<f64> {
        let c = &self.data.children[factor];
        let tau = (0.5 * theta[3]).exp();
        let w = uniform_to_normal(v[0]);
        let alpha = tau * w;
        let mut log_f = 0.0;
        let (mut g_int, mut g_age) = (0.0, 0.0);
        for (z, y, a) in self
            .linear_predictors(factor, theta)
            .zip(&c.age)
            .map(|((z, y), a)| (z, y, a))
        {
            let eta = z + alpha;
            log_f += Self::bernoulli_loglik(eta, y);
            let r = y as f64 - sigmoid(eta);
            g_int += r;
            g_age += r * a;
        }
        grad[0] = g_int;
        grad[1] = g_age;
        grad[2] = g_int * c.smoking;
        grad[3] = g_int * w * 0.5 * tau;
        Ok(log_f)
    }
}
