//! Gaussian variational family `q_λ = N(μ, Σ)` in two parameterizations.
//!
//! * [`SfParams`]: `λ = (μ, vech(C))` with `C` the Cholesky factor of the
//!   precision `Σ⁻¹`, used with score-function gradients.
//! * [`RpParams`]: `λ = (μ, vech(L))` with `L` the Cholesky factor of the
//!   covariance `Σ`, used with reparameterization `θ = μ + L u`.
//!
//! The flat parameter vector is `μ` followed by the packed factor in `vech`
//! order, which is also the layout of every gradient in `λ`.

use serde::{Deserialize, Serialize};

use crate::numerics::{cholesky, ln_2pi, packed_len, LowerTriangular, SquareMatrix};
use crate::{Error, Result};

/// Floor applied to Cholesky diagonals after each optimisation step.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// Number of entries of `λ` for parameter dimension `p`.
pub fn lambda_len(p: usize) -> usize {
    p + packed_len(p)
}

fn check_factor(mu: &[f64], factor: &LowerTriangular) -> Result<()> {
    if mu.len() != factor.order() {
        return Err(Error::Config(format!(
            "mean has {} entries but the factor has order {}",
            mu.len(),
            factor.order()
        )));
    }
    if !factor.is_valid_cholesky() {
        return Err(Error::Config("Cholesky factor needs a positive diagonal".into()));
    }
    Ok(())
}

fn split_lambda(p: usize, lambda: &[f64]) -> Result<(Vec<f64>, LowerTriangular)> {
    if lambda.len() != lambda_len(p) {
        return Err(Error::Config(format!(
            "parameter vector has {} entries, expected {}",
            lambda.len(),
            lambda_len(p)
        )));
    }
    Ok((lambda[..p].to_vec(), LowerTriangular::from_packed(p, lambda[p..].to_vec())?))
}

/// `Lᵀ L` for a lower-triangular `L`.
fn t_gram(l: &LowerTriangular) -> SquareMatrix {
    let p = l.order();
    let mut out = SquareMatrix::zeros(p);
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (i..p).map(|k| l.get(k, i) * l.get(k, j)).sum();
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfParams {
    pub mu: Vec<f64>,
    /// Cholesky factor of the precision matrix.
    pub c: LowerTriangular,
}

impl SfParams {
    pub fn new(mu: Vec<f64>, c: LowerTriangular) -> Result<Self> {
        check_factor(&mu, &c)?;
        Ok(SfParams { mu, c })
    }

    /// `N(μ, σ² I)`.
    pub fn isotropic(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        let p = mu.len();
        let mut c = LowerTriangular::identity(p);
        for i in 0..p {
            c.set(i, i, 1.0 / sigma);
        }
        Self::new(mu, c)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_lambda(&self) -> Vec<f64> {
        [self.mu.as_slice(), self.c.packed()].concat()
    }

    pub fn from_lambda(p: usize, lambda: &[f64]) -> Result<Self> {
        let (mu, c) = split_lambda(p, lambda)?;
        Self::new(mu, c)
    }

    /// `log|det C| - ½ (θ-μ)ᵀ C Cᵀ (θ-μ) - (p/2) log 2π`.
    pub fn logq(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        let w = self.c.mul_t_vec(&d);
        self.c.log_abs_det() - 0.5 * w.iter().map(|x| x * x).sum::<f64>() - 0.5 * self.dim() as f64 * ln_2pi()
    }

    /// `(C Cᵀ (θ-μ), vech(diag(1/C) - (θ-μ)(θ-μ)ᵀ C))`.
    pub fn score(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let d: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        let ctd = self.c.mul_t_vec(&d);
        let mut out = self.c.mul_vec(&ctd);
        out.reserve(packed_len(p));
        for j in 0..p {
            for i in j..p {
                let diag = if i == j { 1.0 / self.c.get(i, i) } else { 0.0 };
                out.push(diag - d[i] * ctd[j]);
            }
        }
        out
    }

    /// `θ = μ + C⁻ᵀ z`; standard normal `z` gives `θ ~ q`.
    pub fn sample(&self, z: &[f64]) -> Vec<f64> {
        let x = self.c.solve_t(z);
        x.iter().zip(&self.mu).map(|(a, m)| a + m).collect()
    }

    pub fn covariance(&self) -> SquareMatrix {
        t_gram(&self.c.inverse())
    }

    pub fn to_rp(&self) -> Result<RpParams> {
        RpParams::new(self.mu.clone(), cholesky(&self.covariance())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpParams {
    pub mu: Vec<f64>,
    /// Cholesky factor of the covariance matrix.
    pub l: LowerTriangular,
}

impl RpParams {
    pub fn new(mu: Vec<f64>, l: LowerTriangular) -> Result<Self> {
        check_factor(&mu, &l)?;
        Ok(RpParams { mu, l })
    }

    pub fn isotropic(mu: Vec<f64>, sigma: f64) -> Result<Self> {
        let p = mu.len();
        let mut l = LowerTriangular::identity(p);
        for i in 0..p {
            l.set(i, i, sigma);
        }
        Self::new(mu, l)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_lambda(&self) -> Vec<f64> {
        [self.mu.as_slice(), self.l.packed()].concat()
    }

    pub fn from_lambda(p: usize, lambda: &[f64]) -> Result<Self> {
        let (mu, l) = split_lambda(p, lambda)?;
        Self::new(mu, l)
    }

    pub fn logq(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        let w = self.l.solve(&d);
        -self.l.log_abs_det() - 0.5 * w.iter().map(|x| x * x).sum::<f64>() - 0.5 * self.dim() as f64 * ln_2pi()
    }

    /// `Γ(u; λ) = μ + L u`.
    pub fn transform(&self, u: &[f64]) -> Vec<f64> {
        self.l.mul_vec(u).iter().zip(&self.mu).map(|(a, m)| a + m).collect()
    }

    /// `∇_θ log q = -(L Lᵀ)⁻¹ (θ - μ)` by two triangular solves.
    pub fn grad_logq_theta(&self, theta: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = theta.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        self.l.solve_t(&self.l.solve(&d)).into_iter().map(|x| -x).collect()
    }

    pub fn covariance(&self) -> SquareMatrix {
        self.l.gram()
    }

    pub fn to_sf(&self) -> Result<SfParams> {
        SfParams::new(self.mu.clone(), cholesky(&t_gram(&self.l.inverse()))?)
    }
}

/// `(G, vech(G uᵀ))`, the chain rule through `θ = μ + L u`.
pub fn rp_assemble(g: &[f64], u: &[f64]) -> Vec<f64> {
    let p = g.len();
    let mut out = Vec::with_capacity(lambda_len(p));
    out.extend_from_slice(g);
    for j in 0..p {
        for gi in &g[j..] {
            out.push(gi * u[j]);
        }
    }
    out
}

/// Either parameterization, tagged for serialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariationalParams {
    Sf(SfParams),
    Rp(RpParams),
}

impl VariationalParams {
    pub fn dim(&self) -> usize {
        match self {
            VariationalParams::Sf(s) => s.dim(),
            VariationalParams::Rp(r) => r.dim(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            VariationalParams::Sf(s) => &s.mu,
            VariationalParams::Rp(r) => &r.mu,
        }
    }

    pub fn logq(&self, theta: &[f64]) -> f64 {
        match self {
            VariationalParams::Sf(s) => s.logq(theta),
            VariationalParams::Rp(r) => r.logq(theta),
        }
    }

    pub fn covariance(&self) -> SquareMatrix {
        match self {
            VariationalParams::Sf(s) => s.covariance(),
            VariationalParams::Rp(r) => r.covariance(),
        }
    }

    /// Marginal standard deviations.
    pub fn std_devs(&self) -> Vec<f64> {
        let cov = self.covariance();
        (0..self.dim()).map(|i| cov.get(i, i).sqrt()).collect()
    }

    /// Draws `θ ~ q` from standard normals.
    pub fn sample(&self, z: &[f64]) -> Vec<f64> {
        match self {
            VariationalParams::Sf(s) => s.sample(z),
            VariationalParams::Rp(r) => r.transform(z),
        }
    }

    pub fn to_lambda(&self) -> Vec<f64> {
        match self {
            VariationalParams::Sf(s) => s.to_lambda(),
            VariationalParams::Rp(r) => r.to_lambda(),
        }
    }

    pub fn to_sf(&self) -> Result<SfParams> {
        match self {
            VariationalParams::Sf(s) => Ok(s.clone()),
            VariationalParams::Rp(r) => r.to_sf(),
        }
    }

    pub fn to_rp(&self) -> Result<RpParams> {
        match self {
            VariationalParams::Sf(s) => s.to_rp(),
            VariationalParams::Rp(r) => Ok(r.clone()),
        }
    }

    /// `λ ← λ + step`, then clamps factor diagonals to [`DIAGONAL_FLOOR`].
    /// Returns the number of clamped entries.
    pub fn apply_step(&mut self, step: &[f64]) -> Result<usize> {
        let p = self.dim();
        if step.len() != lambda_len(p) {
            return Err(Error::Config(format!(
                "step has {} entries, expected {}",
                step.len(),
                lambda_len(p)
            )));
        }
        let (mu, factor) = match self {
            VariationalParams::Sf(s) => (&mut s.mu, &mut s.c),
            VariationalParams::Rp(r) => (&mut r.mu, &mut r.l),
        };
        for (m, d) in mu.iter_mut().zip(&step[..p]) {
            *m += d;
        }
        for (f, d) in factor.packed_mut().iter_mut().zip(&step[p..]) {
            *f += d;
        }
        if step.iter().any(|x| !x.is_finite()) || mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite variational parameters after update".into()));
        }
        Ok(factor.clamp_diagonal(DIAGONAL_FLOOR))
    }
}

/// Per-coordinate control-variate constants
/// `c_i = E[s_i² ξ] / E[s_i²]` for the score-function payoff `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlVariate {
    pub c: Vec<f64>,
    pub sample_count: usize,
}

impl ControlVariate {
    pub fn zeros(d: usize) -> Self {
        ControlVariate {
            c: vec![0.0; d],
            sample_count: 0,
        }
    }

    /// Fits from score rows and payoffs; coordinates whose score is
    /// identically zero get `c_i = 0`.
    pub fn fit(scores: &[Vec<f64>], xi: &[f64]) -> Result<Self> {
        if scores.len() != xi.len() || scores.len() < 2 {
            return Err(Error::Config(format!(
                "control variate fit needs at least 2 matching rows, got {} scores and {} payoffs",
                scores.len(),
                xi.len()
            )));
        }
        let d = scores[0].len();
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for (s, x) in scores.iter().zip(xi) {
            for i in 0..d {
                let s2 = s[i] * s[i];
                num[i] += s2 * x;
                den[i] += s2;
            }
        }
        let c = num
            .iter()
            .zip(&den)
            .enumerate()
            .map(|(i, (n, dd))| {
                if *dd > 0.0 && (n / dd).is_finite() {
                    n / dd
                } else {
                    log::debug!("control variate coordinate {i} is degenerate; using 0");
                    0.0
                }
            })
            .collect();
        Ok(ControlVariate {
            c,
            sample_count: xi.len(),
        })
    }
}

/// Sample mean and standard error of the score over `θ ~ q`, using the
/// supplied standard normals (one row per draw).
pub fn score_mean_zero_check(params: &SfParams, normals: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = lambda_len(params.dim());
    let scores: Vec<Vec<f64>> = normals.iter().map(|z| params.score(&params.sample(z))).collect();
    let mut means = Vec::with_capacity(d);
    let mut ses = Vec::with_capacity(d);
    for i in 0..d {
        let col: Vec<f64> = scores.iter().map(|s| s[i]).collect();
        let (m, se) = crate::numerics::mean_and_se(&col);
        means.push(m);
        ses.push(se);
    }
    (means, ses)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::uniform_to_normal;
    use crate::qmc::PointStream;

    fn normals(p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let pts = PointStream::pseudorandom(p, seed).unwrap().generate(n).unwrap();
        pts.rows().map(|r| r.iter().map(|u| uniform_to_normal(*u)).collect()).collect()
    }

    fn random_factor(p: usize, vals: &[f64]) -> LowerTriangular {
        let mut l = LowerTriangular::zeros(p);
        let mut k = 0;
        for j in 0..p {
            for i in j..p {
                let v = vals[k % vals.len()];
                l.set(i, j, if i == j { 0.5 + v.abs() } else { v });
                k += 1;
            }
        }
        l
    }

    #[test]
    fn logq_standard_value() {
        let s = SfParams::isotropic(vec![0.0], 1.0).unwrap();
        assert!((s.logq(&[0.0]) + 0.5 * ln_2pi()).abs() < 1e-15);
    }

    #[test]
    fn logq_integrates_to_one() {
        let s = SfParams::new(vec![0.3], LowerTriangular::from_packed(1, vec![1.7]).unwrap()).unwrap();
        let (lo, hi, n) = (-8.0, 8.0, 16_001);
        let h = (hi - lo) / (n - 1) as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                w * s.logq(&[lo + h * i as f64]).exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn score_hand_values() {
        let s = SfParams::isotropic(vec![0.0], 1.0).unwrap();
        assert_eq!(s.score(&[2.0]), vec![2.0, -3.0]);
        let s = SfParams::new(vec![1.0, 2.0], random_factor(2, &[0.3, -0.4, 0.9])).unwrap();
        let g = s.score(&[1.0, 2.0]);
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert_eq!(g[2], 1.0 / s.c.get(0, 0));
        assert_eq!(g[3], 0.0);
        assert_eq!(g[4], 1.0 / s.c.get(1, 1));
    }

    #[test]
    fn rp_assemble_hand_values() {
        assert_eq!(rp_assemble(&[1.0, 2.0], &[3.0, 4.0]), vec![1.0, 2.0, 3.0, 6.0, 8.0]);
        assert_eq!(rp_assemble(&[1.0, 2.0], &[0.0, 0.0]), vec![1.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_logq_theta_hand_value() {
        let r = RpParams::isotropic(vec![1.0], 2.0).unwrap();
        assert_eq!(r.grad_logq_theta(&[5.0]), vec![-1.0]);
        assert_eq!(r.grad_logq_theta(&[1.0]), vec![-0.0]);
    }

    #[test]
    fn transform_cases() {
        let r = RpParams::new(vec![1.0, -1.0], random_factor(2, &[0.2, 0.7, -0.1])).unwrap();
        assert_eq!(r.transform(&[0.0, 0.0]), r.mu);
        let id = RpParams::isotropic(vec![1.0, -1.0], 1.0).unwrap();
        assert_eq!(id.transform(&[0.5, 2.0]), vec![1.5, 1.0]);
    }

    #[test]
    fn transformed_covariance() {
        let r = RpParams::new(vec![0.0; 3], random_factor(3, &[0.8, -0.3, 0.4, 0.2, -0.6, 0.1])).unwrap();
        let zs = normals(3, 100_000, 5);
        let n = zs.len() as f64;
        let xs: Vec<Vec<f64>> = zs.iter().map(|z| r.transform(z)).collect();
        let target = r.covariance();
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let m = xs.iter().map(|x| x[i] * x[j]).sum::<f64>() / n;
                err += (m - target.get(i, j)).powi(2);
                norm += target.get(i, j).powi(2);
            }
        }
        assert!(err.sqrt() < 0.05 * norm.sqrt());
    }

    #[test]
    fn antithetic_pairs_cancel_mean_score() {
        let s = SfParams::new(vec![0.5, -0.2], random_factor(2, &[1.1, 0.3, 0.6])).unwrap();
        let z = [0.7, -1.3];
        let zn = [-0.7, 1.3];
        let a = s.score(&s.sample(&z));
        let b = s.score(&s.sample(&zn));
        assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12);
    }

    #[test]
    fn score_mean_is_zero() {
        for (p, seed) in [(1usize, 1u64), (4, 2)] {
            let vals: Vec<f64> = (0..10).map(|k| ((k * 7 + 3) as f64 * 0.37).sin()).collect();
            let s = SfParams::new(vec![0.2; p], random_factor(p, &vals)).unwrap();
            let (m, se) = score_mean_zero_check(&s, &normals(p, 100_000, seed));
            assert_eq!(m.len(), lambda_len(p));
            for (mi, si) in m.iter().zip(&se) {
                assert!(mi.abs() <= 4.0 * si, "{mi} vs {si}");
            }
        }
    }

    #[test]
    fn control_variate_examples() {
        let scores = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        let cv = ControlVariate::fit(&scores, &[3.0, 6.0]).unwrap();
        assert!((cv.c[0] - 5.4).abs() < 1e-15);
        assert_eq!(cv.c[1], 0.0);
        let cv = ControlVariate::fit(&[vec![0.3], vec![-1.2], vec![2.0]], &[4.5; 3]).unwrap();
        assert!((cv.c[0] - 4.5).abs() < 1e-14);
        assert!(ControlVariate::fit(&[vec![1.0]], &[1.0]).is_err());
        assert_eq!(ControlVariate::zeros(3).c, vec![0.0; 3]);
    }

    #[test]
    fn step_clamps_diagonal() {
        let mut v = VariationalParams::Rp(RpParams::isotropic(vec![0.0, 0.0], 1.0).unwrap());
        let clamped = v.apply_step(&[0.1, 0.2, -2.0, 0.5, 0.0]).unwrap();
        assert_eq!(clamped, 1);
        let rp = v.to_rp().unwrap();
        assert_eq!(rp.l.get(0, 0), DIAGONAL_FLOOR);
        assert_eq!(rp.l.get(1, 0), 0.5);
        assert_eq!(rp.mu, vec![0.1, 0.2]);
        assert!(v.apply_step(&[0.0; 3]).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let v = VariationalParams::Sf(SfParams::isotropic(vec![1.0, 2.0], 0.5).unwrap());
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"kind\":\"sf\""));
        assert_eq!(serde_json::from_str::<VariationalParams>(&json).unwrap(), v);
    }

    fn factor_strategy(p: usize) -> impl Strategy<Value = LowerTriangular> {
        prop::collection::vec(-1.0f64..1.0, packed_len(p)).prop_map(move |v| random_factor(p, &v))
    }

    fn case() -> impl Strategy<Value = (usize, Vec<f64>, LowerTriangular, Vec<f64>)> {
        prop::sample::select(vec![1usize, 2, 4]).prop_flat_map(|p| {
            (
                Just(p),
                prop::collection::vec(-2.0f64..2.0, p),
                factor_strategy(p),
                prop::collection::vec(-2.0f64..2.0, p),
            )
        })
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #[test]
        fn score_matches_finite_differences((p, mu, c, theta) in case()) {
            let s = SfParams::new(mu, c).unwrap();
            let g = s.score(&theta);
            let lam = s.to_lambda();
            for k in 0..lam.len() {
                let h = 1e-5;
                let mut a = lam.clone();
                let mut b = lam.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (SfParams::from_lambda(p, &a).unwrap().logq(&theta)
                    - SfParams::from_lambda(p, &b).unwrap().logq(&theta)) / (2.0 * h);
                prop_assert!(rel_err(fd, g[k]) < 1e-5, "k = {}: {} vs {}", k, fd, g[k]);
            }
        }

        #[test]
        fn grad_logq_theta_matches_finite_differences((_p, mu, l, theta) in case()) {
            let r = RpParams::new(mu, l).unwrap();
            let g = r.grad_logq_theta(&theta);
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut a = theta.clone();
                let mut b = theta.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (r.logq(&a) - r.logq(&b)) / (2.0 * h);
                prop_assert!(rel_err(fd, g[k]) < 1e-6, "{} vs {}", fd, g[k]);
            }
        }

        #[test]
        fn parameterizations_agree((_p, mu, l, theta) in case()) {
            let r = RpParams::new(mu, l).unwrap();
            let s = r.to_sf().unwrap();
            prop_assert!((r.logq(&theta) - s.logq(&theta)).abs() < 1e-10);
            let back = s.to_rp().unwrap();
            for (a, b) in back.l.packed().iter().zip(r.l.packed()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
