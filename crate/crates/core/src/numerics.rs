//! Special functions and the small dense linear algebra used by the Gaussian
//! family and the synthetic-likelihood baseline.
//!
//! Triangular factors are stored packed in `vech` order: the lower triangle is
//! stacked column by column, so for `p = 3` the order is
//! `(0,0) (1,0) (2,0) (1,1) (2,1) (2,2)`. The same order is used for
//! gradients with respect to triangular parameters and for serialization.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn ln_2pi() -> f64 {
    LN_2PI
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse standard normal CDF.
///
/// A rational first guess (relative error below 1.2e-9) is polished with one
/// Halley step against the erfc-based CDF.
pub fn normal_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal_inv_cdf needs p in (0,1), got {p}"
        )));
    }
    Ok(inv_cdf_unchecked(p))
}

/// Maps a uniform on the 2^-53 grid of `[0,1)` to a standard normal.
///
/// The uniform is moved to the centre of its grid cell so that `u = 0`
/// (the first unscrambled Sobol point) stays finite. Both branches are exact
/// in floating point.
#[inline]
pub fn uniform_to_normal(u: f64) -> f64 {
    const HALF_CELL: f64 = 1.0 / 18_014_398_509_481_984.0; // 2^-54
    if u < 0.5 {
        inv_cdf_unchecked(u + HALF_CELL)
    } else {
        -inv_cdf_unchecked((1.0 - u) - HALF_CELL)
    }
}

fn inv_cdf_unchecked(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let tail = |q: f64| {
        let r = (-2.0 * q.ln()).sqrt();
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };

    let x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };

    // Halley refinement. Work in the lower tail so the residual keeps its
    // relative precision.
    let (xs, ps, sign) = if x > 0.0 { (-x, 1.0 - p, -1.0) } else { (x, p, 1.0) };
    let e = normal_cdf(xs) - ps;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * xs * xs).exp();
    let refined = xs - u / (1.0 + 0.5 * xs * u);
    sign * refined
}

/// Digamma function `Γ'(t)/Γ(t)` for `t > 0`.
pub fn digamma(t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("digamma needs t > 0, got {t}")));
    }
    let mut x = t;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Asymptotic expansion with Bernoulli-number coefficients.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * 691.0 / 32760.0)))));
    Ok(acc + x.ln() - 0.5 / x - series)
}

/// Packed lower-triangular matrix of order `p` in `vech` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangular {
    order: usize,
    entries: Vec<f64>,
}

/// Position of `(row, col)`, `row >= col`, in the packed `vech` layout.
#[inline]
pub fn vech_index(order: usize, row: usize, col: usize) -> usize {
    debug_assert!(row >= col && row < order);
    // column `col` starts after Σ_{c<col} (order - c) entries
    col * order - col * (col.saturating_sub(1)) / 2 + (row - col)
}

pub fn packed_len(order: usize) -> usize {
    order * (order + 1) / 2
}

impl LowerTriangular {
    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn zeros(order: usize) -> Self {
        LowerTriangular {
            order,
            entries: vec![0.0; packed_len(order)],
        }
    }

    pub fn from_packed(order: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != packed_len(order) {
            return Err(Error::Config(format!(
                "packed triangle of order {order} needs {} entries, got {}",
                packed_len(order),
                entries.len()
            )));
        }
        Ok(LowerTriangular { order, entries })
    }

    /// Takes the lower triangle of a dense matrix; the upper part is ignored.
    pub fn from_dense(m: &SquareMatrix) -> Self {
        let mut out = Self::zeros(m.order());
        for j in 0..m.order() {
            for i in j..m.order() {
                out.set(i, j, m.get(i, j));
            }
        }
        out
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn packed(&self) -> &[f64] {
        &self.entries
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        if row < col {
            0.0
        } else {
            self.entries[vech_index(self.order, row, col)]
        }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let k = vech_index(self.order, row, col);
        self.entries[k] = value;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.order).map(|i| self.get(i, i)).collect()
    }

    pub fn is_valid_cholesky(&self) -> bool {
        self.diagonal().iter().all(|d| *d > 0.0 && d.is_finite())
            && self.entries.iter().all(|e| e.is_finite())
    }

    /// Raises diagonal entries below `floor` to `floor`; returns how many moved.
    pub fn clamp_diagonal(&mut self, floor: f64) -> usize {
        let mut moved = 0;
        for i in 0..self.order {
            let k = vech_index(self.order, i, i);
            if !(self.entries[k] >= floor) {
                self.entries[k] = floor;
                moved += 1;
            }
        }
        moved
    }

    pub fn log_abs_det(&self) -> f64 {
        self.diagonal().iter().map(|d| d.abs().ln()).sum()
    }

    pub fn to_dense(&self) -> SquareMatrix {
        let mut m = SquareMatrix::zeros(self.order);
        for j in 0..self.order {
            for i in j..self.order {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    /// `L x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let p = self.order;
        let mut y = vec![0.0; p];
        for j in 0..p {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (i, yi) in y.iter_mut().enumerate().skip(j) {
                *yi += self.get(i, j) * xj;
            }
        }
        y
    }

    /// `Lᵀ x`
    pub fn mul_t_vec(&self, x: &[f64]) -> Vec<f64> {
        let p = self.order;
        (0..p)
            .map(|j| (j..p).map(|i| self.get(i, j) * x[i]).sum())
            .collect()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let p = self.order;
        let mut y = b.to_vec();
        for i in 0..p {
            let mut s = y[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.get(i, j) * yj;
            }
            y[i] = s / self.get(i, i);
        }
        y
    }

    /// Solves `Lᵀ x = b` by back substitution.
    pub fn solve_t(&self, b: &[f64]) -> Vec<f64> {
        let p = self.order;
        let mut x = b.to_vec();
        for i in (0..p).rev() {
            let mut s = x[i];
            for (j, xj) in x.iter().enumerate().skip(i + 1) {
                s -= self.get(j, i) * xj;
            }
            x[i] = s / self.get(i, i);
        }
        x
    }

    /// `L Lᵀ` as a dense matrix.
    pub fn gram(&self) -> SquareMatrix {
        let p = self.order;
        let mut m = SquareMatrix::zeros(p);
        for i in 0..p {
            for j in 0..=i {
                let v: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    /// Inverse of the triangle, itself lower triangular.
    pub fn inverse(&self) -> LowerTriangular {
        let p = self.order;
        let mut out = LowerTriangular::zeros(p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate().skip(j) {
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Dense row-major square matrix for the small orders used here.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    order: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(order: usize) -> Self {
        SquareMatrix {
            order,
            data: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("matrix must be square and non-empty".into()));
        }
        Ok(SquareMatrix {
            order: n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m.set(i, i, *d);
        }
        m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.order + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.order + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.order).map(|r| r.to_vec()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.order)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.order).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Cholesky factor `L` with `L Lᵀ = S`.
pub fn cholesky(s: &SquareMatrix) -> Result<LowerTriangular> {
    let p = s.order();
    if !s.is_symmetric(1e-12 * (1.0 + max_abs(s))) {
        return Err(Error::Config("cholesky input is not symmetric".into()));
    }
    let mut l = LowerTriangular::zeros(p);
    for j in 0..p {
        let mut d = s.get(j, j);
        for k in 0..j {
            d -= l.get(j, k).powi(2);
        }
        if !(d > 0.0) {
            return Err(Error::Decomposition { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..p {
            let mut v = s.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / djj);
        }
    }
    Ok(l)
}

fn max_abs(s: &SquareMatrix) -> f64 {
    s.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Log-density of `N(mean, L Lᵀ)` at `x`.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov_chol: &LowerTriangular) -> Result<f64> {
    let p = cov_chol.order();
    if x.len() != p || mean.len() != p {
        return Err(Error::Config(format!(
            "mvn_logpdf dimension mismatch: x {}, mean {}, factor {}",
            x.len(),
            mean.len(),
            p
        )));
    }
    let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = cov_chol.solve(&r);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    Ok(-0.5 * p as f64 * LN_2PI - cov_chol.log_abs_det() - 0.5 * quad)
}

/// Numerically stable `log Σ exp(a_i)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Unweighted least-squares slope and intercept of `y` on `x`.
pub fn least_squares(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config(
            "least squares needs at least two paired points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("least squares needs distinct x values".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// One-sample Kolmogorov–Smirnov statistic and asymptotic p-value against a
/// continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0_f64, f64::max);
    (d, kolmogorov_pvalue(d, n))
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.total_cmp(q));
    xb.sort_by(|p, q| p.total_cmp(q));
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0_f64;
    while i < na && j < nb {
        let x = xa[i].min(xb[j]);
        while i < na && xa[i] <= x {
            i += 1;
        }
        while j < nb && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    (d, kolmogorov_pvalue(d, ne))
}

fn kolmogorov_pvalue(d: f64, n_eff: f64) -> f64 {
    let sn = n_eff.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
