//! Uniform point streams on `[0,1)^s` for inner and outer simulation.
//!
//! A [`PointStream`] is an immutable descriptor; points are a pure function of
//! the descriptor and the requested index range, so disjoint ranges can be
//! generated in parallel and every run is reproducible.
//!
//! * `Pseudorandom` streams are ChaCha8 keyed by `(seed, replicate)`; point
//!   `i`, coordinate `j` is the `(i·s + j)`-th 64-bit word, keeping its top 53
//!   bits.
//! * `ScrambledNet` streams are Sobol points with nested uniform scrambling
//!   keyed by `(seed, replicate, coordinate)`. The 32 generated digits are
//!   scrambled and the next 21 digits are filled uniformly at random, so every
//!   coordinate is a multiple of 2^-53 and marginally uniform.

mod sobol;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

pub use sobol::{owen_scramble, SobolGenerator, BITS as SOBOL_BITS, MAX_POINTS};

use crate::numerics::{least_squares, sample_variance};
use crate::{Error, Result};

use sobol::mix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Pseudorandom,
    ScrambledNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointStream {
    pub kind: StreamKind,
    pub dimension: usize,
    pub seed: u64,
    pub replicate: u64,
    /// Only meaningful for `ScrambledNet`; turning it off exposes the raw
    /// Sobol points (including the origin) and is meant for tests.
    pub scramble: bool,
}

/// `count × dimension` points, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dimension: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        if self.dimension == 0 {
            0
        } else {
            self.data.len() / self.dimension
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dimension)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl PointStream {
    pub fn new(kind: StreamKind, dimension: usize, seed: u64) -> Result<Self> {
        let stream = PointStream {
            kind,
            dimension,
            seed,
            replicate: 0,
            scramble: true,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn pseudorandom(dimension: usize, seed: u64) -> Result<Self> {
        Self::new(StreamKind::Pseudorandom, dimension, seed)
    }

    pub fn scrambled(dimension: usize, seed: u64) -> Result<Self> {
        Self::new(StreamKind::ScrambledNet, dimension, seed)
    }

    pub fn unscrambled(self) -> Self {
        PointStream {
            scramble: false,
            ..self
        }
    }

    pub fn with_replicate(self, replicate: u64) -> Self {
        PointStream { replicate, ..self }
    }

    pub fn with_dimension(self, dimension: usize) -> Result<Self> {
        let s = PointStream { dimension, ..self };
        s.validate()?;
        Ok(s)
    }

    pub fn with_kind(self, kind: StreamKind) -> Result<Self> {
        let s = PointStream { kind, ..self };
        s.validate()?;
        Ok(s)
    }

    pub fn max_dimension(kind: StreamKind) -> usize {
        match kind {
            StreamKind::Pseudorandom => usize::MAX / 2,
            StreamKind::ScrambledNet => SobolGenerator::bundled().max_dimension(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::Config("point stream dimension must be positive".into()));
        }
        let max = Self::max_dimension(self.kind);
        if self.dimension > max {
            return Err(Error::Config(format!(
                "scrambled net supports at most {max} dimensions, asked for {}",
                self.dimension
            )));
        }
        Ok(())
    }

    /// A derived stream with an independent randomization, addressed by `tag`.
    /// Deterministic in `(self, tag)`; the kind and dimension are inherited.
    pub fn child(&self, tag: u64) -> PointStream {
        PointStream {
            seed: mix64(self.key() ^ 0x243f_6a88_85a3_08d3),
            replicate: tag,
            ..*self
        }
    }

    /// `n` streams with distinct replicate indices and independent
    /// randomizations.
    pub fn split(&self, n: usize) -> Vec<PointStream> {
        (0..n as u64).map(|k| self.child(k)).collect()
    }

    fn key(&self) -> u64 {
        mix64(self.seed ^ mix64(self.replicate.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    }

    /// The first `count` points.
    pub fn generate(&self, count: usize) -> Result<PointSet> {
        if count == 0 {
            return Err(Error::Config("point count must be at least 1".into()));
        }
        self.generate_range(0, count)
    }

    /// Points `start..start + count`.
    pub fn generate_range(&self, start: u64, count: usize) -> Result<PointSet> {
        self.validate()?;
        let s = self.dimension;
        let data = match self.kind {
            StreamKind::Pseudorandom => {
                let mut rng = self.chacha();
                rng.set_word_pos(2 * start as u128 * s as u128);
                (0..count * s)
                    .map(|_| (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
                    .collect()
            }
            StreamKind::ScrambledNet => {
                if start + count as u64 > MAX_POINTS {
                    return Err(Error::Config(format!(
                        "scrambled net is limited to {MAX_POINTS} points"
                    )));
                }
                let ints = SobolGenerator::bundled().integers(s, start, count);
                if self.scramble {
                    let key = self.key();
                    let keys: Vec<u64> = (0..s as u64)
                        .map(|j| mix64(key ^ j.wrapping_mul(0xa076_1d64_78bd_642f)))
                        .collect();
                    ints.chunks(s)
                        .flat_map(|row| row.iter().zip(&keys).map(|(x, k)| owen_scramble(*x, *k)))
                        .collect()
                } else {
                    ints.into_iter()
                        .map(|x| x as f64 / MAX_POINTS as f64)
                        .collect()
                }
            }
        };
        Ok(PointSet { dimension: s, data })
    }

    fn chacha(&self) -> ChaCha8Rng {
        let k = self.key();
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&mix64(k.wrapping_add(i as u64)).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }

    /// Iterates over points in blocks of at most `block` rows, keeping memory
    /// bounded for very large inner samples.
    pub fn for_each_block(
        &self,
        count: usize,
        block: usize,
        mut f: impl FnMut(usize, &PointSet) -> Result<()>,
    ) -> Result<()> {
        let block = block.max(1);
        let mut start = 0usize;
        while start < count {
            let n = block.min(count - start);
            let pts = self.generate_range(start as u64, n)?;
            f(start, &pts)?;
            start += n;
        }
        Ok(())
    }
}

/// Hashes a seed lineage such as `(seed, iteration, tag)` into one stream
/// seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, p| mix64(acc ^ mix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

/// Result of an empirical variance-decay regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub sizes: Vec<usize>,
    pub variances: Vec<f64>,
    /// `None` when some variance is zero and the log-log fit is undefined.
    pub slope: Option<f64>,
}

/// Fits `log2(Var[mean of N points])` against `log2 N` over independent
/// randomizations of `stream`.
pub fn variance_slope(
    integrand: impl Fn(&[f64]) -> f64 + Sync,
    stream: &PointStream,
    sizes: &[usize],
    replicates: usize,
) -> Result<SlopeFit> {
    use rayon::prelude::*;

    if sizes.len() < 2 {
        return Err(Error::Config("variance_slope needs at least two sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.iter().any(|n| !n.is_power_of_two()) {
        return Err(Error::Config(
            "variance_slope sizes must be strictly increasing powers of two".into(),
        ));
    }
    if replicates < 8 {
        return Err(Error::Config("variance_slope needs at least 8 replicates".into()));
    }
    let variances = sizes
        .iter()
        .map(|&n| {
            let means: Vec<f64> = (0..replicates as u64)
                .into_par_iter()
                .map(|r| {
                    let pts = stream.child(n as u64).with_replicate(r).generate(n)?;
                    Ok(pts.rows().map(&integrand).sum::<f64>() / n as f64)
                })
                .collect::<Result<_>>()?;
            Ok(sample_variance(&means))
        })
        .collect::<Result<Vec<f64>>>()?;
    let slope = if variances.iter().all(|v| *v > 0.0) {
        let x: Vec<f64> = sizes.iter().map(|n| (*n as f64).log2()).collect();
        let y: Vec<f64> = variances.iter().map(|v| v.log2()).collect();
        Some(least_squares(&x, &y)?.0)
    } else {
        None
    };
    Ok(SlopeFit {
        sizes: sizes.to_vec(),
        variances,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudorandom_points_in_range() {
        let s = PointStream::pseudorandom(2, 99).unwrap();
        let pts = s.generate(3).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn unscrambled_first_coordinate() {
        let s = PointStream::scrambled(1, 0).unwrap().unscrambled();
        let mut v = s.generate(4).unwrap().column(0);
        v.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(v, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn scrambled_eight_points_one_per_interval() {
        for seed in [0u64, 1, 77, 12345] {
            let s = PointStream::scrambled(1, seed).unwrap();
            let mut hits = [0; 8];
            for v in s.generate(8).unwrap().column(0) {
                hits[(v * 8.0) as usize] += 1;
            }
            assert_eq!(hits, [1; 8]);
        }
    }

    #[test]
    fn net_balance_exact_up_to_2_pow_10() {
        let s = PointStream::scrambled(5, 2024).unwrap();
        let pts = s.generate(1 << 10).unwrap();
        for m in 0..=10 {
            let n = 1usize << m;
            for j in 0..5 {
                let mut hits = vec![0u32; n];
                for i in 0..n {
                    hits[(pts.row(i)[j] * n as f64) as usize] += 1;
                }
                assert!(hits.iter().all(|h| *h == 1), "m = {m}, coordinate {j}");
            }
        }
    }

    #[test]
    fn ranges_agree_with_full_generation() {
        for kind in [StreamKind::Pseudorandom, StreamKind::ScrambledNet] {
            let s = PointStream::new(kind, 3, 5).unwrap();
            let all = s.generate(40).unwrap();
            let part = s.generate_range(17, 11).unwrap();
            assert_eq!(part.as_slice(), &all.as_slice()[17 * 3..28 * 3]);
        }
    }

    #[test]
    fn split_is_distinct_and_deterministic() {
        let s = PointStream::scrambled(3, 11).unwrap();
        let a = s.split(3);
        let b = s.split(3);
        assert_eq!(a, b);
        let sets: Vec<_> = a.iter().map(|c| c.generate(16).unwrap()).collect();
        assert_ne!(sets[0], sets[1]);
        assert_ne!(sets[1], sets[2]);
        assert_ne!(sets[0], sets[2]);
        assert_eq!(sets[0], a[0].generate(16).unwrap());
        let one = s.split(1);
        assert_eq!(one.len(), 1);
        assert_ne!(one[0], s);
    }

    #[test]
    fn configuration_errors() {
        assert!(PointStream::pseudorandom(0, 1).is_err());
        assert!(PointStream::scrambled(5000, 1).is_err());
        assert!(PointStream::scrambled(1100, 1).is_ok());
        let s = PointStream::pseudorandom(2, 1).unwrap();
        assert!(s.generate(0).is_err());
    }

    #[test]
    fn marginal_uniformity_over_scramblings() {
        let base = PointStream::scrambled(3, 8).unwrap();
        for i in [0usize, 1, 5, 13] {
            for j in 0..3 {
                let m: f64 = (0..512u64)
                    .map(|r| base.with_replicate(r).generate(i + 1).unwrap().row(i)[j])
                    .sum::<f64>()
                    / 512.0;
                assert!((m - 0.5).abs() < 4.0 / 512f64.sqrt(), "point {i} coordinate {j}: {m}");
            }
        }
    }

    #[test]
    fn constant_integrand_has_degenerate_slope() {
        let s = PointStream::pseudorandom(2, 3).unwrap();
        let fit = variance_slope(|_| 1.0, &s, &[4, 8, 16], 8).unwrap();
        assert!(fit.slope.is_none());
        assert!(fit.variances.iter().all(|v| *v == 0.0));
        assert!(variance_slope(|_| 1.0, &s, &[4], 8).is_err());
    }
}
