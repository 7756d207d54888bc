//! Base-2 Sobol sequence in Gray-code order with nested uniform (Owen)
//! scrambling.
//!
//! Direction numbers are read from the standard Joe–Kuo text layout
//! (`d s a m_1 .. m_s`, one row per dimension, header line first). The first
//! dimension is the van der Corput sequence and has no row.

use std::path::Path;
use std::sync::OnceLock;

use crate::{Error, Result};

/// Number of binary digits produced by the linear recurrence.
pub const BITS: usize = 32;

/// Index limit of the generator (exclusive).
pub const MAX_POINTS: u64 = 1 << BITS;

static BUNDLED_TABLE: &str = include_str!("../../data/new-joe-kuo-6.1111");
static BUNDLED: OnceLock<SobolGenerator> = OnceLock::new();

/// Direction numbers for every supported dimension.
#[derive(Clone, Debug)]
pub struct SobolGenerator {
    directions: Vec<[u32; BITS]>,
}

impl SobolGenerator {
    /// The generator built from the bundled Joe–Kuo table (1111 dimensions).
    pub fn bundled() -> &'static SobolGenerator {
        BUNDLED.get_or_init(|| {
            Self::parse(BUNDLED_TABLE).expect("bundled direction-number table is well formed")
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a Joe–Kuo table. Rows must be consecutive starting at `d = 2`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut directions = vec![first_dimension()];
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('d') || line.starts_with('#') {
                continue;
            }
            let fields: Vec<u64> = line
                .split_whitespace()
                .map(|t| t.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Ingestion {
                    row,
                    reason: format!("bad direction-number entry: {e}"),
                })?;
            if fields.len() < 3 {
                return Err(Error::Ingestion {
                    row,
                    reason: "expected d, s, a, m_1..m_s".into(),
                });
            }
            let (d, s, a) = (fields[0] as usize, fields[1] as usize, fields[2] as u32);
            if d != directions.len() + 1 {
                return Err(Error::Ingestion {
                    row,
                    reason: format!("dimension {d} out of sequence"),
                });
            }
            let m = &fields[3..];
            if s == 0 || s > BITS || m.len() != s {
                return Err(Error::Ingestion {
                    row,
                    reason: format!("degree {s} does not match {} initial values", m.len()),
                });
            }
            for (i, mi) in m.iter().enumerate() {
                if mi % 2 == 0 || *mi >= 1 << (i + 1) {
                    return Err(Error::Ingestion {
                        row,
                        reason: format!("m_{} = {mi} must be odd and below 2^{}", i + 1, i + 1),
                    });
                }
            }
            directions.push(recurrence(s, a, m));
        }
        Ok(SobolGenerator { directions })
    }

    pub fn max_dimension(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self, dim: usize) -> &[u32; BITS] {
        &self.directions[dim]
    }

    /// Integer coordinates of points `start..start + count` in Gray-code
    /// order, row-major (`count × dims`).
    pub fn integers(&self, dims: usize, start: u64, count: usize) -> Vec<u32> {
        assert!(dims <= self.max_dimension());
        assert!(start + count as u64 <= MAX_POINTS);
        let mut out = Vec::with_capacity(count * dims);
        if count == 0 {
            return out;
        }
        // state at `start`: XOR of directions over the bits of gray(start)
        let gray = start ^ (start >> 1);
        let mut state: Vec<u32> = (0..dims)
            .map(|j| {
                let v = &self.directions[j];
                (0..BITS)
                    .filter(|k| gray >> k & 1 == 1)
                    .fold(0u32, |acc, k| acc ^ v[k])
            })
            .collect();
        out.extend_from_slice(&state);
        for i in start + 1..start + count as u64 {
            let c = i.trailing_zeros() as usize;
            for (j, s) in state.iter_mut().enumerate() {
                *s ^= self.directions[j][c];
            }
            out.extend_from_slice(&state);
        }
        out
    }
}

fn first_dimension() -> [u32; BITS] {
    let mut v = [0u32; BITS];
    for (k, vk) in v.iter_mut().enumerate() {
        *vk = 1u32 << (BITS - 1 - k);
    }
    v
}

fn recurrence(s: usize, a: u32, m: &[u64]) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    for k in 0..BITS {
        v[k] = if k < s {
            (m[k] as u32) << (BITS - 1 - k)
        } else {
            let mut x = v[k - s] ^ (v[k - s] >> s);
            for i in 1..s {
                if (a >> (s - 1 - i)) & 1 == 1 {
                    x ^= v[k - i];
                }
            }
            x
        };
    }
    v
}

#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Nested uniform scrambling of a 32-digit point followed by 21 random
/// trailing digits, returned on the 2^-53 grid.
///
/// Digit `k` (most significant first) is flipped by a pseudo-random bit that
/// depends only on `key`, `k` and the `k` leading digits of the input, which is
/// Owen's nested scramble. Digits beyond the 32nd are all zero in the input, so
/// their nested scramble is a uniform random tail determined by the full
/// prefix.
#[inline]
pub fn owen_scramble(x: u32, key: u64) -> f64 {
    let mut out = 0u32;
    for k in 0..BITS {
        let prefix = if k == 0 { 0 } else { (x >> (BITS - k)) as u64 };
        let tag = ((k as u64) << 32) | prefix;
        let flip = (mix64(key ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)) >> 63) as u32;
        let bit = ((x >> (BITS - 1 - k)) & 1) ^ flip;
        out |= bit << (BITS - 1 - k);
    }
    let tail = mix64(key ^ 0x5bd1_e995_0000_0000 ^ (x as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)) >> 43;
    (((out as u64) << 21) | tail) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: u32) -> f64 {
        x as f64 / MAX_POINTS as f64
    }

    #[test]
    fn first_coordinates_are_van_der_corput() {
        let g = SobolGenerator::bundled();
        let pts = g.integers(1, 0, 4);
        let mut v: Vec<f64> = pts.into_iter().map(unit).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(v, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn bundled_table_has_enough_dimensions() {
        assert!(SobolGenerator::bundled().max_dimension() >= 1100);
    }

    // Reference values from an independent Sobol implementation using the
    // same Joe–Kuo table, unscrambled, Gray-code order.
    #[test]
    fn matches_reference_points() {
        let g = SobolGenerator::bundled();
        let dims = [0usize, 1, 2, 99, 500, 1109, 1110];
        let expected: [(u64, [f64; 7]); 5] = [
            (1, [0.5; 7]),
            (2, [0.75, 0.25, 0.25, 0.75, 0.25, 0.25, 0.75]),
            (5, [0.875, 0.875, 0.125, 0.375, 0.875, 0.375, 0.375]),
            (37, [0.921875, 0.640625, 0.578125, 0.171875, 0.171875, 0.703125, 0.984375]),
            (63, [0.015625, 0.796875, 0.359375, 0.078125, 0.640625, 0.046875, 0.015625]),
        ];
        let all = g.integers(1111, 0, 64);
        for (i, row) in expected {
            for (k, d) in dims.iter().enumerate() {
                assert_eq!(unit(all[i as usize * 1111 + d]), row[k], "point {i} dim {d}");
            }
        }
        // starting mid-sequence agrees with running from zero
        let tail = g.integers(1111, 37, 27);
        assert_eq!(&tail[..], &all[37 * 1111..]);
    }

    #[test]
    fn first_eight_points_in_six_dims() {
        let g = SobolGenerator::bundled();
        let pts: Vec<f64> = g.integers(6, 0, 8).into_iter().map(unit).collect();
        let expected = [
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25, 0.25, 0.75, 0.75],
            [0.25, 0.75, 0.75, 0.75, 0.25, 0.25],
            [0.375, 0.375, 0.625, 0.875, 0.375, 0.125],
            [0.875, 0.875, 0.125, 0.375, 0.875, 0.625],
            [0.625, 0.125, 0.875, 0.625, 0.625, 0.875],
            [0.125, 0.625, 0.375, 0.125, 0.125, 0.375],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(&pts[i * 6..i * 6 + 6], &row[..]);
        }
    }

    #[test]
    fn rejects_malformed_rows() {
        assert!(SobolGenerator::parse("d s a m\n2 1 0 2\n").is_err());
        assert!(SobolGenerator::parse("d s a m\n3 1 0 1\n").is_err());
        assert!(SobolGenerator::parse("d s a m\n2 2 0 1\n").is_err());
        let ok = SobolGenerator::parse("d s a m\n2 1 0 1\n3 2 1 1 3\n").unwrap();
        assert_eq!(ok.max_dimension(), 3);
    }

    #[test]
    fn scramble_is_bijective_on_prefixes() {
        // 2^10 distinct 10-digit prefixes map to 2^10 distinct cells.
        let key = 0x1234_5678;
        let mut cells: Vec<u64> = (0..1024u32)
            .map(|i| (owen_scramble(i << 22, key) * 1024.0) as u64)
            .collect();
        cells.sort_unstable();
        cells.dedup();
        assert_eq!(cells.len(), 1024);
    }
}
