use proptest::prelude::*;

use mlmc_vb::gaussian::{rp_assemble, RpParams, SfParams};
use mlmc_vb::mlmc::{antithetic_delta, LevelDistribution};
use mlmc_vb::numerics::{log_sum_exp, LowerTriangular};

fn log_mean_exp(v: &[f64]) -> f64 {
    log_sum_exp(v) - (v.len() as f64).ln()
}

fn factor(p: usize, entries: &[f64]) -> LowerTriangular {
    let mut l = LowerTriangular::zeros(p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            l.set(i, j, if i == j { 0.2 + entries[k].abs() } else { entries[k] });
            k += 1;
        }
    }
    l
}

proptest! {
    #[test]
    fn antithetic_delta_is_full_minus_mean_of_halves(
        logs in prop::collection::vec(-30.0f64..5.0, 16),
        level in 1usize..=3,
    ) {
        let m = 2usize << level;
        let v = &logs[..m];
        let (a, b) = v.split_at(m / 2);
        let expected = log_mean_exp(v) - 0.5 * (log_mean_exp(a) + log_mean_exp(b));
        let got = antithetic_delta(v, level).unwrap();
        prop_assert!((got - expected).abs() < 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn antithetic_delta_ignores_a_common_shift(
        logs in prop::collection::vec(-10.0f64..10.0, 8),
        shift in -500.0f64..500.0,
    ) {
        let shifted: Vec<f64> = logs.iter().map(|x| x + shift).collect();
        let d0 = antithetic_delta(&logs, 2).unwrap();
        let d1 = antithetic_delta(&shifted, 2).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-9);
        let l0 = antithetic_delta(&logs, 0).unwrap();
        let l1 = antithetic_delta(&shifted, 0).unwrap();
        prop_assert!((l1 - l0 - shift).abs() < 1e-9);
    }

    #[test]
    fn antithetic_delta_is_non_negative(logs in prop::collection::vec(-20.0f64..20.0, 8)) {
        // Jensen on the concave log: the pooled estimate dominates the mean
        // of the half-sample estimates.
        prop_assert!(antithetic_delta(&logs, 2).unwrap() >= -1e-12);
    }

    #[test]
    fn level_weights_sum_to_one(alpha in 0.3f64..3.0, max_level in 1usize..25) {
        let d = LevelDistribution::with_max_level(alpha, 4, max_level).unwrap();
        let total: f64 = d.weights().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn level_sampling_is_monotone(alpha in 0.5f64..3.0, u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let d = LevelDistribution::new(alpha, 1).unwrap();
        let (lo, hi) = if u <= v { (u, v) } else { (v, u) };
        prop_assert!(d.sample_level(lo) <= d.sample_level(hi));
    }

    #[test]
    fn rp_assemble_is_linear_in_g(
        g in prop::collection::vec(-5.0f64..5.0, 3),
        h in prop::collection::vec(-5.0f64..5.0, 3),
        u in prop::collection::vec(-3.0f64..3.0, 3),
        c in -4.0f64..4.0,
    ) {
        let combo: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a + c * b).collect();
        let lhs = rp_assemble(&combo, &u);
        let rg = rp_assemble(&g, &u);
        let rh = rp_assemble(&h, &u);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - rg[i] - c * rh[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn parameterizations_agree(
        mu in prop::collection::vec(-3.0f64..3.0, 3),
        entries in prop::collection::vec(-1.5f64..1.5, 6),
        theta in prop::collection::vec(-3.0f64..3.0, 3),
    ) {
        let rp = RpParams::new(mu.clone(), factor(3, &entries)).unwrap();
        let sf: SfParams = rp.to_sf().unwrap();
        let (a, b) = (rp.logq(&theta), sf.logq(&theta));
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        let back = sf.to_rp().unwrap();
        for (x, y) in back.to_lambda().iter().zip(rp.to_lambda()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }
}
