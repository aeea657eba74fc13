//! Randomized invariants over the pure numeric kernels.

use fedfair::incentive::{sampling_distribution, selection_probability};
use fedfair::metrics::{equality_spread, pearson};
use fedfair::stopping::f_cdf;
use fedfair::valuation::ContributionLedger;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        psi in prop::collection::vec(-5.0f64..5.0, 2..12),
        beta in 0.05f64..100.0,
        shift in -10.0f64..10.0,
    ) {
        let rho = sampling_distribution(&psi, beta).unwrap();
        prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(rho.iter().all(|r| *r > 0.0));
        let shifted: Vec<f64> = psi.iter().map(|x| x + shift).collect();
        let rho2 = sampling_distribution(&shifted, beta).unwrap();
        for (a, b) in rho.iter().zip(&rho2) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn selection_probability_is_monotone(
        rho in 1e-6f64..1.0,
        bump in 1e-6f64..0.5,
        k in 1usize..20,
    ) {
        let q = selection_probability(rho, k);
        prop_assert!(q > 0.0 && q <= 1.0);
        let higher = (rho + bump).min(1.0);
        prop_assert!(selection_probability(higher, k) >= q);
        prop_assert!(selection_probability(rho, k + 1) >= q);
    }

    #[test]
    fn f_cdf_stays_in_range_and_monotone(
        d1 in 1.0f64..40.0,
        d2 in 1.0f64..40.0,
        x in 0.0f64..50.0,
        dx in 0.01f64..5.0,
    ) {
        let a = f_cdf(x, d1, d2).unwrap();
        let b = f_cdf(x + dx, d1, d2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn pearson_is_invariant_to_positive_affine_maps(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
        scale in 0.1f64..10.0,
        offset in -5.0f64..5.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Ok(base) = pearson(&x, &y) {
            let mapped: Vec<f64> = x.iter().map(|v| scale * v + offset).collect();
            let again = pearson(&mapped, &y).unwrap();
            prop_assert!((base - again).abs() <= 1e-12);
        }
    }

    #[test]
    fn ledger_mean_matches_two_pass_mean(
        rows in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 1..60),
    ) {
        let mut ledger = ContributionLedger::new(3);
        for row in &rows {
            ledger.push(row.clone()).unwrap();
        }
        for j in 0..3 {
            let direct: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            prop_assert!((ledger.psi()[j] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn spread_bounds_are_consistent(
        values in prop::collection::vec(-100.0f64..100.0, 1..40),
    ) {
        let s = equality_spread(&values).unwrap();
        prop_assert!(s.min <= s.max);
        prop_assert!(s.std >= 0.0);
        // Population std never exceeds half the range.
        prop_assert!(s.std <= (s.max - s.min) / 2.0 + 1e-12);
    }
}
