use krr_core::spectral::{self, effective_dimension, local_width_sq, report_from_eigenvalues, tail_mass};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn local_width_sums_agree_both_ways(mut vals in prop::collection::vec(0.0..1.0f64, 1..200)) {
        vals.sort_by(|a, b| b.total_cmp(a));
        let report = report_from_eigenvalues(vals.clone(), &spectral::default_lambda_grid()).unwrap();
        let trace: f64 = vals.iter().sum();
        prop_assert!((report.local_width[0].powi(2) - trace).abs() <= 1e-10 * (1.0 + trace));
        prop_assert_eq!(*report.local_width.last().unwrap(), 0.0);
        let mut head = 0.0;
        for m in 0..=vals.len() {
            let forward = (trace - head).max(0.0);
            prop_assert!((report.tail_sums[m] - forward).abs() <= 1e-10 * (1.0 + trace));
            prop_assert!((local_width_sq(&vals, m) - report.tail_sums[m]).abs() <= 1e-10 * (1.0 + trace));
            if m > 0 {
                prop_assert!(report.local_width[m] <= report.local_width[m - 1]);
            }
            if m < vals.len() {
                head += vals[m];
            }
        }
        prop_assert_eq!(tail_mass(&report, 0).unwrap(), 1.0);
        prop_assert_eq!(tail_mass(&report, vals.len()).unwrap(), 0.0);
    }

    #[test]
    fn effective_dimension_decreases_in_lambda(vals in prop::collection::vec(1e-6..1.0f64, 1..100)) {
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let lambda = 1e-3 * 3f64.powi(k);
            let d = effective_dimension(&vals, lambda).unwrap();
            prop_assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn spectrum_of_a_random_gram_is_consistent(entries in prop::collection::vec(-1.0..1.0f64, 4..=64)) {
        let p = 4;
        let n = entries.len() / p;
        let x = DMatrix::from_row_slice(n, p, &entries[..n * p]);
        let gram = &x * x.transpose();
        let report = spectral::spectrum(&gram, n).unwrap();
        prop_assert!((report.trace - gram.trace() / n as f64).abs() <= 1e-10 * (1.0 + report.trace));
        prop_assert!(report.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        // rank ≤ p
        prop_assert!(tail_mass(&report, p.min(n)).unwrap() <= 1e-10);
    }
}

#[test]
fn polynomial_spectra_obey_the_tail_bound() {
    for omega in [1.0, 2.0] {
        for beta in [1.5f64, 2.0, 3.0] {
            let vals: Vec<f64> = (1..=20_000).map(|s| omega * (s as f64).powf(-beta)).collect();
            for m in 1..=200usize {
                let bound = omega * (m as f64).powf(1.0 - beta) / (beta - 1.0);
                assert!(local_width_sq(&vals, m) <= bound, "ω={omega} β={beta} m={m}");
            }
        }
    }
}
