use krr_core::bootstrap::{
    self, bootstrap_draw, build_band, critical_value, gaussian_matrix, sigma_hat, BootstrapConfig, MultiplierScheme,
    VarianceMode, WidthMode,
};
use krr_core::krr::fit;
use krr_core::{Dataset, EvalGrid, FittedKrr, InputPoint, KernelSpec};
use proptest::prelude::*;

fn model(n: usize, seed: u64) -> FittedKrr {
    // small deterministic design with non-constant residuals
    let xs: Vec<InputPoint> = (0..n).map(|i| InputPoint::scalar((i as f64 + 0.5) / n as f64)).collect();
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            (6.0 * t).sin() + 0.3 * (((i as u64 + 1).wrapping_mul(seed | 1) % 97) as f64 / 97.0 - 0.5)
        })
        .collect();
    fit(&KernelSpec::gaussian(0.15).unwrap(), &Dataset::new(xs, ys).unwrap(), 0.05).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn critical_value_is_monotone_in_alpha(draws in prop::collection::vec(0.0..10.0f64, 1..300), a in 0.001..0.999f64, b in 0.001..0.999f64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(critical_value(&draws, lo).unwrap() >= critical_value(&draws, hi).unwrap());
    }

    #[test]
    fn bands_are_ordered_and_nested(n in 5usize..40, seed in any::<u64>(), fixed in any::<bool>()) {
        let m = model(n, seed);
        let grid = EvalGrid::unit_interval(17).unwrap();
        let mode = if fixed { WidthMode::Fixed } else { WidthMode::Variable };
        let cfg = BootstrapConfig { draws: 200, seed, width_mode: mode, ..Default::default() };
        let wide = build_band(&m, &grid, &BootstrapConfig { alpha: 0.01, ..cfg }).unwrap();
        let narrow = build_band(&m, &grid, &BootstrapConfig { alpha: 0.05, ..cfg }).unwrap();
        let rn = (n as f64).sqrt();
        for j in 0..grid.len() {
            prop_assert!(narrow.lower[j] <= narrow.estimate[j] && narrow.estimate[j] <= narrow.upper[j]);
            prop_assert!(wide.lower[j] <= narrow.lower[j] && narrow.upper[j] <= wide.upper[j]);
            let half = narrow.upper[j] - narrow.estimate[j];
            let want = match mode {
                WidthMode::Fixed => narrow.critical_value,
                _ => narrow.critical_value * narrow.sigma[j] / rn,
            };
            prop_assert!((half - want).abs() <= 1e-12 * (1.0 + want));
        }
    }

    #[test]
    fn bands_are_reproducible(seed in any::<u64>(), scheme in prop::sample::select(vec![MultiplierScheme::FullMatrix, MultiplierScheme::Centered])) {
        let m = model(25, 3);
        let grid = EvalGrid::unit_interval(9).unwrap();
        let cfg = BootstrapConfig { draws: 50, seed, scheme, ..Default::default() };
        prop_assert_eq!(build_band(&m, &grid, &cfg).unwrap(), build_band(&m, &grid, &cfg).unwrap());
    }
}

/// Mean zero and `Var 𝔅(x) = σ̂²_small(x)/n`, checked over 50,000 full-matrix draws.
#[test]
fn bootstrap_process_has_mean_zero_and_small_sample_variance() {
    let n = 20;
    let m = model(n, 11);
    let grid = EvalGrid::new((0..5).map(|j| InputPoint::scalar(0.1 + 0.2 * j as f64)).collect()).unwrap();
    let b = 50_000;
    let mut sum = vec![0.0; grid.len()];
    let mut sq = vec![0.0; grid.len()];
    let mut fourth = vec![0.0; grid.len()];
    for it in 0..b {
        let d = bootstrap_draw(&m, &grid, &gaussian_matrix(n, 7, it as u64)).unwrap();
        for j in 0..grid.len() {
            sum[j] += d[j];
            sq[j] += d[j] * d[j];
            fourth[j] += d[j].powi(4);
        }
    }
    for (j, x) in grid.points().iter().enumerate() {
        let sigma = sigma_hat(&m, x, VarianceMode::SmallSample).unwrap();
        let var = sigma * sigma / n as f64;
        let mean = sum[j] / b as f64;
        assert!(mean.abs() <= 4.0 * var.sqrt() / (b as f64).sqrt(), "mean {mean} at {j}");
        let emp = sq[j] / b as f64;
        let se = ((fourth[j] / b as f64 - emp * emp) / b as f64).sqrt();
        assert!((emp - var).abs() <= 3.0 * se, "var {emp} vs {var} (se {se}) at {j}");
    }
}

#[test]
fn hnorm_radius_dominates_scaled_sup_for_linear_kernel() {
    // Cauchy–Schwarz: |g(x)| ≤ √k(x,x) ‖g‖_H
    let xs: Vec<InputPoint> = (0..30).map(|i| InputPoint::Vector(vec![(i as f64 / 29.0) - 0.5])).collect();
    let ys: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 1.0 } else { -0.4 }).collect();
    let m = fit(&KernelSpec::linear(0.5).unwrap(), &Dataset::new(xs, ys).unwrap(), 0.1).unwrap();
    let grid = EvalGrid::new((0..=40).map(|j| InputPoint::Vector(vec![j as f64 / 40.0 - 0.5])).collect()).unwrap();
    for it in 0..50 {
        let h = gaussian_matrix(30, 2, it);
        let draw = bootstrap_draw(&m, &grid, &h).unwrap();
        // draw is on the estimator scale, the H statistic on the √n scale
        let sup = draw.iter().fold(0.0f64, |a, d| a.max(d.abs())) * (30f64).sqrt();
        assert!(sup <= 0.5 * bootstrap::hnorm_statistic(&m, &h).unwrap() * (1.0 + 1e-10));
    }
}
