//! Symmetrized Gaussian multiplier bootstrap and confidence bands.
//!
//! For an `n × n` matrix `h` of independent standard normals put
//! `β = diag(ε̂)(hᵀ − h)1/√2`. The process `v_xᵀβ` mimics `√n(f̂ − f_λ)`;
//! this module reports draws on the scale of the estimator itself,
//!
//! ```text
//! 𝔅(x) = v_xᵀ β / √n,
//! ```
//!
//! whose conditional variance is `σ̂²(x)/n` with the small-sample `σ̂`. Hence
//!
//! * variable width: statistic `max_x √n|𝔅(x)|/σ̂(x)`, half-width `t̂ σ̂(x)/√n`;
//! * fixed width: statistic `max_x |𝔅(x)|`, half-width `t̂`;
//! * H-norm: statistic `‖v_·ᵀβ‖_H = √(βᵀ(K+nλ)^{-1}K(K+nλ)^{-1}β)` and
//!   radius `t̂/√n`.
//!
//! The H-norm formula follows from writing the process as
//! `Σ_i γ_i k(·, X_i)` with `γ = (K+nλ)^{-1}β`, whose squared norm is `γᵀKγ`.
//!
//! The conditional covariance of the draws is
//! `V diag(ε̂)(I − 11ᵀ/n) diag(ε̂) Vᵀ` where the rows of `V` are weight
//! vectors, because `E[(hᵀ−h)11ᵀ(h−hᵀ)]/2 = nI − 11ᵀ`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::InputPoint;
use crate::krr::{EvalGrid, FittedKrr};
use crate::math;
use crate::parallel;
use crate::rng;

/// Relative floor under which grid points are dropped from the variable-width sup.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Below this sample size [`VarianceMode::Auto`] uses the small-sample variance.
pub const SMALL_SAMPLE_CUTOFF: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthMode {
    Fixed,
    Variable,
    Hnorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Small-sample below [`SMALL_SAMPLE_CUTOFF`], plain otherwise.
    #[default]
    Auto,
    /// `σ̂²(x) = n‖v_xᵀ diag(ε̂)‖²`.
    Plain,
    /// `σ̂²(x) = n v_xᵀ diag(ε̂)(I − 11ᵀ/n) diag(ε̂) v_x`, the exact conditional variance.
    SmallSample,
}

impl VarianceMode {
    pub fn resolve(self, n: usize) -> VarianceMode {
        match self {
            VarianceMode::Auto if n < SMALL_SAMPLE_CUTOFF => VarianceMode::SmallSample,
            VarianceMode::Auto => VarianceMode::Plain,
            other => other,
        }
    }
}

/// How the multiplier vector `(hᵀ − h)1/√2` is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierScheme {
    /// Draw the full `n × n` matrix `h` and antisymmetrize it.
    #[default]
    FullMatrix,
    /// Draw `z ~ N(0, I_n)` and use `√n (z − z̄1)`. Same Gaussian law as
    /// `FullMatrix` (covariance `nI − 11ᵀ`) at `O(n)` cost per draw.
    Centered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub alpha: f64,
    pub width_mode: WidthMode,
    pub variance_mode: VarianceMode,
    /// Multiplicative band expansion `(1 + δ)`.
    pub delta_expansion: f64,
    pub seed: u64,
    pub scheme: MultiplierScheme,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            draws: 500,
            alpha: 0.05,
            width_mode: WidthMode::Variable,
            variance_mode: VarianceMode::Auto,
            delta_expansion: 0.0,
            seed: 0,
            scheme: MultiplierScheme::FullMatrix,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::domain("bootstrap needs at least one draw"));
        }
        check_alpha(self.alpha)?;
        if !(self.delta_expansion >= 0.0 && self.delta_expansion.is_finite()) {
            return Err(Error::domain(format!("δ expansion {} must be finite and ≥ 0", self.delta_expansion)));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("α = {alpha} must lie in (0, 1)")))
    }
}

// ---------------------------------------------------------------------------
// Multipliers
// ---------------------------------------------------------------------------

/// The `n × n` Gaussian matrix `h` for one bootstrap iteration.
pub fn gaussian_matrix(n: usize, seed: u64, iteration: u64) -> DMatrix<f64> {
    let mut rng = rng::substream(seed, &[rng::tag::BOOTSTRAP, iteration]);
    DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng))
}

/// `(hᵀ − h)1/√2`.
pub fn antisymmetric_multipliers(h: &DMatrix<f64>) -> DVector<f64> {
    let n = h.nrows();
    DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += h[(j, i)] - h[(i, j)];
        }
        acc * core::f64::consts::FRAC_1_SQRT_2
    })
}

/// Multiplier vector for one iteration under `scheme`.
pub fn multiplier_vector(n: usize, seed: u64, iteration: u64, scheme: MultiplierScheme) -> DVector<f64> {
    match scheme {
        MultiplierScheme::FullMatrix => antisymmetric_multipliers(&gaussian_matrix(n, seed, iteration)),
        MultiplierScheme::Centered => {
            let mut rng = rng::substream(seed, &[rng::tag::BOOTSTRAP, iteration, 1]);
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            let scale = math::sqrt(n as f64);
            DVector::from_iterator(n, z.into_iter().map(|v| scale * (v - mean)))
        }
    }
}

/// `n × count` matrix of multiplier vectors for iterations `start..start+count`.
pub fn multiplier_matrix(n: usize, seed: u64, start: u64, count: usize, scheme: MultiplierScheme) -> DMatrix<f64> {
    let cols = parallel::map_indexed(count, |b| multiplier_vector(n, seed, start + b as u64, scheme));
    let mut m = DMatrix::zeros(n, count);
    for (b, c) in cols.into_iter().enumerate() {
        m.set_column(b, &c);
    }
    m
}

// ---------------------------------------------------------------------------
// Pointwise pieces
// ---------------------------------------------------------------------------

/// One bootstrap draw of the process on `grid` from an explicit Gaussian matrix.
pub fn bootstrap_draw(model: &FittedKrr, grid: &EvalGrid, h: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = model.n();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::Dimension { expected: n, found: if h.nrows() != n { h.nrows() } else { h.ncols() } });
    }
    let beta = model.residuals().component_mul(&antisymmetric_multipliers(h));
    let w = model.weight_matrix(grid.points())?;
    Ok(w.tr_mul(&beta) / math::sqrt(n as f64))
}

/// `σ̂(x)` from a weight vector and residuals.
pub fn sigma_from_weights(v: &DVector<f64>, residuals: &DVector<f64>, mode: VarianceMode) -> f64 {
    let n = v.len();
    let mut sq = 0.0;
    let mut lin = 0.0;
    for i in 0..n {
        let a = v[i] * residuals[i];
        sq += a * a;
        lin += a;
    }
    let var = match mode.resolve(n) {
        VarianceMode::SmallSample => n as f64 * sq - lin * lin,
        _ => n as f64 * sq,
    };
    math::sqrt(var.max(0.0))
}

pub fn sigma_hat(model: &FittedKrr, x: &InputPoint, mode: VarianceMode) -> Result<f64> {
    Ok(sigma_from_weights(&model.weight_vector(x)?, model.residuals(), mode))
}

/// Upper-α empirical quantile: the `⌈(1−α)B⌉`-th smallest draw.
pub fn critical_value(stat_draws: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let b = stat_draws.len();
    if b == 0 {
        return Err(Error::domain("no bootstrap draws"));
    }
    let mut sorted = stat_draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[order_index(b, alpha)])
}

// Zero-based index of the ⌈(1−α)B⌉-th order statistic, robust to α·B rounding.
fn order_index(b: usize, alpha: f64) -> usize {
    let excluded = math::floor(alpha * b as f64 + 1e-9) as usize;
    b.saturating_sub(excluded).max(1) - 1
}

/// Sup statistic of one draw.
pub fn sup_statistic(draw: &[f64], sigma: &[f64], n: usize, mode: WidthMode) -> Result<f64> {
    if draw.len() != sigma.len() {
        return Err(Error::Dimension { expected: draw.len(), found: sigma.len() });
    }
    match mode {
        WidthMode::Fixed => Ok(draw.iter().fold(0.0, |m, d| m.max(d.abs()))),
        WidthMode::Variable => {
            let floor = variance_floor(sigma)?;
            let rn = math::sqrt(n as f64);
            Ok(draw.iter().zip(sigma).filter(|(_, &s)| s >= floor).fold(0.0, |m, (d, s)| m.max((rn * d / s).abs())))
        }
        WidthMode::Hnorm => Err(Error::domain("the H-norm statistic is not a sup over a grid")),
    }
}

fn variance_floor(sigma: &[f64]) -> Result<f64> {
    let max = sigma.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok(VARIANCE_FLOOR * max)
}

/// `‖v_·ᵀβ‖_H` for the paper-scale process built from `h`.
pub fn hnorm_statistic(model: &FittedKrr, h: &DMatrix<f64>) -> Result<f64> {
    let n = model.n();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::Dimension { expected: n, found: h.nrows() });
    }
    let beta = model.residuals().component_mul(&antisymmetric_multipliers(h));
    Ok(hnorm_of_beta(model, &beta))
}

fn hnorm_of_beta(model: &FittedKrr, beta: &DVector<f64>) -> f64 {
    let gamma = model.solve(beta);
    math::sqrt((model.gram() * &gamma).dot(&gamma).max(0.0))
}

/// Largest fraction of draws inside any window `[t − δ, t + δ]`.
pub fn anticoncentration_diagnostic(stat_draws: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::domain(format!("δ = {delta} must be positive")));
    }
    if stat_draws.is_empty() {
        return Err(Error::domain("no bootstrap draws"));
    }
    let mut s = stat_draws.to_vec();
    s.sort_by(f64::total_cmp);
    let mut best = 0usize;
    let mut hi = 0usize;
    for lo in 0..s.len() {
        while hi < s.len() && s[hi] - s[lo] <= 2.0 * delta {
            hi += 1;
        }
        best = best.max(hi - lo);
    }
    Ok(best as f64 / s.len() as f64)
}

// ---------------------------------------------------------------------------
// Bands
// ---------------------------------------------------------------------------

/// Estimates, weights and variance profile on a grid, computed once.
#[derive(Debug, Clone)]
pub struct BandContext<'a> {
    model: &'a FittedKrr,
    /// Estimator-scale loading of each multiplier on each grid point: `diag(ε̂) V / √n` (n × g).
    loadings: DMatrix<f64>,
    pub estimate: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `√k(x, x)` on the grid, for bands implied by the H-norm ball.
    pub kernel_scale: Vec<f64>,
}

impl<'a> BandContext<'a> {
    pub fn new(model: &'a FittedKrr, grid: &EvalGrid, variance: VarianceMode) -> Result<Self> {
        let points = grid.points();
        let cross = model.cross_transposed(points)?;
        let weights = model.solve_many(&cross);
        let estimate = (0..points.len()).map(|j| cross.column(j).dot(model.dual_weights())).collect();
        let residuals = model.residuals();
        let sigma = (0..points.len())
            .map(|j| sigma_from_weights(&weights.column(j).into_owned(), residuals, variance))
            .collect();
        let rn = math::sqrt(model.n() as f64);
        let mut loadings = weights;
        for (i, mut row) in loadings.row_iter_mut().enumerate() {
            row *= residuals[i] / rn;
        }
        let spec = model.spec();
        let kernel_scale = points
            .iter()
            .map(|p| crate::kernels::kernel_eval(spec, p, p).map(|k| math::sqrt(k.max(0.0))))
            .collect::<Result<Vec<_>>>()?;
        Ok(BandContext { model, loadings, estimate, sigma, kernel_scale })
    }

    pub fn model(&self) -> &FittedKrr {
        self.model
    }

    pub fn grid_len(&self) -> usize {
        self.estimate.len()
    }

    /// Estimator-scale draws (g × B) for a block of multiplier vectors (n × B).
    pub fn draws(&self, multipliers: &DMatrix<f64>) -> DMatrix<f64> {
        self.loadings.tr_mul(multipliers)
    }

    /// Paper-scale H-norm statistics for a block of multiplier vectors.
    pub fn hnorm_statistics(&self, multipliers: &DMatrix<f64>) -> Vec<f64> {
        let mut beta = multipliers.clone();
        for (i, mut row) in beta.row_iter_mut().enumerate() {
            row *= self.model.residuals()[i];
        }
        let gamma = self.model.solve_many(&beta);
        let kg = self.model.gram() * &gamma;
        (0..gamma.ncols()).map(|b| math::sqrt(kg.column(b).dot(&gamma.column(b)).max(0.0))).collect()
    }

    /// Sup statistics of each column of `draws`.
    pub fn sup_statistics(&self, draws: &DMatrix<f64>, mode: WidthMode) -> Result<Vec<f64>> {
        let n = self.model.n();
        (0..draws.ncols()).map(|b| sup_statistic(draws.column(b).as_slice(), &self.sigma, n, mode)).collect()
    }

    /// Band half-widths on the grid for critical value `t` (before δ expansion).
    pub fn half_widths(&self, t: f64, mode: WidthMode) -> Vec<f64> {
        let rn = math::sqrt(self.model.n() as f64);
        match mode {
            WidthMode::Fixed => alloc::vec![t; self.grid_len()],
            WidthMode::Variable => self.sigma.iter().map(|s| t * s / rn).collect(),
            WidthMode::Hnorm => self.kernel_scale.iter().map(|k| k * t / rn).collect(),
        }
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }
}

/// Band on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub grid: EvalGrid,
    pub estimate: Vec<f64>,
    pub sigma: Vec<f64>,
    pub critical_value: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub stat_draws: Vec<f64>,
    pub width_mode: WidthMode,
    pub alpha: f64,
    pub draws: usize,
    pub seed: u64,
    pub n: usize,
    pub delta_expansion: f64,
}

/// Runs `cfg.draws` bootstrap iterations and assembles the band.
///
/// Variable width: `f̂ ± (1+δ) t̂ σ̂/√n`. Fixed width: `f̂ ± (1+δ) t̂`.
/// H-norm: the band implied by the ball of [`hnorm_ball`], half-width
/// `radius·√k(x,x)`.
pub fn build_band(model: &FittedKrr, grid: &EvalGrid, cfg: &BootstrapConfig) -> Result<BandResult> {
    cfg.validate()?;
    let ctx = BandContext::new(model, grid, cfg.variance_mode)?;
    let stat_draws = if ctx.max_sigma() == 0.0 {
        // Zero residuals: the process vanishes identically.
        alloc::vec![0.0; cfg.draws]
    } else {
        let mult = multiplier_matrix(model.n(), cfg.seed, 0, cfg.draws, cfg.scheme);
        match cfg.width_mode {
            WidthMode::Hnorm => ctx.hnorm_statistics(&mult),
            mode => ctx.sup_statistics(&ctx.draws(&mult), mode)?,
        }
    };
    let t = critical_value(&stat_draws, cfg.alpha)?;
    let half = ctx.half_widths(t * (1.0 + cfg.delta_expansion), cfg.width_mode);
    let lower = ctx.estimate.iter().zip(&half).map(|(e, h)| e - h).collect();
    let upper = ctx.estimate.iter().zip(&half).map(|(e, h)| e + h).collect();
    Ok(BandResult {
        grid: grid.clone(),
        estimate: ctx.estimate,
        sigma: ctx.sigma,
        critical_value: t,
        lower,
        upper,
        stat_draws,
        width_mode: cfg.width_mode,
        alpha: cfg.alpha,
        draws: cfg.draws,
        seed: cfg.seed,
        n: model.n(),
        delta_expansion: cfg.delta_expansion,
    })
}

/// Confidence ball `{f̂ + g : ‖g‖_H ≤ radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HNormBall {
    pub radius: f64,
    pub critical_value: f64,
    pub delta_expansion: f64,
    pub stat_draws: Vec<f64>,
}

impl HNormBall {
    /// Whether a candidate `f` (values at the training inputs, squared norm) lies in the ball around `model`.
    pub fn contains(&self, model: &FittedKrr, f_at_training: &[f64], f_norm_sq: f64) -> Result<bool> {
        Ok(model.hnorm_distance(f_at_training, f_norm_sq)? <= self.radius)
    }
}

/// H-norm confidence ball with radius `(1+δ) t̂ /√n`.
pub fn hnorm_ball(model: &FittedKrr, cfg: &BootstrapConfig) -> Result<HNormBall> {
    cfg.validate()?;
    let n = model.n();
    let mult = multiplier_matrix(n, cfg.seed, 0, cfg.draws, cfg.scheme);
    let mut beta = mult;
    for (i, mut row) in beta.row_iter_mut().enumerate() {
        row *= model.residuals()[i];
    }
    let stat_draws: Vec<f64> = (0..cfg.draws).map(|b| hnorm_of_beta(model, &beta.column(b).into_owned())).collect();
    let t = critical_value(&stat_draws, cfg.alpha)?;
    Ok(HNormBall {
        radius: (1.0 + cfg.delta_expansion) * t / math::sqrt(n as f64),
        critical_value: t,
        delta_expansion: cfg.delta_expansion,
        stat_draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::krr::{fit, Dataset};
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn toy_model(n: usize, lambda: f64, seed: u64) -> FittedKrr {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<InputPoint> = (0..n).map(|_| InputPoint::scalar(rng.gen::<f64>())).collect();
        let ys: Vec<f64> =
            xs.iter().map(|x| libm::sin(6.0 * x.as_vector().unwrap()[0]) + rng.gen_range(-1.0..1.0)).collect();
        fit(&KernelSpec::gaussian(0.2).unwrap(), &Dataset::new(xs, ys).unwrap(), lambda).unwrap()
    }

    #[test]
    fn critical_value_examples() {
        assert_eq!(critical_value(&[3.0; 7], 0.1).unwrap(), 3.0);
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(critical_value(&d, 0.05).unwrap(), 95.0);
        assert_eq!(critical_value(&[2.5], 0.05).unwrap(), 2.5);
        assert!(critical_value(&[], 0.05).is_err());
        assert!(critical_value(&d, 1.0).is_err());
        let mut prev = f64::INFINITY;
        for a in [0.01, 0.05, 0.1, 0.5, 0.9] {
            let t = critical_value(&d, a).unwrap();
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn critical_value_of_abs_normal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let d: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z.abs()
            })
            .collect();
        assert!((critical_value(&d, 0.05).unwrap() - 1.959_964).abs() < 0.03);
    }

    #[test]
    fn sup_statistic_examples() {
        assert_eq!(sup_statistic(&[0.0, 0.0], &[1.0, 2.0], 5, WidthMode::Variable).unwrap(), 0.0);
        assert_eq!(sup_statistic(&[2.0], &[1.0], 4, WidthMode::Variable).unwrap(), 4.0);
        let d = [0.5, -1.5, 0.2];
        let a = sup_statistic(&d, &[1.0, 2.0, 3.0], 9, WidthMode::Fixed).unwrap();
        let b = sup_statistic(&d, &[3.0, 1.0, 2.0], 9, WidthMode::Fixed).unwrap();
        assert_eq!(a, 1.5);
        assert_eq!(a, b);
        assert!(matches!(sup_statistic(&[1.0], &[0.0], 4, WidthMode::Variable), Err(Error::DegenerateVariance)));
        // The floored point is skipped even though its draw is huge.
        let s = sup_statistic(&[1e6, 1.0], &[1e-12, 1.0], 1, WidthMode::Variable).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn anticoncentration_examples() {
        assert_eq!(anticoncentration_diagnostic(&[1.0; 10], 0.01).unwrap(), 1.0);
        assert_eq!(anticoncentration_diagnostic(&[0.0, 0.5, 1.0], 1.0).unwrap(), 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..20_000).map(|_| rng.gen::<f64>()).collect();
        let v = anticoncentration_diagnostic(&u, 0.05).unwrap();
        // Max of ~19 overlapping binomial window counts; sd of one is ~0.002.
        assert!((v - 0.10).abs() < 0.01, "{v}");
        assert!(anticoncentration_diagnostic(&u, 0.0).is_err());
    }

    #[test]
    fn draws_vanish_for_zero_residuals_or_symmetric_h() {
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let xs: Vec<InputPoint> = [0.1, 0.3, 0.7].iter().map(|&x| InputPoint::scalar(x)).collect();
        let model = fit(&spec, &Dataset::new(xs.clone(), vec![1.0, 2.0, -1.0]).unwrap(), 0.1).unwrap();
        let grid = EvalGrid::unit_interval(9).unwrap();
        let h = gaussian_matrix(3, 1, 0);
        let sym = &h + h.transpose();
        assert!(bootstrap_draw(&model, &grid, &sym).unwrap().iter().all(|&v| v == 0.0));

        let zero = FittedKrr::from_parts(spec, xs, vec![0.0; 3], 0.1, vec![0.0; 3], vec![0.0; 3]).unwrap();
        assert!(bootstrap_draw(&zero, &grid, &h).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(sigma_hat(&zero, &InputPoint::scalar(0.5), VarianceMode::Plain).unwrap(), 0.0);
        let band = build_band(&zero, &grid, &BootstrapConfig::default()).unwrap();
        assert_eq!(band.lower, band.upper);
        assert_eq!(hnorm_ball(&zero, &BootstrapConfig::default()).unwrap().radius, 0.0);
    }

    #[test]
    fn two_point_double_sum() {
        // With V̂_i = n v_i ε̂_i, √n·𝔅 equals (1/n) Σ_ij h_ji (V̂_i − V̂_j)/√2.
        let spec = KernelSpec::gaussian(0.5).unwrap();
        let xs: Vec<InputPoint> = [0.2, 0.6].iter().map(|&x| InputPoint::scalar(x)).collect();
        let model = fit(&spec, &Dataset::new(xs, vec![1.0, -0.5]).unwrap(), 0.3).unwrap();
        let h = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.7, 2.0]);
        let x = InputPoint::scalar(0.45);
        let grid = EvalGrid::new(vec![x.clone()]).unwrap();
        let draw = bootstrap_draw(&model, &grid, &h).unwrap()[0];
        let v = model.weight_vector(&x).unwrap();
        let e = model.residuals();
        let n = 2.0;
        let vh = [n * v[0] * e[0], n * v[1] * e[1]];
        let mut sum = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                sum += h[(j, i)] * (vh[i] - vh[j]) / 2f64.sqrt();
            }
        }
        sum /= n;
        assert!((draw * n.sqrt() - sum).abs() < 1e-14, "{draw} {sum}");
    }

    #[test]
    fn small_sample_constant_residual_expansion() {
        // With ε̂ ≡ c the inner matrix is c²(I − 11ᵀ/n): σ̂² = n c² (‖v‖² − (Σv)²/n).
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let xs: Vec<InputPoint> = [0.1, 0.4, 0.8, 0.9].iter().map(|&x| InputPoint::scalar(x)).collect();
        let c = 0.7;
        let model = FittedKrr::from_parts(spec, xs, vec![0.0; 4], 0.2, vec![0.0; 4], vec![c; 4]).unwrap();
        let x = InputPoint::scalar(0.5);
        let v = model.weight_vector(&x).unwrap();
        let want = 4.0 * c * c * (v.norm_squared() - v.sum() * v.sum() / 4.0);
        let got = sigma_hat(&model, &x, VarianceMode::SmallSample).unwrap();
        assert!((got * got - want).abs() < 1e-14);
        let plain = sigma_hat(&model, &x, VarianceMode::Plain).unwrap();
        assert!((plain * plain - 4.0 * c * c * v.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn hnorm_statistic_single_point() {
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let model = fit(&spec, &Dataset::new(vec![InputPoint::scalar(0.5)], vec![2.0]).unwrap(), 0.25).unwrap();
        let h = DMatrix::from_element(1, 1, 1.3);
        // (hᵀ − h) = 0 when n = 1, so β = 0.
        assert_eq!(hnorm_statistic(&model, &h).unwrap(), 0.0);
        // Direct check of the scalar formula for an explicit β.
        let beta = DVector::from_element(1, 0.8);
        let want = 0.8 * 1.0 / (1.0 + 0.25);
        assert!((hnorm_of_beta(&model, &beta) - want).abs() < 1e-14);
    }

    #[test]
    fn hnorm_dominates_sup_for_linear_kernel() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<InputPoint> = (0..15).map(|_| InputPoint::Vector(vec![rng.gen_range(-1.0..1.0)])).collect();
        let ys: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kappa = 1.0; // |x| ≤ 1 on the grid
        let model = fit(&KernelSpec::linear(kappa).unwrap(), &Dataset::new(xs, ys).unwrap(), 0.1).unwrap();
        let grid =
            EvalGrid::new((0..=200).map(|j| InputPoint::Vector(vec![-1.0 + j as f64 / 100.0])).collect()).unwrap();
        for it in 0..20 {
            let h = gaussian_matrix(15, 9, it);
            let draw = bootstrap_draw(&model, &grid, &h).unwrap();
            let sup = sup_statistic(draw.as_slice(), &vec![1.0; grid.len()], 15, WidthMode::Fixed).unwrap();
            let hn = hnorm_statistic(&model, &h).unwrap();
            assert!(sup * 15f64.sqrt() <= kappa * hn * (1.0 + 1e-12));
        }
    }

    #[test]
    fn band_invariants_and_nesting() {
        let model = toy_model(40, 0.1, 1);
        let grid = EvalGrid::unit_interval(33).unwrap();
        let mut cfg = BootstrapConfig { draws: 300, seed: 4, ..Default::default() };
        let var = build_band(&model, &grid, &cfg).unwrap();
        let rn = 40f64.sqrt();
        for j in 0..grid.len() {
            assert!(var.lower[j] <= var.estimate[j] && var.estimate[j] <= var.upper[j]);
            let want = var.critical_value * var.sigma[j] / rn;
            assert!((var.upper[j] - var.estimate[j] - want).abs() < 1e-12);
        }
        cfg.width_mode = WidthMode::Fixed;
        let fixed = build_band(&model, &grid, &cfg).unwrap();
        for j in 0..grid.len() {
            assert!((fixed.upper[j] - fixed.estimate[j] - fixed.critical_value).abs() < 1e-12);
        }
        cfg.width_mode = WidthMode::Variable;
        cfg.alpha = 0.01;
        let wide = build_band(&model, &grid, &cfg).unwrap();
        for j in 0..grid.len() {
            assert!(wide.lower[j] <= var.lower[j] && wide.upper[j] >= var.upper[j]);
        }
        let again = build_band(&model, &grid, &cfg).unwrap();
        assert_eq!(again, wide);
        cfg.draws = 1;
        let one = build_band(&model, &grid, &cfg).unwrap();
        assert_eq!(one.critical_value, one.stat_draws[0]);
    }

    #[test]
    fn fixed_and_variable_agree_for_constant_sigma() {
        // Single-point grid: σ̂ is trivially constant, so the two statistics are proportional.
        let model = toy_model(30, 0.1, 2);
        let grid = EvalGrid::new(vec![InputPoint::scalar(0.4)]).unwrap();
        let cfg = BootstrapConfig { draws: 200, seed: 8, width_mode: WidthMode::Variable, ..Default::default() };
        let var = build_band(&model, &grid, &cfg).unwrap();
        let fixed = build_band(&model, &grid, &BootstrapConfig { width_mode: WidthMode::Fixed, ..cfg }).unwrap();
        let scale = var.sigma[0] / 30f64.sqrt();
        assert!((fixed.critical_value - var.critical_value * scale).abs() < 1e-12);
        assert!((fixed.upper[0] - var.upper[0]).abs() < 1e-12);
    }

    #[test]
    fn delta_expansion_scales_radius() {
        let model = toy_model(25, 0.1, 3);
        let cfg = BootstrapConfig { draws: 100, seed: 1, ..Default::default() };
        let b0 = hnorm_ball(&model, &cfg).unwrap();
        assert!((b0.radius - b0.critical_value / 5.0).abs() < 1e-14);
        let b1 = hnorm_ball(&model, &BootstrapConfig { delta_expansion: 0.5, ..cfg }).unwrap();
        assert!((b1.radius - 1.5 * b0.radius).abs() < 1e-14);
        // The band path computes the same H statistics.
        let grid = EvalGrid::unit_interval(5).unwrap();
        let band = build_band(&model, &grid, &BootstrapConfig { width_mode: WidthMode::Hnorm, ..cfg }).unwrap();
        for (a, b) in band.stat_draws.iter().zip(&b0.stat_draws) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn multiplier_schemes_share_covariance() {
        // Both schemes have covariance nI − 11ᵀ.
        let n = 5;
        let reps = 40_000;
        for scheme in [MultiplierScheme::FullMatrix, MultiplierScheme::Centered] {
            let m = multiplier_matrix(n, 17, 0, reps, scheme);
            let cov = &m * m.transpose() / reps as f64;
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j { n as f64 - 1.0 } else { -1.0 };
                    // sd of an entry is at most √((n−1)² + (n−1)²)/√reps
                    let se = ((2.0 * (n as f64 - 1.0).powi(2)) / reps as f64).sqrt();
                    assert!((cov[(i, j)] - want).abs() < 4.0 * se, "{scheme:?} ({i},{j}) {}", cov[(i, j)]);
                }
            }
        }
    }
}
