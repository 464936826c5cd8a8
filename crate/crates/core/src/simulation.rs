//! Simulation designs and coverage studies.
//!
//! Scalar designs draw `X ~ Unif[0,1]`, ranking designs draw a uniform
//! permutation, and `Y = f₀(X) + ε` with `ε ~ Unif[-w, w]` (`w = 2` by
//! default).
//!
//! Eigenfunctions of the kernel integral operator are approximated by
//! Nyström on a reference sample `r_1..r_m` (midpoints `(j + 1/2)/m` for
//! scalar designs, every permutation for rankings). If `(μ_i, u_i)` are the
//! top eigenpairs of `K_ref/m`, then `e_i(x) = K_{x,ref} u_i / √(m μ_i)` are
//! exact eigenfunctions of the reference-sample operator with unit RKHS norm.
//! The pseudo-true target `f_λ` solves the population ridge problem under
//! the same reference measure: `f_λ = K_{·,ref} b` with
//! `(K_ref + mλI) b = f₀(r)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, BandContext, MultiplierScheme, VarianceMode, WidthMode};
use crate::error::{Error, Result};
use crate::kernels::{self, max_discordant, InputPoint, KernelSpec, MallowsConvention, MaternSmoothness, Ranking};
use crate::krr::{self, Dataset, EvalGrid, FittedKrr, Lambda};
use crate::linalg::{self, SpdFactor};
use crate::math;
use crate::parallel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    GaussianEigen,
    Sobolev1,
    Sobolev2,
    StepMisspec,
    Ranking,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::GaussianEigen,
        ScenarioName::Sobolev1,
        ScenarioName::Sobolev2,
        ScenarioName::StepMisspec,
        ScenarioName::Ranking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::GaussianEigen => "gaussian_eigen",
            ScenarioName::Sobolev1 => "sobolev1",
            ScenarioName::Sobolev2 => "sobolev2",
            ScenarioName::StepMisspec => "step_misspec",
            ScenarioName::Ranking => "ranking",
        }
    }

    /// Default form of `f₀`.
    pub fn default_truth(self) -> TruthForm {
        match self {
            ScenarioName::Sobolev1 | ScenarioName::Sobolev2 => TruthForm::ThirdEigen,
            _ => TruthForm::Mix5,
        }
    }
}

impl core::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = ScenarioName::ALL.iter().map(|n| n.as_str()).collect();
            Error::config(format!("unknown scenario {s:?}; valid names: {}", names.join(", ")))
        })
    }
}

impl core::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How `f₀` is built from the leading eigenfunctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthForm {
    /// `f₀ = Σ_{i≤5} g_i e_i / √5` with `g ~ N(0, I_5)` drawn once from the seed.
    Mix5,
    /// `f₀ = e_3`.
    ThirdEigen,
}

/// Scale of each eigenfunction `e_i` entering `f₀`.
///
/// With `φ_i` the `L²(P)`-orthonormal eigenfunctions and `μ_i` their
/// eigenvalues, the choices are `e_i = √μ_i φ_i` (unit RKHS norm),
/// `e_i = φ_i`, `e_i = φ_i / √n` (unit-length eigenvectors of an `n`-point
/// Gram matrix), or `e_i = φ_i / √m` (unit-length eigenvectors of the
/// `m`-point reference Gram matrix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Rkhs,
    L2,
    Eigenvector,
    #[default]
    Reference,
}

impl core::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rkhs" => Ok(Normalization::Rkhs),
            "l2" => Ok(Normalization::L2),
            "eigenvector" => Ok(Normalization::Eigenvector),
            "reference" => Ok(Normalization::Reference),
            _ => Err(Error::config(format!("unknown normalization {s:?}; valid: rkhs, l2, eigenvector, reference"))),
        }
    }
}

impl core::str::FromStr for TruthForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mix5" => Ok(TruthForm::Mix5),
            "third_eigen" => Ok(TruthForm::ThirdEigen),
            _ => Err(Error::config(format!("unknown truth form {s:?}; valid: mix5, third_eigen"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: ScenarioName,
    pub n: usize,
    pub lambda: Lambda,
    pub reps: usize,
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Scalar designs: number of equispaced grid points on `[0,1]`.
    /// Ranking designs evaluate on the training inputs.
    pub grid_size: usize,
    /// `None` picks [`ScenarioName::default_truth`].
    pub truth_form: Option<TruthForm>,
    pub normalization: Normalization,
    /// Gaussian/Matérn lengthscale.
    pub lengthscale: f64,
    /// Number of reference points for scalar designs.
    pub reference_size: usize,
    /// Alternatives in the ranking design.
    pub ranking_q: usize,
    pub mallows_convention: MallowsConvention,
    /// Half-width `w` of the uniform noise.
    pub noise: f64,
    pub variance_mode: VarianceMode,
    pub scheme: MultiplierScheme,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: ScenarioName::GaussianEigen,
            n: 500,
            lambda: Lambda::Auto,
            reps: 500,
            draws: 500,
            alpha: 0.05,
            seed: 0,
            grid_size: 512,
            truth_form: None,
            normalization: Normalization::Reference,
            lengthscale: 0.1,
            reference_size: 2000,
            ranking_q: 7,
            mallows_convention: MallowsConvention::Reciprocal,
            noise: 2.0,
            variance_mode: VarianceMode::Auto,
            scheme: MultiplierScheme::Centered,
        }
    }
}

/// Largest `q` for which the ranking design enumerates the whole group.
pub const MAX_RANKING_Q: usize = 7;

impl Scenario {
    pub fn new(name: ScenarioName, n: usize) -> Self {
        Scenario { name, n, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::config(format!("n = {} must be ≥ 10", self.n)));
        }
        if self.reps == 0 || self.draws == 0 {
            return Err(Error::config("reps and draws must be ≥ 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("α = {} must lie in (0, 1)", self.alpha)));
        }
        if self.grid_size == 0 || self.reference_size < 10 {
            return Err(Error::config("grid_size must be ≥ 1 and reference_size ≥ 10"));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::config("lengthscale must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise half-width must be ≥ 0"));
        }
        if self.name == ScenarioName::Ranking && !(3..=MAX_RANKING_Q).contains(&self.ranking_q) {
            return Err(Error::config(format!("ranking_q must lie in 3..={MAX_RANKING_Q}")));
        }
        self.lambda.resolve(self.n)?;
        Ok(())
    }

    pub fn truth_form(&self) -> TruthForm {
        self.truth_form.unwrap_or(self.name.default_truth())
    }

    pub fn resolved_lambda(&self) -> Result<f64> {
        self.lambda.resolve(self.n)
    }

    /// Kernel used both to build `f₀` and to fit.
    pub fn kernel(&self) -> Result<KernelSpec> {
        let l = self.lengthscale;
        match self.name {
            ScenarioName::GaussianEigen | ScenarioName::StepMisspec => KernelSpec::gaussian(l),
            ScenarioName::Sobolev1 => KernelSpec::matern(MaternSmoothness::Half, l),
            ScenarioName::Sobolev2 => KernelSpec::matern(MaternSmoothness::ThreeHalves, l),
            ScenarioName::Ranking => {
                let median = uniform_discordance_median(self.ranking_q);
                let h = kernels::MedianHeuristic { median, reciprocal: 1.0 / median };
                KernelSpec::mallows(h.mallows_lengthscale(self.mallows_convention))
            }
        }
    }

    fn is_ranking(&self) -> bool {
        self.name == ScenarioName::Ranking
    }
}

/// Median of the discordant-pair count between two independent uniform
/// permutations of `q` items (the Mahonian distribution), averaging the two
/// middle values when the cumulative mass hits exactly one half.
pub fn uniform_discordance_median(q: usize) -> f64 {
    // counts[k] = number of permutations with k inversions
    let mut counts = vec![1u128];
    for m in 2..=q {
        let mut next = vec![0u128; counts.len() + m - 1];
        for (k, &c) in counts.iter().enumerate() {
            for j in 0..m {
                next[k + j] += c;
            }
        }
        counts = next;
    }
    let total: u128 = counts.iter().sum();
    let mut cum = 0u128;
    for (k, &c) in counts.iter().enumerate() {
        cum += c;
        if 2 * cum > total {
            return k as f64;
        }
        if 2 * cum == total {
            let upper = (k + 1..counts.len()).find(|&j| counts[j] > 0).unwrap_or(k);
            return 0.5 * (k + upper) as f64;
        }
    }
    max_discordant(q) as f64
}

// ---------------------------------------------------------------------------
// Truth
// ---------------------------------------------------------------------------

/// `f₀` and `f_λ` for a scenario.
#[derive(Debug, Clone)]
pub struct Truth {
    pub spec: KernelSpec,
    pub lambda: f64,
    reference: Vec<InputPoint>,
    /// `f₀ = K_{·,ref} a`; `None` for the step function.
    f0_coef: Option<DVector<f64>>,
    /// `f_λ = K_{·,ref} b`.
    flam_coef: DVector<f64>,
    /// Eigen-coefficients `c` with `f₀ = Σ c_i e_i`; empty for the step function.
    pub coefficients: Vec<f64>,
    /// RKHS norm of each `e_i` under the scenario's [`Normalization`].
    pub eigen_scale: Vec<f64>,
    /// Nyström eigenvalues `μ_i` used for `f₀`.
    pub eigenvalues: Vec<f64>,
    /// `‖f₀‖²_H`, `None` when `f₀ ∉ H`.
    pub f0_norm_sq: Option<f64>,
    pub flam_norm_sq: f64,
    /// Ranking designs: `(f₀, f_λ)` for every permutation, by lexicographic index.
    table: Option<(Vec<f64>, Vec<f64>)>,
}

fn step(x: f64) -> f64 {
    if x >= 0.5 {
        1.0
    } else {
        0.0
    }
}

fn scalar_of(x: &InputPoint) -> Result<f64> {
    match x.as_vector() {
        Some([v]) => Ok(*v),
        _ => Err(Error::kind("scalar design expects one-dimensional vector inputs")),
    }
}

impl Truth {
    pub fn reference(&self) -> &[InputPoint] {
        &self.reference
    }

    pub fn f0_in_rkhs(&self) -> bool {
        self.f0_coef.is_some()
    }

    pub fn f0(&self, x: &InputPoint) -> Result<f64> {
        Ok(self.f0_many(core::slice::from_ref(x))?[0])
    }

    pub fn f_lambda(&self, x: &InputPoint) -> Result<f64> {
        Ok(self.f_lambda_many(core::slice::from_ref(x))?[0])
    }

    pub fn f0_many(&self, xs: &[InputPoint]) -> Result<Vec<f64>> {
        if let Some((f0, _)) = &self.table {
            return lookup(f0, xs);
        }
        match &self.f0_coef {
            Some(a) => self.expand(a, xs),
            None => xs.iter().map(|x| scalar_of(x).map(step)).collect(),
        }
    }

    pub fn f_lambda_many(&self, xs: &[InputPoint]) -> Result<Vec<f64>> {
        if let Some((_, fl)) = &self.table {
            return lookup(fl, xs);
        }
        self.expand(&self.flam_coef, xs)
    }

    fn expand(&self, coef: &DVector<f64>, xs: &[InputPoint]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let cross = kernels::cross_matrix(&self.spec, &self.reference, xs)?;
        Ok((0..xs.len()).map(|j| cross.column(j).dot(coef)).collect())
    }
}

fn lookup(table: &[f64], xs: &[InputPoint]) -> Result<Vec<f64>> {
    xs.iter()
        .map(|x| {
            let r = x.as_ranking().ok_or_else(|| Error::kind("ranking design expects rankings"))?;
            table
                .get(r.lexicographic_index())
                .copied()
                .ok_or_else(|| Error::Dimension { expected: table.len(), found: r.lexicographic_index() })
        })
        .collect()
}

/// Builds `f₀` and the pseudo-true `f_λ` for `scenario`.
pub fn make_truth(scenario: &Scenario) -> Result<Truth> {
    scenario.validate()?;
    let spec = scenario.kernel()?;
    let lambda = scenario.resolved_lambda()?;
    let reference: Vec<InputPoint> = if scenario.is_ranking() {
        Ranking::all(scenario.ranking_q).into_iter().map(InputPoint::from).collect()
    } else {
        let m = scenario.reference_size;
        (0..m).map(|j| InputPoint::scalar((j as f64 + 0.5) / m as f64)).collect()
    };
    let m = reference.len();
    let k_ref = kernels::gram_matrix(&spec, &reference)?;

    let (f0_coef, coefficients, eigen_scale, eigenvalues, f0_ref) = if scenario.name == ScenarioName::StepMisspec {
        let values: Vec<f64> = reference.iter().map(|x| scalar_of(x).map(step)).collect::<Result<_>>()?;
        (None, Vec::new(), Vec::new(), Vec::new(), DVector::from_vec(values))
    } else {
        let c: Vec<f64> = match scenario.truth_form() {
            TruthForm::Mix5 => {
                let mut rng = rng::substream(scenario.seed, &[rng::tag::TRUTH]);
                (0..5).map(|_| StandardNormal.sample(&mut rng)).map(|g: f64| g / math::sqrt(5.0)).collect()
            }
            TruthForm::ThirdEigen => vec![0.0, 0.0, 1.0],
        };
        let scaled = &k_ref / m as f64;
        let eig_seed = rng::derive_seed(scenario.seed, &[rng::tag::EIGEN]);
        let (mu, u) = linalg::top_eigenpairs(&scaled, c.len(), eig_seed)?;
        if let Some(bad) = mu.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::numeric(format!("eigenvalue {} of the reference operator is not positive", bad + 1)));
        }
        let scale: Vec<f64> = mu
            .iter()
            .map(|&mi| match scenario.normalization {
                Normalization::Rkhs => 1.0,
                Normalization::L2 => 1.0 / math::sqrt(mi),
                Normalization::Eigenvector => 1.0 / math::sqrt(scenario.n as f64 * mi),
                Normalization::Reference => 1.0 / math::sqrt(m as f64 * mi),
            })
            .collect();
        let mut a = DVector::zeros(m);
        for (i, ((&ci, &mi), &si)) in c.iter().zip(&mu).zip(&scale).enumerate() {
            a += u.column(i) * (ci * si / math::sqrt(m as f64 * mi));
        }
        let f0_ref = &k_ref * &a;
        (Some(a), c, scale, mu, f0_ref)
    };

    let mut shifted = k_ref.clone();
    for i in 0..m {
        shifted[(i, i)] += m as f64 * lambda;
    }
    let flam_coef = SpdFactor::new(shifted)?.solve_vec(&f0_ref);
    let flam_ref = &k_ref * &flam_coef;
    let flam_norm_sq = flam_ref.dot(&flam_coef);
    let f0_norm_sq = f0_coef.as_ref().map(|a| f0_ref.dot(a));
    let table = scenario.is_ranking().then(|| (f0_ref.as_slice().to_vec(), flam_ref.as_slice().to_vec()));
    Ok(Truth {
        spec,
        lambda,
        reference,
        f0_coef,
        flam_coef,
        coefficients,
        eigen_scale,
        eigenvalues,
        f0_norm_sq,
        flam_norm_sq,
        table,
    })
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Draws replicate `rep` of the scenario.
pub fn simulate_dataset(scenario: &Scenario, truth: &Truth, rep: usize) -> Result<Dataset> {
    let mut rng = rng::substream(scenario.seed, &[rng::tag::DATA, rep as u64]);
    let n = scenario.n;
    let xs: Vec<InputPoint> = if scenario.is_ranking() {
        let q = scenario.ranking_q;
        (0..n)
            .map(|_| {
                let mut order: Vec<usize> = (0..q).collect();
                order.shuffle(&mut rng);
                Ranking::from_order(&order).map(InputPoint::from)
            })
            .collect::<Result<_>>()?
    } else {
        (0..n).map(|_| InputPoint::scalar(rng.gen::<f64>())).collect()
    };
    let w = scenario.noise;
    let noise: Vec<f64> = (0..n).map(|_| if w > 0.0 { rng.gen_range(-w..=w) } else { 0.0 }).collect();
    let f0 = truth.f0_many(&xs)?;
    let ys = f0.iter().zip(noise).map(|(f, e)| f + e).collect();
    Dataset::new(xs, ys)
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

/// Per-replicate record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub sup_true: bool,
    pub sup_pseudo: bool,
    pub h_true: bool,
    pub h_pseudo: bool,
    pub t_sup: f64,
    pub t_h: f64,
    /// Mean over the grid of the full sup-band width `upper − lower`.
    pub width_sup: f64,
    /// Mean over the grid of the full width of the band implied by the H ball.
    pub width_h: f64,
    /// Mean over the grid of `|f̂ − f₀|` and `|f̂ − f_λ|`.
    pub mae_true: f64,
    pub mae_pseudo: f64,
    /// Mean over the grid of `f̂ − f₀` and `f̂ − f_λ`.
    pub mean_err_true: f64,
    pub mean_err_pseudo: f64,
    /// `max_x √n|f̂ − f₀|` and `max_x √n|f̂ − f_λ|` on the grid.
    pub sup_err_true: f64,
    pub sup_err_pseudo: f64,
    /// `‖f̂ − f_λ‖_H`, and `‖f̂ − f₀‖_H` when `f₀ ∈ H`.
    pub h_err_pseudo: f64,
    pub h_err_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub draws: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub grid_size: usize,
    pub sup_true: f64,
    pub sup_pseudo: f64,
    pub h_true: f64,
    pub h_pseudo: f64,
    /// Grid average of `|E_reps(f̂ − target)|` (fixed grids) or the absolute
    /// pooled mean error (per-replicate grids).
    pub bias_true: f64,
    pub bias_pseudo: f64,
    /// Mean absolute error `E_reps mean_x |f̂ − target|`.
    pub mae_true: f64,
    pub mae_pseudo: f64,
    /// Mean full width `upper − lower` of the variable-width sup band, stored
    /// per target; the band does not depend on the target so the two agree.
    pub width_sup_true: f64,
    pub width_sup_pseudo: f64,
    /// Mean full width of the band implied by the H-norm ball, per target.
    pub width_h_true: f64,
    pub width_h_pseudo: f64,
    pub per_rep: Vec<RepOutcome>,
}

impl CoverageReport {
    /// Number of replicates covering `f₀` / `f_λ` in sup norm.
    pub fn sup_counts(&self) -> (usize, usize) {
        (self.per_rep.iter().filter(|r| r.sup_true).count(), self.per_rep.iter().filter(|r| r.sup_pseudo).count())
    }
}

struct FixedGrid {
    grid: EvalGrid,
    f0: Vec<f64>,
    flam: Vec<f64>,
}

struct RepDetail {
    outcome: RepOutcome,
    err_true: Vec<f64>,
    err_pseudo: Vec<f64>,
}

/// Runs the coverage study.
pub fn run_coverage(scenario: &Scenario) -> Result<CoverageReport> {
    let truth = make_truth(scenario)?;
    run_coverage_with_truth(scenario, &truth)
}

pub fn run_coverage_with_truth(scenario: &Scenario, truth: &Truth) -> Result<CoverageReport> {
    scenario.validate()?;
    let fixed = fixed_grid(scenario, truth)?;
    let details = parallel::try_map_indexed(scenario.reps, |rep| coverage_rep(scenario, truth, fixed.as_ref(), rep))?;
    Ok(aggregate(scenario, truth.lambda, fixed.as_ref().map(|f| f.grid.len()), details))
}

fn fixed_grid(scenario: &Scenario, truth: &Truth) -> Result<Option<FixedGrid>> {
    if scenario.is_ranking() {
        return Ok(None);
    }
    let grid = EvalGrid::unit_interval(scenario.grid_size)?;
    let f0 = truth.f0_many(grid.points())?;
    let flam = truth.f_lambda_many(grid.points())?;
    Ok(Some(FixedGrid { grid, f0, flam }))
}

fn fit_rep(scenario: &Scenario, truth: &Truth, rep: usize) -> Result<FittedKrr> {
    let data = simulate_dataset(scenario, truth, rep)?;
    krr::fit(&truth.spec, &data, truth.lambda)
}

fn coverage_rep(scenario: &Scenario, truth: &Truth, fixed: Option<&FixedGrid>, rep: usize) -> Result<RepDetail> {
    let model = fit_rep(scenario, truth, rep)?;
    let n = model.n();
    let rn = math::sqrt(n as f64);
    let f0_train = truth.f0_many(model.xs())?;
    let flam_train = truth.f_lambda_many(model.xs())?;
    let owned;
    let (grid, f0, flam) = match fixed {
        Some(g) => (&g.grid, &g.f0[..], &g.flam[..]),
        None => {
            owned = EvalGrid::new(model.xs().to_vec())?;
            (&owned, &f0_train[..], &flam_train[..])
        }
    };
    let ctx = BandContext::new(&model, grid, scenario.variance_mode)?;
    let boot_seed = rng::derive_seed(scenario.seed, &[rng::tag::BOOTSTRAP, rep as u64]);
    let mult = bootstrap::multiplier_matrix(n, boot_seed, 0, scenario.draws, scenario.scheme);
    let sup_stats = ctx.sup_statistics(&ctx.draws(&mult), WidthMode::Variable)?;
    let t_sup = bootstrap::critical_value(&sup_stats, scenario.alpha)?;
    let h_stats = ctx.hnorm_statistics(&mult);
    let t_h = bootstrap::critical_value(&h_stats, scenario.alpha)?;
    let radius = t_h / rn;

    let half = ctx.half_widths(t_sup, WidthMode::Variable);
    let half_h = ctx.half_widths(t_h, WidthMode::Hnorm);
    let g = grid.len();
    let err_true: Vec<f64> = (0..g).map(|j| ctx.estimate[j] - f0[j]).collect();
    let err_pseudo: Vec<f64> = (0..g).map(|j| ctx.estimate[j] - flam[j]).collect();
    let inside = |err: &[f64]| err.iter().zip(&half).all(|(e, h)| e.abs() <= *h);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / g as f64;
    let mean_abs = |v: &[f64]| v.iter().map(|e| e.abs()).sum::<f64>() / g as f64;
    let sup_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs())) * rn;

    let h_err_pseudo = model.hnorm_distance(&flam_train, truth.flam_norm_sq)?;
    let h_err_true = match truth.f0_norm_sq {
        Some(norm) => Some(model.hnorm_distance(&f0_train, norm)?),
        None => None,
    };
    let outcome = RepOutcome {
        rep,
        sup_true: inside(&err_true),
        sup_pseudo: inside(&err_pseudo),
        h_true: h_err_true.is_some_and(|d| d <= radius),
        h_pseudo: h_err_pseudo <= radius,
        t_sup,
        t_h,
        width_sup: 2.0 * mean(&half),
        width_h: 2.0 * mean(&half_h),
        mae_true: mean_abs(&err_true),
        mae_pseudo: mean_abs(&err_pseudo),
        mean_err_true: mean(&err_true),
        mean_err_pseudo: mean(&err_pseudo),
        sup_err_true: sup_abs(&err_true),
        sup_err_pseudo: sup_abs(&err_pseudo),
        h_err_pseudo,
        h_err_true,
    };
    Ok(RepDetail { outcome, err_true, err_pseudo })
}

fn aggregate(scenario: &Scenario, lambda: f64, fixed_len: Option<usize>, details: Vec<RepDetail>) -> CoverageReport {
    let reps = details.len() as f64;
    let rate = |f: fn(&RepOutcome) -> bool| details.iter().filter(|d| f(&d.outcome)).count() as f64 / reps;
    let avg = |f: fn(&RepOutcome) -> f64| details.iter().map(|d| f(&d.outcome)).sum::<f64>() / reps;
    let (bias_true, bias_pseudo) = match fixed_len {
        Some(g) => {
            let mut st = vec![0.0; g];
            let mut sp = vec![0.0; g];
            for d in &details {
                for j in 0..g {
                    st[j] += d.err_true[j];
                    sp[j] += d.err_pseudo[j];
                }
            }
            let b = |s: &[f64]| s.iter().map(|v| (v / reps).abs()).sum::<f64>() / g as f64;
            (b(&st), b(&sp))
        }
        None => (avg(|o| o.mean_err_true).abs(), avg(|o| o.mean_err_pseudo).abs()),
    };
    CoverageReport {
        scenario: scenario.name.to_string(),
        n: scenario.n,
        reps: details.len(),
        draws: scenario.draws,
        alpha: scenario.alpha,
        lambda,
        seed: scenario.seed,
        grid_size: fixed_len.unwrap_or(scenario.n),
        sup_true: rate(|o| o.sup_true),
        sup_pseudo: rate(|o| o.sup_pseudo),
        h_true: rate(|o| o.h_true),
        h_pseudo: rate(|o| o.h_pseudo),
        bias_true,
        bias_pseudo,
        mae_true: avg(|o| o.mae_true),
        mae_pseudo: avg(|o| o.mae_pseudo),
        width_sup_true: avg(|o| o.width_sup),
        width_sup_pseudo: avg(|o| o.width_sup),
        width_h_true: avg(|o| o.width_h),
        width_h_pseudo: avg(|o| o.width_h),
        per_rep: details.into_iter().map(|d| d.outcome).collect(),
    }
}

// ---------------------------------------------------------------------------
// Distribution comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdfTarget {
    #[default]
    True,
    Pseudo,
}

/// Two empirical distributions and their Kolmogorov–Smirnov distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfComparison {
    /// `‖√n(f̂ − target)‖∞` over replicates, sorted.
    pub estimator: Vec<f64>,
    /// `‖√n 𝔅‖∞` over bootstrap draws on the first replicate, sorted.
    pub bootstrap: Vec<f64>,
    pub ks: f64,
    pub target: CdfTarget,
}

/// Compares the sampling law of the sup error with the bootstrap law.
pub fn cdf_compare(scenario: &Scenario, target: CdfTarget) -> Result<CdfComparison> {
    let truth = make_truth(scenario)?;
    cdf_compare_with_truth(scenario, &truth, target)
}

pub fn cdf_compare_with_truth(scenario: &Scenario, truth: &Truth, target: CdfTarget) -> Result<CdfComparison> {
    scenario.validate()?;
    let fixed = fixed_grid(scenario, truth)?;
    let mut estimator = parallel::try_map_indexed(scenario.reps, |rep| {
        let model = fit_rep(scenario, truth, rep)?;
        let (points, values) = match &fixed {
            Some(g) => {
                (g.grid.points().to_vec(), if target == CdfTarget::True { g.f0.clone() } else { g.flam.clone() })
            }
            None => {
                let pts = model.xs().to_vec();
                let v = if target == CdfTarget::True { truth.f0_many(&pts)? } else { truth.f_lambda_many(&pts)? };
                (pts, v)
            }
        };
        let est = model.predict_many(&points)?;
        let rn = math::sqrt(model.n() as f64);
        Ok(est.iter().zip(&values).fold(0.0f64, |m, (e, v)| m.max((e - v).abs())) * rn)
    })?;

    let model = fit_rep(scenario, truth, 0)?;
    let grid = match &fixed {
        Some(g) => g.grid.clone(),
        None => EvalGrid::new(model.xs().to_vec())?,
    };
    let ctx = BandContext::new(&model, &grid, scenario.variance_mode)?;
    let boot_seed = rng::derive_seed(scenario.seed, &[rng::tag::BOOTSTRAP, 0]);
    let mult = bootstrap::multiplier_matrix(model.n(), boot_seed, 0, scenario.draws, scenario.scheme);
    let rn = math::sqrt(model.n() as f64);
    let draws = ctx.draws(&mult);
    let mut boot: Vec<f64> =
        (0..draws.ncols()).map(|b| draws.column(b).iter().fold(0.0f64, |m, v| m.max(v.abs())) * rn).collect();
    estimator.sort_by(f64::total_cmp);
    boot.sort_by(f64::total_cmp);
    let ks = ks_distance(&estimator, &boot);
    Ok(CdfComparison { estimator, bootstrap: boot, ks, target })
}

/// Two-sample Kolmogorov–Smirnov distance `sup_t |F_a(t) − F_b(t)|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let t = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: ScenarioName) -> Scenario {
        Scenario { name, n: 60, reps: 4, draws: 50, grid_size: 33, reference_size: 300, ..Default::default() }
    }

    #[test]
    fn scenario_names_parse() {
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
        }
        let err = "nope".parse::<ScenarioName>().unwrap_err();
        assert!(matches!(&err, Error::Config(msg) if msg.contains("gaussian_eigen") && msg.contains("ranking")));
    }

    #[test]
    fn mahonian_median() {
        // q = 3: inversion counts {0:1, 1:2, 2:2, 3:1}; cumulative hits 1/2 at 1, so (1+2)/2.
        assert_eq!(uniform_discordance_median(3), 1.5);
        assert_eq!(uniform_discordance_median(7), 10.5);
        let all = Ranking::all(4);
        let mut n = Vec::new();
        for a in &all {
            for b in &all {
                n.push(kernels::discordant_pairs(a, b).unwrap() as f64);
            }
        }
        n.sort_by(f64::total_cmp);
        let brute = 0.5 * (n[n.len() / 2 - 1] + n[n.len() / 2]);
        assert_eq!(uniform_discordance_median(4), brute);
    }

    #[test]
    fn step_truth() {
        let t = make_truth(&small(ScenarioName::StepMisspec)).unwrap();
        assert_eq!(t.f0(&InputPoint::scalar(0.25)).unwrap(), 0.0);
        assert_eq!(t.f0(&InputPoint::scalar(0.75)).unwrap(), 1.0);
        assert!(!t.f0_in_rkhs());
        let a = t.f_lambda(&InputPoint::scalar(0.1)).unwrap();
        let b = t.f_lambda(&InputPoint::scalar(0.9)).unwrap();
        assert!(a < b);
    }

    #[test]
    fn eigen_truth_is_reproducible_and_normalized() {
        let sc = Scenario { normalization: Normalization::Rkhs, ..small(ScenarioName::GaussianEigen) };
        let t1 = make_truth(&sc).unwrap();
        let t2 = make_truth(&sc).unwrap();
        let pts: Vec<InputPoint> = (0..7).map(|j| InputPoint::scalar(j as f64 / 6.0)).collect();
        assert_eq!(t1.f0_many(&pts).unwrap(), t2.f0_many(&pts).unwrap());
        let mut rng = rng::substream(sc.seed, &[rng::tag::TRUTH]);
        let g: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (c, g) in t1.coefficients.iter().zip(&g) {
            assert!((c - g / 5f64.sqrt()).abs() < 1e-15);
        }
        let c_sq: f64 = t1.coefficients.iter().map(|c| c * c).sum();
        assert!((t1.f0_norm_sq.unwrap() - c_sq).abs() < 1e-8 * c_sq.max(1.0));
        // f_λ = Σ c_i μ_i/(μ_i+λ) e_i, so its norm is explicit too.
        let want: f64 =
            t1.coefficients.iter().zip(&t1.eigenvalues).map(|(c, m)| (c * m / (m + t1.lambda)).powi(2)).sum();
        assert!((t1.flam_norm_sq - want).abs() < 1e-8 * want.max(1.0));
    }

    #[test]
    fn normalizations_rescale_components() {
        let base = small(ScenarioName::Sobolev1);
        let x = InputPoint::scalar(0.3);
        let rkhs = make_truth(&Scenario { normalization: Normalization::Rkhs, ..base.clone() }).unwrap();
        let l2 = make_truth(&Scenario { normalization: Normalization::L2, ..base.clone() }).unwrap();
        let ev = make_truth(&Scenario { normalization: Normalization::Eigenvector, ..base.clone() }).unwrap();
        let refn = make_truth(&base).unwrap();
        let m = refn.reference().len() as f64;
        let mu3 = rkhs.eigenvalues[2];
        let v = rkhs.f0(&x).unwrap();
        assert!((l2.f0(&x).unwrap() - v / mu3.sqrt()).abs() < 1e-10);
        assert!((ev.f0(&x).unwrap() - v / (60.0 * mu3).sqrt()).abs() < 1e-10);
        assert!((refn.f0(&x).unwrap() - v / (m * mu3).sqrt()).abs() < 1e-10);
        // unit L²(P) norm: the Riemann sum over the midpoint reference sample is exact for T_m
        let vals = l2.f0_many(l2.reference()).unwrap();
        let ms = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!((ms - 1.0).abs() < 1e-8, "{ms}");
    }

    #[test]
    fn ranking_truth_uses_full_group() {
        let sc = Scenario { ranking_q: 4, ..small(ScenarioName::Ranking) };
        let t = make_truth(&sc).unwrap();
        assert_eq!(t.reference().len(), 24);
        let d = simulate_dataset(&sc, &t, 0).unwrap();
        assert!(d.xs().iter().all(|x| x.as_ranking().is_some_and(|r| r.q() == 4)));
        let direct = t.expand(t.f0_coef.as_ref().unwrap(), d.xs()).unwrap();
        let table = t.f0_many(d.xs()).unwrap();
        for (a, b) in direct.iter().zip(&table) {
            assert!((a - b).abs() < 1e-12);
        }
        let sc7 = Scenario { ranking_q: 7, ..sc };
        assert!(
            matches!(sc7.kernel().unwrap().family, kernels::KernelFamily::Mallows { lengthscale } if (lengthscale - 1.0 / 10.5).abs() < 1e-15)
        );
    }

    #[test]
    fn outcomes_are_bounded_by_noise() {
        let sc = small(ScenarioName::GaussianEigen);
        let t = make_truth(&sc).unwrap();
        let d = simulate_dataset(&sc, &t, 3).unwrap();
        let f0 = t.f0_many(d.xs()).unwrap();
        for (y, f) in d.ys().iter().zip(&f0) {
            assert!((y - f).abs() <= 2.0);
        }
        assert_eq!(simulate_dataset(&sc, &t, 3).unwrap(), d);
        assert_ne!(simulate_dataset(&sc, &t, 4).unwrap(), d);
    }

    #[test]
    fn noise_has_mean_zero() {
        let sc = Scenario { n: 100_000, ..small(ScenarioName::StepMisspec) };
        let t = make_truth(&sc).unwrap();
        let d = simulate_dataset(&sc, &t, 0).unwrap();
        let f0 = t.f0_many(d.xs()).unwrap();
        let mean = d.ys().iter().zip(&f0).map(|(y, f)| y - f).sum::<f64>() / sc.n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
    }

    #[test]
    fn coverage_smoke() {
        let sc = small(ScenarioName::GaussianEigen);
        let r = run_coverage(&sc).unwrap();
        assert_eq!(r.per_rep.len(), 4);
        for v in [r.sup_true, r.sup_pseudo, r.h_true, r.h_pseudo] {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 4.0).fract(), 0.0);
        }
        assert!(r.width_sup_true > 0.0 && r.width_h_true > 0.0);
        assert_eq!(r.width_sup_true, r.width_sup_pseudo);
        assert_eq!(r.width_h_true, r.width_h_pseudo);
        assert_eq!(run_coverage(&sc).unwrap(), r);
        let step = run_coverage(&small(ScenarioName::StepMisspec)).unwrap();
        assert_eq!(step.h_true, 0.0);
    }

    #[test]
    fn ks_examples() {
        let a = [0.1, 0.4, 0.2];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        assert!((ks_distance(&[1.0, 2.0], &[1.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_bootstrap_concentrates_at_zero() {
        let sc = Scenario { noise: 0.0, lambda: Lambda::Value(1e-6), reps: 2, ..small(ScenarioName::GaussianEigen) };
        let c = cdf_compare(&sc, CdfTarget::True).unwrap();
        assert!(c.bootstrap.iter().all(|&v| v < 1e-3), "{:?}", c.bootstrap.last());
    }
}
