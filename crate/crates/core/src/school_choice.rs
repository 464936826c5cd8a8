//! Semi-synthetic school-choice experiment.
//!
//! Students rank `q` schools by random utility
//! `u_is = α_s + β₁ᵀX₁_is + β₂ᵢᵀX₂_is + χ_i P_s·[match] + ε_is` with Gumbel
//! `ε_is` and student-level random coefficients `β₂ᵢ ~ N(μ₂, Σ₂)`. Seats are
//! allocated by random serial dictatorship (RSD). Treatment is assignment to
//! a pilot school (`P_s = 1`), whose propensity is known only through the
//! lottery and is estimated by re-running it. The conditional effect of
//! treatment given the full rank list is then estimated by KRR on the
//! inverse-propensity-weighted outcome, and group averages over rank strata
//! `S_ρ` (students whose best-ranked pilot school sits at position `ρ`) get
//! simultaneous confidence intervals from the multiplier bootstrap.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{self, MultiplierScheme};
use crate::error::{Error, Result};
use crate::kernels::{self, InputPoint, KernelSpec, MallowsConvention, Ranking};
use crate::krr::{self, Dataset, FittedKrr, Lambda};
use crate::math;
use crate::parallel;
use crate::rng::{self, SubstreamRng};

/// Data-generating scenario for outcomes (and, for `Match`, preferences).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScenario {
    /// Constant pilot effect `γ₁`; preferences carry no information about it.
    #[default]
    Null,
    /// Taste `χ_i` for pilot schools enters utilities and the pilot effect
    /// becomes `γ₁ + γ χ_i`.
    Match,
}

impl core::str::FromStr for MatchScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(MatchScenario::Null),
            "match" => Ok(MatchScenario::Match),
            _ => Err(Error::config(format!("unknown match scenario {s:?}; valid: null, match"))),
        }
    }
}

impl core::fmt::Display for MatchScenario {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            MatchScenario::Null => "null",
            MatchScenario::Match => "match",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub n_students: usize,
    pub n_schools: usize,
    /// Seats per school; empty means `⌈n/q⌉` everywhere.
    pub capacities: Vec<u32>,
    /// Pilot flags; empty means every fifth school (`s % 5 == 0`).
    pub pilots: Vec<bool>,
    /// School fixed effects `α_s`; empty means evenly spaced from 1 down to −1.
    pub school_effects: Vec<f64>,
    /// Fixed coefficients on the student-school covariates `X₁ ~ N(0, I)`.
    pub beta1: Vec<f64>,
    /// Mean of the random coefficients on `X₂ ~ N(0, I)`.
    pub mu2: Vec<f64>,
    /// Covariance of the random coefficients, row-major `d₂ × d₂`.
    pub sigma2: Vec<f64>,
    pub scenario: MatchScenario,
    /// `χ_i ~ N(chi_mean, chi_sd²)`.
    pub chi_mean: f64,
    pub chi_sd: f64,
    /// Outcomes `Y = clip(μ + σδ + effect·P, 0, 100)`.
    pub mu: f64,
    pub sigma: f64,
    pub gamma1: f64,
    pub gamma: f64,
    /// Lottery replicates for the propensity estimate.
    pub propensity_reps: usize,
    /// `ipw_transform` clamps propensities to `[clip, 1 − clip]`.
    pub clip: f64,
    /// Students with propensity outside `[trim, 1 − trim]` are dropped from
    /// the regression sample and from the stratum truths.
    pub trim: f64,
    pub lambda: Lambda,
    pub mallows_convention: MallowsConvention,
    pub draws: usize,
    pub alpha: f64,
    pub scheme: MultiplierScheme,
    /// Population size for the Monte-Carlo stratum truths.
    pub truth_mc: usize,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            n_students: 4000,
            n_schools: 25,
            capacities: Vec::new(),
            pilots: Vec::new(),
            school_effects: Vec::new(),
            beta1: vec![0.5, -0.3],
            mu2: vec![-1.0],
            sigma2: vec![0.25],
            scenario: MatchScenario::Null,
            chi_mean: 0.0,
            chi_sd: 2.0,
            mu: 50.0,
            sigma: 10.0,
            gamma1: 0.0,
            gamma: 10.0,
            propensity_reps: 2000,
            clip: 0.01,
            trim: 0.05,
            lambda: Lambda::Auto,
            mallows_convention: MallowsConvention::Reciprocal,
            draws: 500,
            alpha: 0.05,
            scheme: MultiplierScheme::Centered,
            truth_mc: 100_000,
            seed: 0,
        }
    }
}

impl MarketConfig {
    /// Small market whose lotteries can be enumerated.
    pub fn tiny(n_students: usize, n_schools: usize) -> Self {
        MarketConfig { n_students, n_schools, propensity_reps: 10_000, truth_mc: 10_000, ..Default::default() }
    }

    pub fn capacities(&self) -> Vec<u32> {
        if self.capacities.is_empty() {
            let per = self.n_students.div_ceil(self.n_schools.max(1)) as u32;
            vec![per; self.n_schools]
        } else {
            self.capacities.clone()
        }
    }

    pub fn pilots(&self) -> Vec<bool> {
        if self.pilots.is_empty() {
            (0..self.n_schools).map(|s| s % 5 == 0).collect()
        } else {
            self.pilots.clone()
        }
    }

    pub fn school_effects(&self) -> Vec<f64> {
        if !self.school_effects.is_empty() {
            return self.school_effects.clone();
        }
        let q = self.n_schools;
        if q < 2 {
            return vec![0.0; q];
        }
        (0..q).map(|s| 1.0 - 2.0 * s as f64 / (q - 1) as f64).collect()
    }

    /// Whether a propensity lies in `[trim, 1 − trim]`.
    pub fn in_overlap(&self, p: f64) -> bool {
        self.trim <= p && p <= 1.0 - self.trim
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.n_schools;
        if q < 2 {
            return Err(Error::config("a market needs at least two schools"));
        }
        if q > u8::MAX as usize {
            return Err(Error::config(format!("at most {} schools are supported", u8::MAX)));
        }
        if self.n_students == 0 {
            return Err(Error::config("a market needs at least one student"));
        }
        let caps = self.capacities();
        if caps.len() != q {
            return Err(Error::config(format!("{} capacities for {q} schools", caps.len())));
        }
        check_feasible(&caps, self.n_students)?;
        let pilots = self.pilots();
        if pilots.len() != q {
            return Err(Error::config(format!("{} pilot flags for {q} schools", pilots.len())));
        }
        if !pilots.iter().any(|&p| p) || pilots.iter().all(|&p| p) {
            return Err(Error::config("need at least one pilot and one non-pilot school"));
        }
        if self.school_effects().len() != q {
            return Err(Error::config(format!("{} school effects for {q} schools", self.school_effects().len())));
        }
        let d2 = self.mu2.len();
        if self.sigma2.len() != d2 * d2 {
            return Err(Error::config(format!("sigma2 must hold {d2}×{d2} entries")));
        }
        random_coefficient_root(&self.sigma2, d2)?;
        let finite = [self.chi_mean, self.chi_sd, self.mu, self.sigma, self.gamma1, self.gamma];
        if finite.iter().any(|v| !v.is_finite()) || self.chi_sd < 0.0 || self.sigma < 0.0 {
            return Err(Error::config("outcome and taste parameters must be finite with non-negative scales"));
        }
        if self.beta1.iter().chain(&self.mu2).chain(&self.school_effects()).any(|v| !v.is_finite()) {
            return Err(Error::config("utility coefficients must be finite"));
        }
        if self.propensity_reps == 0 || self.draws == 0 {
            return Err(Error::config("propensity_reps and draws must be ≥ 1"));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::config(format!("clip = {} must lie in (0, 0.5)", self.clip)));
        }
        if !(self.trim >= 0.0 && self.trim < 0.5) {
            return Err(Error::config(format!("trim = {} must lie in [0, 0.5)", self.trim)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("α = {} must lie in (0, 1)", self.alpha)));
        }
        self.lambda.resolve(self.n_students)?;
        Ok(())
    }
}

fn check_feasible(capacities: &[u32], n: usize) -> Result<()> {
    let total: u64 = capacities.iter().map(|&c| c as u64).sum();
    if total < n as u64 {
        return Err(Error::config(format!("{total} seats cannot place {n} students")));
    }
    Ok(())
}

// Lower-triangular-like root `L` with `L Lᵀ = Σ`, tolerant of singular Σ.
fn random_coefficient_root(sigma: &[f64], d: usize) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let m = DMatrix::from_row_slice(d, d, sigma);
    if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::config("sigma2 must be symmetric"));
    }
    let eig = m.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * scale) {
        return Err(Error::config("sigma2 must be positive semi-definite"));
    }
    let roots = eig.eigenvalues.map(|v| math::sqrt(v.max(0.0)));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

// ---------------------------------------------------------------------------
// Preferences
// ---------------------------------------------------------------------------

/// One student's preferences plus the latent pilot taste.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Student {
    pub ranking: Ranking,
    pub chi: f64,
}

struct UtilityModel {
    alpha: Vec<f64>,
    pilots: Vec<bool>,
    beta1: Vec<f64>,
    mu2: Vec<f64>,
    root2: DMatrix<f64>,
    chi_mean: f64,
    chi_sd: f64,
    with_chi: bool,
}

impl UtilityModel {
    fn new(cfg: &MarketConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(UtilityModel {
            alpha: cfg.school_effects(),
            pilots: cfg.pilots(),
            beta1: cfg.beta1.clone(),
            mu2: cfg.mu2.clone(),
            root2: random_coefficient_root(&cfg.sigma2, cfg.mu2.len())?,
            chi_mean: cfg.chi_mean,
            chi_sd: cfg.chi_sd,
            with_chi: cfg.scenario == MatchScenario::Match,
        })
    }

    // Draw order per student: χ, β₂ noise, then per school X₁, X₂, ε.
    // χ is drawn in both scenarios so the two share every other variate.
    fn draw(&self, rng: &mut SubstreamRng, utilities: &mut Vec<f64>) -> Result<Student> {
        let gumbel = Gumbel::new(0.0, 1.0).map_err(|_| Error::numeric("Gumbel law"))?;
        let z: f64 = StandardNormal.sample(rng);
        let chi = self.chi_mean + self.chi_sd * z;
        let d2 = self.mu2.len();
        let noise: Vec<f64> = (0..d2).map(|_| StandardNormal.sample(rng)).collect();
        let beta2: Vec<f64> =
            (0..d2).map(|r| self.mu2[r] + (0..d2).map(|c| self.root2[(r, c)] * noise[c]).sum::<f64>()).collect();
        utilities.clear();
        for s in 0..self.alpha.len() {
            let mut u = self.alpha[s];
            for b in &self.beta1 {
                let x: f64 = StandardNormal.sample(rng);
                u += b * x;
            }
            for b in &beta2 {
                let x: f64 = StandardNormal.sample(rng);
                u += b * x;
            }
            if self.with_chi && self.pilots[s] {
                u += chi;
            }
            u += gumbel.sample(rng);
            utilities.push(u);
        }
        Ok(Student { ranking: ranking_from_utilities(utilities)?, chi })
    }
}

/// Ranks alternatives by descending utility; ties go to the lower index.
pub fn ranking_from_utilities(utilities: &[f64]) -> Result<Ranking> {
    if utilities.iter().any(|u| u.is_nan()) {
        return Err(Error::numeric("NaN utility"));
    }
    let mut order: Vec<usize> = (0..utilities.len()).collect();
    // Stable sort keeps index order among equal utilities.
    order.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]));
    Ranking::from_order(&order)
}

fn sample_population(cfg: &MarketConfig, n: usize, keys: &[u64]) -> Result<Vec<Student>> {
    let model = UtilityModel::new(cfg)?;
    const CHUNK: usize = 256;
    let chunks = n.div_ceil(CHUNK);
    let blocks = parallel::try_map_indexed(chunks, |c| {
        let mut k = keys.to_vec();
        k.push(c as u64);
        let mut rng = rng::substream(cfg.seed, &k);
        let mut buf = Vec::with_capacity(cfg.n_schools);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len).map(|_| model.draw(&mut rng, &mut buf)).collect::<Result<Vec<_>>>()
    })?;
    Ok(blocks.into_iter().flatten().collect())
}

/// Students (rank lists and tastes) for replicate `rep`.
pub fn sample_students(cfg: &MarketConfig, rep: usize) -> Result<Vec<Student>> {
    sample_population(cfg, cfg.n_students, &[rng::tag::PREFERENCES, rep as u64])
}

/// Rank lists for replicate `rep`.
pub fn sample_preferences(cfg: &MarketConfig, rep: usize) -> Result<Vec<Ranking>> {
    Ok(sample_students(cfg, rep)?.into_iter().map(|s| s.ranking).collect())
}

/// 1-based position of the best-ranked pilot school.
pub fn best_pilot_rank(ranking: &Ranking, pilots: &[bool]) -> Result<usize> {
    if pilots.len() != ranking.q() {
        return Err(Error::Dimension { expected: ranking.q(), found: pilots.len() });
    }
    (0..ranking.q())
        .filter(|&s| pilots[s])
        .map(|s| ranking.rank_of(s) as usize)
        .min()
        .ok_or_else(|| Error::config("no pilot school"))
}

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub school_of: Vec<usize>,
    pub treated: Vec<bool>,
    /// Lottery order: `order[k]` is the student choosing `k`-th.
    pub order: Vec<usize>,
}

fn preference_lists(prefs: &[Ranking], q: usize) -> Result<Vec<Vec<u8>>> {
    prefs
        .iter()
        .map(|r| {
            if r.q() != q {
                return Err(Error::Dimension { expected: q, found: r.q() });
            }
            Ok(r.order().into_iter().map(|s| s as u8).collect())
        })
        .collect()
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::Dimension { expected: n, found: order.len() });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n || core::mem::replace(&mut seen[i], true) {
            return Err(Error::domain("lottery order is not a permutation of the students"));
        }
    }
    Ok(())
}

// Serial dictatorship over preference lists; `remaining` is scratch space.
fn serial_dictatorship(
    lists: &[Vec<u8>],
    capacities: &[u32],
    order: &[usize],
    remaining: &mut Vec<u32>,
    out: &mut [usize],
) {
    remaining.clear();
    remaining.extend_from_slice(capacities);
    for &i in order {
        // Feasibility was checked, so some school on the full list has room.
        let s = lists[i].iter().map(|&s| s as usize).find(|&s| remaining[s] > 0).expect("feasible capacities");
        remaining[s] -= 1;
        out[i] = s;
    }
}

/// Random serial dictatorship: students in `order` take their favourite
/// school with a free seat.
pub fn rsd_assign(prefs: &[Ranking], capacities: &[u32], pilots: &[bool], order: &[usize]) -> Result<Assignment> {
    let q = capacities.len();
    if pilots.len() != q {
        return Err(Error::Dimension { expected: q, found: pilots.len() });
    }
    check_feasible(capacities, prefs.len())?;
    check_order(order, prefs.len())?;
    let lists = preference_lists(prefs, q)?;
    let mut school_of = vec![0; prefs.len()];
    serial_dictatorship(&lists, capacities, order, &mut Vec::new(), &mut school_of);
    let treated = school_of.iter().map(|&s| pilots[s]).collect();
    Ok(Assignment { school_of, treated, order: order.to_vec() })
}

/// Uniformly random lottery order.
pub fn lottery_order(n: usize, rng: &mut SubstreamRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Lottery cutoffs of an RSD run: `c_s = (k + 1) / n` when the `k`-th student
/// in the order takes the last seat at `s`, and `1` when `s` never fills.
pub fn lottery_cutoffs(assignment: &Assignment, capacities: &[u32]) -> Vec<f64> {
    let n = assignment.order.len() as f64;
    let mut taken = vec![0u32; capacities.len()];
    let mut cutoffs = vec![1.0; capacities.len()];
    for (k, &i) in assignment.order.iter().enumerate() {
        let s = assignment.school_of[i];
        taken[s] += 1;
        if taken[s] == capacities[s] {
            cutoffs[s] = (k + 1) as f64 / n;
        }
    }
    cutoffs
}

/// Large-market propensity given cutoffs: a student at lottery position
/// `u ~ U(0,1)` gets the first listed school with `u < c_s`, so the pilot
/// share is `Σ_{pilot j} (c_{r_j} − max_{k<j} c_{r_k})⁺`.
pub fn cutoff_propensity(ranking: &Ranking, cutoffs: &[f64], pilots: &[bool]) -> Result<f64> {
    let order = ranking.order();
    if order.len() != cutoffs.len() || pilots.len() != cutoffs.len() {
        return Err(Error::Dimension { expected: cutoffs.len(), found: order.len() });
    }
    let mut reached = 0.0f64;
    let mut p = 0.0;
    for &s in &order {
        let c = cutoffs[s];
        if c > reached {
            if pilots[s] {
                p += c - reached;
            }
            reached = c;
        }
    }
    Ok(p)
}

/// Monte-Carlo propensity of landing at a pilot school over `r` independent
/// lottery orders drawn from `substream(seed, [PROPENSITY, j])`.
pub fn propensity(prefs: &[Ranking], capacities: &[u32], pilots: &[bool], r: usize, seed: u64) -> Result<Vec<f64>> {
    let q = capacities.len();
    if pilots.len() != q {
        return Err(Error::Dimension { expected: q, found: pilots.len() });
    }
    if r == 0 {
        return Err(Error::domain("propensity needs at least one lottery replicate"));
    }
    check_feasible(capacities, prefs.len())?;
    let lists = preference_lists(prefs, q)?;
    let n = prefs.len();
    const BLOCK: usize = 32;
    let blocks = r.div_ceil(BLOCK);
    let counts = parallel::map_indexed(blocks, |b| {
        let mut counts = vec![0u32; n];
        let mut remaining = Vec::with_capacity(q);
        let mut school_of = vec![0usize; n];
        for j in b * BLOCK..((b + 1) * BLOCK).min(r) {
            let mut rng = rng::substream(seed, &[rng::tag::PROPENSITY, j as u64]);
            let order = lottery_order(n, &mut rng);
            serial_dictatorship(&lists, capacities, &order, &mut remaining, &mut school_of);
            for (c, &s) in counts.iter_mut().zip(&school_of) {
                *c += pilots[s] as u32;
            }
        }
        counts
    });
    let mut total = vec![0u64; n];
    for block in counts {
        for (t, c) in total.iter_mut().zip(block) {
            *t += c as u64;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / r as f64).collect())
}

/// Largest market [`exact_propensity`] will enumerate.
pub const MAX_ENUMERABLE_STUDENTS: usize = 8;

/// Exact pilot propensities by enumerating every lottery order.
pub fn exact_propensity(prefs: &[Ranking], capacities: &[u32], pilots: &[bool]) -> Result<Vec<f64>> {
    let n = prefs.len();
    if n == 0 || n > MAX_ENUMERABLE_STUDENTS {
        return Err(Error::domain(format!("exact enumeration needs 1..={MAX_ENUMERABLE_STUDENTS} students")));
    }
    let orders: Vec<Vec<usize>> = Ranking::all(n).iter().map(|r| r.order()).collect();
    let mut total = vec![0usize; n];
    for order in &orders {
        let a = rsd_assign(prefs, capacities, pilots, order)?;
        for (t, d) in total.iter_mut().zip(&a.treated) {
            *t += *d as usize;
        }
    }
    Ok(total.into_iter().map(|c| c as f64 / orders.len() as f64).collect())
}

/// Inverse-propensity-weighted outcome with `p` clamped to `[clip, 1 − clip]`.
pub fn ipw_transform(y: f64, d: bool, p: f64, clip: f64) -> f64 {
    let p = p.clamp(clip, 1.0 - clip);
    if d {
        y / p
    } else {
        -y / (1.0 - p)
    }
}

// ---------------------------------------------------------------------------
// Outcomes and truths
// ---------------------------------------------------------------------------

/// Outcomes are truncated to this interval.
pub const OUTCOME_RANGE: (f64, f64) = (0.0, 100.0);

/// `E clip(m + sZ, lo, hi)` for `Z ~ N(0, 1)`.
pub fn clipped_normal_mean(m: f64, s: f64, lo: f64, hi: f64) -> f64 {
    if s <= 0.0 {
        return m.clamp(lo, hi);
    }
    let a = (lo - m) / s;
    let b = (hi - m) / s;
    let (pa, pb) = (math::norm_cdf(a), math::norm_cdf(b));
    lo * pa + hi * (1.0 - pb) + m * (pb - pa) + s * (math::norm_pdf(a) - math::norm_pdf(b))
}

/// Conditional effect `E[Y(1) − Y(0)]` of a pilot shift `shift` averaged over `δ`.
pub fn expected_effect(mu: f64, sigma: f64, shift: f64) -> f64 {
    let (lo, hi) = OUTCOME_RANGE;
    clipped_normal_mean(mu + shift, sigma, lo, hi) - clipped_normal_mean(mu, sigma, lo, hi)
}

impl MarketConfig {
    fn pilot_shift(&self, chi: f64) -> f64 {
        match self.scenario {
            MatchScenario::Null => self.gamma1,
            MatchScenario::Match => self.gamma1 + self.gamma * chi,
        }
    }
}

/// Per-stratum truth `E[effect | S_ρ]`, indexed by `ρ − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketTruth {
    pub scenario: MatchScenario,
    pub strata: Vec<Option<f64>>,
    /// Population shares of the trimmed strata (Monte Carlo).
    pub shares: Vec<f64>,
    /// Constant effect under the null.
    pub constant: Option<f64>,
}

/// Stratum truths. Under the null every stratum equals the closed-form
/// truncated effect of `γ₁`. Under the match scenario the stratum averages of
/// `E_δ[Y(1) − Y(0) | χ]` are estimated on `truth_mc` fresh students, keeping
/// only those whose large-market propensity lies in `[trim, 1 − trim]` (the
/// same trimming the experiment applies). Cutoffs come from one RSD lottery on
/// the Monte-Carlo population with capacities scaled to its size.
pub fn market_truth(cfg: &MarketConfig) -> Result<MarketTruth> {
    cfg.validate()?;
    let q = cfg.n_schools;
    let pilots = cfg.pilots();
    let pop = sample_population(cfg, cfg.truth_mc.max(1), &[rng::tag::TRUTH_MC])?;
    let scale = pop.len() as f64 / cfg.n_students as f64;
    let caps: Vec<u32> = cfg.capacities().iter().map(|&c| libm::ceil(c as f64 * scale) as u32).collect();
    let prefs: Vec<Ranking> = pop.iter().map(|s| s.ranking.clone()).collect();
    let mut lottery = rng::substream(cfg.seed, &[rng::tag::TRUTH_MC, 1]);
    let order = lottery_order(pop.len(), &mut lottery);
    let cutoffs = lottery_cutoffs(&rsd_assign(&prefs, &caps, &pilots, &order)?, &caps);

    let mut sums = vec![0.0; q];
    let mut counts = vec![0usize; q];
    for s in &pop {
        let p = cutoff_propensity(&s.ranking, &cutoffs, &pilots)?;
        if !cfg.in_overlap(p) {
            continue;
        }
        let rho = best_pilot_rank(&s.ranking, &pilots)?;
        sums[rho - 1] += expected_effect(cfg.mu, cfg.sigma, cfg.pilot_shift(s.chi));
        counts[rho - 1] += 1;
    }
    let shares = counts.iter().map(|&c| c as f64 / pop.len() as f64).collect();
    let (strata, constant) = match cfg.scenario {
        MatchScenario::Null => {
            let c = expected_effect(cfg.mu, cfg.sigma, cfg.gamma1);
            // Any stratum reachable in the population gets the constant.
            let max_rho = q - pilots.iter().filter(|&&p| p).count() + 1;
            ((1..=q).map(|rho| (rho <= max_rho).then_some(c)).collect(), Some(c))
        }
        MatchScenario::Match => (sums.iter().zip(&counts).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect(), None),
    };
    Ok(MarketTruth { scenario: cfg.scenario, strata, shares, constant })
}

// ---------------------------------------------------------------------------
// Strata inference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub rho: usize,
    pub count: usize,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub truth: Option<f64>,
    /// Empty strata are kept as flagged rows with zero estimates.
    pub omitted: bool,
}

impl StratumRow {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataResult {
    pub rows: Vec<StratumRow>,
    pub critical_value: f64,
    pub alpha: f64,
    pub draws: usize,
}

impl StrataResult {
    pub fn row(&self, rho: usize) -> Option<&StratumRow> {
        self.rows.iter().find(|r| r.rho == rho && !r.omitted)
    }

    /// Whether every non-empty stratum with a known truth covers it.
    pub fn covers_truth(&self) -> bool {
        self.rows.iter().filter(|r| !r.omitted).all(|r| r.truth.map_or(true, |t| r.covers(t)))
    }
}

/// Bootstrap settings for [`strata_inference`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrataBootstrap {
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
    pub scheme: MultiplierScheme,
}

/// Simultaneous intervals for stratum averages of the fitted function.
///
/// The group estimate is `θ̂_ρ = mean_{i∈S_ρ} f̂(X_i)`; its bootstrap draw is
/// the same average of `𝔅(X_i)`, i.e. `w_ρᵀ diag(ε̂) m/√n` with
/// `w_ρ = (K + nλ)⁻¹ K 1_ρ / n_ρ`. The critical value is the `1 − α` quantile
/// of `max_ρ |draw_ρ|`, so intervals `θ̂_ρ ± t` hold jointly.
pub fn strata_inference(
    model: &FittedKrr,
    pilots: &[bool],
    boot: &StrataBootstrap,
    truth: Option<&[Option<f64>]>,
) -> Result<StrataResult> {
    let n = model.n();
    let q = pilots.len();
    let rho: Vec<usize> = model
        .xs()
        .iter()
        .map(|x| {
            let r = x.as_ranking().ok_or_else(|| Error::kind("strata need ranking inputs"))?;
            best_pilot_rank(r, pilots)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; q];
    for &r in &rho {
        counts[r - 1] += 1;
    }
    let present: Vec<usize> = (0..q).filter(|&s| counts[s] > 0).collect();
    let mut indicator = DMatrix::zeros(n, present.len());
    for (i, &r) in rho.iter().enumerate() {
        let col = present.iter().position(|&s| s == r - 1).expect("stratum present");
        indicator[(i, col)] = 1.0 / counts[r - 1] as f64;
    }
    let fitted: DVector<f64> =
        DVector::from_iterator(n, model.ys().iter().zip(model.residuals().iter()).map(|(y, e)| y - e));
    let estimates = indicator.tr_mul(&fitted);
    let weights = model.solve_many(&(model.gram() * &indicator));
    let rn = math::sqrt(n as f64);
    let mut loadings = weights;
    for (i, mut row) in loadings.row_iter_mut().enumerate() {
        row *= model.residuals()[i] / rn;
    }
    let mult = bootstrap::multiplier_matrix(n, boot.seed, 0, boot.draws, boot.scheme);
    let draws = loadings.tr_mul(&mult);
    let stats: Vec<f64> = (0..draws.ncols()).map(|b| draws.column(b).amax()).collect();
    let t = bootstrap::critical_value(&stats, boot.alpha)?;
    let rows = (0..q)
        .map(|s| {
            let truth = truth.and_then(|v| v.get(s).copied().flatten());
            match present.iter().position(|&p| p == s) {
                Some(col) => {
                    let est = estimates[col];
                    StratumRow {
                        rho: s + 1,
                        count: counts[s],
                        estimate: est,
                        lower: est - t,
                        upper: est + t,
                        truth,
                        omitted: false,
                    }
                }
                None => {
                    StratumRow { rho: s + 1, count: 0, estimate: 0.0, lower: 0.0, upper: 0.0, truth, omitted: true }
                }
            }
        })
        .collect();
    Ok(StrataResult { rows, critical_value: t, alpha: boot.alpha, draws: boot.draws })
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Per-student record of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub ranking: Ranking,
    pub rho: usize,
    pub school: usize,
    pub treated: bool,
    pub propensity: f64,
    pub outcome: f64,
    pub ipw_outcome: f64,
    /// Propensity inside `[trim, 1 − trim]`; only these enter the fit.
    pub in_sample: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRun {
    pub rep: usize,
    pub scenario: MatchScenario,
    pub lambda: f64,
    pub lengthscale: f64,
    pub strata: StrataResult,
    pub students: Vec<StudentRecord>,
}

impl MatchRun {
    /// Whether the interval for stratum `rho` excludes zero.
    pub fn rejects_zero(&self, rho: usize) -> bool {
        self.strata.row(rho).is_some_and(|r| !r.covers(0.0))
    }
}

/// One full experiment: preferences, lottery, propensities, IPW outcomes,
/// KRR fit and strata inference.
pub fn run_match_experiment(cfg: &MarketConfig, rep: usize) -> Result<MatchRun> {
    let truth = market_truth(cfg)?;
    run_match_experiment_with_truth(cfg, rep, &truth)
}

pub fn run_match_experiment_with_truth(cfg: &MarketConfig, rep: usize, truth: &MarketTruth) -> Result<MatchRun> {
    cfg.validate()?;
    let n = cfg.n_students;
    let pilots = cfg.pilots();
    let caps = cfg.capacities();
    let students = sample_students(cfg, rep)?;
    let prefs: Vec<Ranking> = students.iter().map(|s| s.ranking.clone()).collect();
    let mut lottery = rng::substream(cfg.seed, &[rng::tag::LOTTERY, rep as u64]);
    let order = lottery_order(n, &mut lottery);
    let assignment = rsd_assign(&prefs, &caps, &pilots, &order)?;
    let prop_seed = rng::derive_seed(cfg.seed, &[rng::tag::PROPENSITY, rep as u64]);
    let p = propensity(&prefs, &caps, &pilots, cfg.propensity_reps, prop_seed)?;

    let mut out_rng = rng::substream(cfg.seed, &[rng::tag::OUTCOMES, rep as u64]);
    let (lo, hi) = OUTCOME_RANGE;
    let mut records = Vec::with_capacity(n);
    for (i, s) in students.iter().enumerate() {
        let delta: f64 = StandardNormal.sample(&mut out_rng);
        let d = assignment.treated[i];
        let shift = if d { cfg.pilot_shift(s.chi) } else { 0.0 };
        let y = (cfg.mu + cfg.sigma * delta + shift).clamp(lo, hi);
        records.push(StudentRecord {
            ranking: s.ranking.clone(),
            rho: best_pilot_rank(&s.ranking, &pilots)?,
            school: assignment.school_of[i],
            treated: d,
            propensity: p[i],
            outcome: y,
            ipw_outcome: ipw_transform(y, d, p[i], cfg.clip),
            in_sample: cfg.in_overlap(p[i]),
        });
    }

    let (xs, ys): (Vec<InputPoint>, Vec<f64>) =
        records.iter().filter(|r| r.in_sample).map(|r| (InputPoint::from(r.ranking.clone()), r.ipw_outcome)).unzip();
    if xs.len() < 2 {
        return Err(Error::DegenerateData(format!("only {} students have propensity in [trim, 1 − trim]", xs.len())));
    }
    let lengthscale = kernels::median_heuristic(&xs)?.mallows_lengthscale(cfg.mallows_convention);
    let spec = KernelSpec::mallows(lengthscale)?;
    let lambda = cfg.lambda.resolve(xs.len())?;
    let data = Dataset::new(xs, ys)?;
    let model = krr::fit(&spec, &data, lambda)?;
    let boot = StrataBootstrap {
        draws: cfg.draws,
        alpha: cfg.alpha,
        seed: rng::derive_seed(cfg.seed, &[rng::tag::BOOTSTRAP, rep as u64]),
        scheme: cfg.scheme,
    };
    let strata = strata_inference(&model, &pilots, &boot, Some(&truth.strata))?;
    Ok(MatchRun { rep, scenario: cfg.scenario, lambda, lengthscale, strata, students: records })
}

/// Replicated experiment summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub scenario: MatchScenario,
    pub reps: usize,
    /// Fraction of replicates whose intervals cover every stratum truth.
    pub coverage: f64,
    /// Fraction of replicates whose `ρ = 1` interval excludes zero.
    pub reject_rho1: f64,
    pub truth: MarketTruth,
    pub per_rep: Vec<RepSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub rep: usize,
    pub covered: bool,
    pub rejects_rho1: bool,
    pub critical_value: f64,
    pub rho1_estimate: Option<f64>,
}

/// Runs replicates `0..reps` sequentially (each fit is already parallel inside).
pub fn run_match_reps(cfg: &MarketConfig, reps: usize) -> Result<MatchSummary> {
    let truth = market_truth(cfg)?;
    let mut per_rep = Vec::with_capacity(reps);
    for rep in 0..reps {
        let run = run_match_experiment_with_truth(cfg, rep, &truth)
            .map_err(|e| Error::Replicate { index: rep, source: alloc::boxed::Box::new(e) })?;
        per_rep.push(RepSummary {
            rep,
            covered: run.strata.covers_truth(),
            rejects_rho1: run.rejects_zero(1),
            critical_value: run.strata.critical_value,
            rho1_estimate: run.strata.row(1).map(|r| r.estimate),
        });
    }
    let frac = |f: fn(&RepSummary) -> bool| per_rep.iter().filter(|r| f(r)).count() as f64 / reps.max(1) as f64;
    Ok(MatchSummary {
        scenario: cfg.scenario,
        reps,
        coverage: frac(|r| r.covered),
        reject_rho1: frac(|r| r.rejects_rho1),
        truth,
        per_rep,
    })
}
