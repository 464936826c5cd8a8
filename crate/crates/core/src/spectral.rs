//! Spectral diagnostics of the empirical kernel operator `K/n`.
//!
//! The population operator is not observable, so everything here uses the
//! eigenvalues `ν_1 ≥ ν_2 ≥ …` of `K/n`. Small negative eigenvalues from
//! rounding are kept in the raw report but clipped to zero in every sum.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::math;

/// Eigenvalues below `-NEGATIVE_TOLERANCE · trace` are counted as suspicious.
pub const NEGATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues of `K/n`, descending, unclipped.
    pub eigenvalues: Vec<f64>,
    /// `tail_sums[m] = Σ_{s>m} max(ν_s, 0)` for `m = 0..=len`.
    pub tail_sums: Vec<f64>,
    /// `σ(m) = √tail_sums[m]`.
    pub local_width: Vec<f64>,
    /// `Σ_s max(ν_s, 0)`.
    pub trace: f64,
    /// Number of eigenvalues below `-1e-8 · trace`.
    pub negative_count: usize,
    /// `(λ, 𝒩̂(λ))` pairs.
    pub eff_dim: Vec<(f64, f64)>,
}

/// Default λ grid for the effective-dimension map: `10^{-4}, 10^{-3.5}, …, 1`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=8).map(|k| math::pow(10.0, -4.0 + 0.5 * k as f64)).collect()
}

/// Full eigendecomposition of `gram / n`.
pub fn spectrum(gram: &DMatrix<f64>, n: usize) -> Result<SpectrumReport> {
    spectrum_with_lambdas(gram, n, &default_lambda_grid())
}

pub fn spectrum_with_lambdas(gram: &DMatrix<f64>, n: usize, lambdas: &[f64]) -> Result<SpectrumReport> {
    if gram.nrows() != gram.ncols() {
        return Err(Error::Dimension { expected: gram.nrows(), found: gram.ncols() });
    }
    if n == 0 {
        return Err(Error::domain("n must be ≥ 1"));
    }
    let scaled = gram / n as f64;
    let eigenvalues = linalg::symmetric_eigenvalues_desc(&scaled)?;
    report_from_eigenvalues(eigenvalues, lambdas)
}

/// Builds a report from an already computed descending spectrum.
pub fn report_from_eigenvalues(mut eigenvalues: Vec<f64>, lambdas: &[f64]) -> Result<SpectrumReport> {
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite eigenvalue"));
    }
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let tail_sums = tail_sums(&eigenvalues);
    let trace = tail_sums[0];
    let negative_count = eigenvalues.iter().filter(|&&v| v < -NEGATIVE_TOLERANCE * trace).count();
    let local_width = tail_sums.iter().map(|&t| math::sqrt(t)).collect();
    let eff_dim =
        lambdas.iter().map(|&l| effective_dimension(&eigenvalues, l).map(|d| (l, d))).collect::<Result<Vec<_>>>()?;
    Ok(SpectrumReport { eigenvalues, tail_sums, local_width, trace, negative_count, eff_dim })
}

/// Suffix sums of the clipped spectrum; entry `m` is `Σ_{s>m} max(ν_s, 0)`.
pub fn tail_sums(eigenvalues: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; eigenvalues.len() + 1];
    for s in (0..eigenvalues.len()).rev() {
        out[s] = out[s + 1] + eigenvalues[s].max(0.0);
    }
    out
}

/// `σ²(m) = Σ_{s>m} max(ν_s, 0)` for a descending spectrum.
pub fn local_width_sq(eigenvalues: &[f64], m: usize) -> f64 {
    eigenvalues.iter().skip(m).rev().map(|v| v.max(0.0)).sum()
}

/// `𝒩̂(λ) = Σ_s ν_s / (ν_s + λ)²`.
pub fn effective_dimension(eigenvalues: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("λ = {lambda} must be positive")));
    }
    Ok(eigenvalues
        .iter()
        .map(|&v| {
            let v = v.max(0.0);
            v / ((v + lambda) * (v + lambda))
        })
        .sum())
}

/// `σ²(m) / trace`.
pub fn tail_mass(report: &SpectrumReport, m: usize) -> Result<f64> {
    let len = report.tail_sums.len() - 1;
    if m > len {
        return Err(Error::domain(format!("m = {m} exceeds the {len} eigenvalues")));
    }
    if report.trace == 0.0 {
        return Ok(if m == 0 { 1.0 } else { 0.0 });
    }
    Ok(report.tail_sums[m] / report.trace)
}

/// Leading eigenvalues of `K/n` with the exact trace, for Gram matrices too
/// large for a full decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSpectrum {
    /// The `k` largest eigenvalues of `K/n`, descending.
    pub eigenvalues: Vec<f64>,
    /// `tr(K/n)`, from the diagonal.
    pub trace: f64,
}

impl PartialSpectrum {
    /// `σ²(m) / trace` for `m ≤ k`, with `σ²(m) = trace − Σ_{s≤m} max(ν_s, 0)`.
    pub fn tail_mass(&self, m: usize) -> Result<f64> {
        if m > self.eigenvalues.len() {
            return Err(Error::domain(format!("m = {m} exceeds the {} computed eigenvalues", self.eigenvalues.len())));
        }
        if self.trace <= 0.0 {
            return Ok(if m == 0 { 1.0 } else { 0.0 });
        }
        let head: f64 = self.eigenvalues[..m].iter().map(|v| v.max(0.0)).sum();
        Ok(((self.trace - head) / self.trace).clamp(0.0, 1.0))
    }
}

/// Top `k` eigenvalues of `gram / n` by subspace iteration.
pub fn top_spectrum(gram: &DMatrix<f64>, n: usize, k: usize, seed: u64) -> Result<PartialSpectrum> {
    if gram.nrows() != gram.ncols() {
        return Err(Error::Dimension { expected: gram.nrows(), found: gram.ncols() });
    }
    if n == 0 {
        return Err(Error::domain("n must be ≥ 1"));
    }
    let scaled = gram / n as f64;
    let (eigenvalues, _) = linalg::top_eigenpairs(&scaled, k, seed)?;
    let trace = scaled.diagonal().sum();
    Ok(PartialSpectrum { eigenvalues, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayFamily {
    Poly,
    Exp,
}

/// `ν_s ≈ ω s^{-β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub omega: f64,
    pub beta: f64,
    pub r_squared: f64,
}

/// `ν_s ≈ c exp(-α s^γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub scale: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub family: DecayFamily,
    pub poly: PolyFit,
    pub exp: ExpFit,
    /// Set when the fitted decay rate is essentially zero (flat spectrum).
    pub degenerate: bool,
    /// Number of eigenvalues used.
    pub used: usize,
}

/// Minimum number of positive eigenvalues for [`decay_fit`].
pub const MIN_DECAY_POINTS: usize = 10;

/// Least-squares decay fits on the log scale.
///
/// Uses the leading eigenvalues above `1e-12 · ν_1`. The polynomial fit
/// regresses `log ν_s` on `log s`; the exponential fit regresses `log ν_s`
/// on `s^γ` for `γ ∈ {0.05, 0.06, …, 3}` and keeps the best `γ`. The family
/// with the larger R² wins, ties going to the polynomial law.
pub fn decay_fit(eigenvalues: &[f64]) -> Result<DecayFit> {
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::DiagnosticUnavailable("no positive eigenvalues".into()));
    }
    let used = eigenvalues.iter().take_while(|&&v| v > 1e-12 * top).count();
    if used < MIN_DECAY_POINTS {
        return Err(Error::DiagnosticUnavailable(format!(
            "{used} positive eigenvalues, need at least {MIN_DECAY_POINTS}"
        )));
    }
    let logv: Vec<f64> = eigenvalues[..used].iter().map(|&v| math::ln(v)).collect();
    let logs: Vec<f64> = (1..=used).map(|s| math::ln(s as f64)).collect();
    let (a, b, r2) = ols(&logs, &logv);
    let poly = PolyFit { omega: math::exp(a), beta: -b, r_squared: r2 };

    let mut exp = ExpFit { scale: 0.0, alpha: 0.0, gamma: 0.0, r_squared: f64::NEG_INFINITY };
    for k in 5..=300 {
        let gamma = k as f64 / 100.0;
        let xs: Vec<f64> = (1..=used).map(|s| math::pow(s as f64, gamma)).collect();
        let (a, b, r2) = ols(&xs, &logv);
        if r2 > exp.r_squared {
            exp = ExpFit { scale: math::exp(a), alpha: -b, gamma, r_squared: r2 };
        }
    }
    let family = if poly.r_squared >= exp.r_squared { DecayFamily::Poly } else { DecayFamily::Exp };
    let degenerate = poly.beta.abs() < 1e-6;
    Ok(DecayFit { family, poly, exp, degenerate, used })
}

// Intercept, slope and R² of y on x. A constant response counts as a perfect fit.
fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (intercept, slope, r2)
}
