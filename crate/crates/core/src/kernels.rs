//! Kernel functions over vector and ranking inputs.
//!
//! Vector inputs support the linear, polynomial, Gaussian and half-integer
//! Matérn families. Ranking inputs use the Mallows kernel
//! `k(π, π') = exp(-ℓ N(π, π'))` where `N` counts discordant pairs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::parallel;

// ---------------------------------------------------------------------------
// Rankings
// ---------------------------------------------------------------------------

/// A complete ranking of `q` alternatives.
///
/// Stored as the rank vector `π`: `ranks()[s]` is the position (1 = most
/// preferred) given to alternative `s`. The text form used in data files is
/// this vector, comma separated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Ranking {
    ranks: Vec<u32>,
}

impl Ranking {
    /// Validates that `ranks` is a permutation of `1..=q`.
    pub fn from_ranks(ranks: Vec<u32>) -> Result<Self> {
        let q = ranks.len();
        if q == 0 {
            return Err(Error::domain("ranking over zero alternatives"));
        }
        let mut seen = vec![false; q];
        for &r in &ranks {
            let r = r as usize;
            if r == 0 || r > q || seen[r - 1] {
                return Err(Error::domain(format!("{ranks:?} is not a permutation of 1..={q}")));
            }
            seen[r - 1] = true;
        }
        Ok(Ranking { ranks })
    }

    /// Builds a ranking from a preference order: `order[p]` is the
    /// (zero-based) alternative placed at position `p + 1`.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let q = order.len();
        let mut ranks = vec![0u32; q];
        for (pos, &alt) in order.iter().enumerate() {
            if alt >= q || ranks[alt] != 0 {
                return Err(Error::domain(format!("{order:?} is not an ordering of 0..{q}")));
            }
            ranks[alt] = pos as u32 + 1;
        }
        Ok(Ranking { ranks })
    }

    pub fn identity(q: usize) -> Self {
        Ranking { ranks: (1..=q as u32).collect() }
    }

    /// Number of alternatives.
    pub fn q(&self) -> usize {
        self.ranks.len()
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    /// Position of alternative `alt` (1-based).
    pub fn rank_of(&self, alt: usize) -> u32 {
        self.ranks[alt]
    }

    /// Alternatives from most to least preferred (zero-based).
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0usize; self.q()];
        for (alt, &r) in self.ranks.iter().enumerate() {
            order[r as usize - 1] = alt;
        }
        order
    }

    /// `(self ∘ tau)(s) = self(tau(s))`, i.e. relabel alternatives by `tau`.
    pub fn compose(&self, tau: &Ranking) -> Result<Ranking> {
        if tau.q() != self.q() {
            return Err(Error::Dimension { expected: self.q(), found: tau.q() });
        }
        let ranks = tau.ranks.iter().map(|&t| self.ranks[t as usize - 1]).collect();
        Ok(Ranking { ranks })
    }

    /// Lexicographic index of the rank vector among all `q!` permutations.
    pub fn lexicographic_index(&self) -> usize {
        let q = self.q();
        let mut index = 0usize;
        for i in 0..q {
            let smaller_later = self.ranks[i + 1..].iter().filter(|&&r| r < self.ranks[i]).count();
            index = index * (q - i) + smaller_later;
        }
        index
    }

    /// Every ranking of `q` alternatives, in lexicographic order of rank vectors.
    pub fn all(q: usize) -> Vec<Ranking> {
        let mut current: Vec<u32> = (1..=q as u32).collect();
        let mut out = Vec::new();
        loop {
            out.push(Ranking { ranks: current.clone() });
            // next lexicographic permutation
            let Some(i) = (0..q.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1]) else {
                break;
            };
            let j = (i + 1..q).rev().find(|&j| current[j] > current[i]).unwrap();
            current.swap(i, j);
            current[i + 1..].reverse();
        }
        out
    }
}

impl TryFrom<Vec<u32>> for Ranking {
    type Error = Error;

    fn try_from(ranks: Vec<u32>) -> Result<Self> {
        Ranking::from_ranks(ranks)
    }
}

impl From<Ranking> for Vec<u32> {
    fn from(r: Ranking) -> Vec<u32> {
        r.ranks
    }
}

impl fmt::Display for Ranking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.ranks.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

impl core::str::FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ranks = s
            .split(',')
            .map(|t| t.trim().parse::<u32>().map_err(|_| Error::domain(format!("bad rank entry {t:?} in {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ranking::from_ranks(ranks)
    }
}

/// Number of unordered pairs of alternatives on which `a` and `b` disagree.
pub fn discordant_pairs(a: &Ranking, b: &Ranking) -> Result<usize> {
    if a.q() != b.q() {
        return Err(Error::Dimension { expected: a.q(), found: b.q() });
    }
    Ok(discordant_unchecked(&a.ranks, &b.ranks))
}

#[inline]
fn discordant_unchecked(a: &[u32], b: &[u32]) -> usize {
    let q = a.len();
    let mut count = 0usize;
    for s in 0..q {
        let (as_, bs) = (a[s], b[s]);
        for t in (s + 1)..q {
            count += ((as_ < a[t]) != (bs < b[t])) as usize;
        }
    }
    count
}

/// Largest possible number of discordant pairs for `q` alternatives.
pub fn max_discordant(q: usize) -> usize {
    q * q.saturating_sub(1) / 2
}

// ---------------------------------------------------------------------------
// Input points
// ---------------------------------------------------------------------------

/// A covariate value: either a real vector or a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPoint {
    Vector(Vec<f64>),
    Ranking(Ranking),
}

impl InputPoint {
    pub fn scalar(x: f64) -> Self {
        InputPoint::Vector(vec![x])
    }

    /// Shape descriptor: vector dimension or number of ranked alternatives.
    pub fn shape(&self) -> InputShape {
        match self {
            InputPoint::Vector(v) => InputShape::Vector(v.len()),
            InputPoint::Ranking(r) => InputShape::Ranking(r.q()),
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            InputPoint::Vector(v) => Some(v),
            InputPoint::Ranking(_) => None,
        }
    }

    pub fn as_ranking(&self) -> Option<&Ranking> {
        match self {
            InputPoint::Ranking(r) => Some(r),
            InputPoint::Vector(_) => None,
        }
    }
}

impl From<Ranking> for InputPoint {
    fn from(r: Ranking) -> Self {
        InputPoint::Ranking(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Vector(usize),
    Ranking(usize),
}

/// Checks that all points share one variant and one dimension.
pub fn common_shape(xs: &[InputPoint]) -> Result<InputShape> {
    let first = xs.first().ok_or_else(|| Error::domain("empty input list"))?.shape();
    for (i, x) in xs.iter().enumerate().skip(1) {
        let s = x.shape();
        if s != first {
            return Err(Error::kind(format!("point {i} has shape {s:?}, expected {first:?}")));
        }
    }
    Ok(first)
}

// ---------------------------------------------------------------------------
// Kernel specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaternSmoothness {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[serde(rename = "5/2")]
    FiveHalves,
}

impl MaternSmoothness {
    pub fn value(self) -> f64 {
        match self {
            MaternSmoothness::Half => 0.5,
            MaternSmoothness::ThreeHalves => 1.5,
            MaternSmoothness::FiveHalves => 2.5,
        }
    }

    pub fn from_value(nu: f64) -> Result<Self> {
        match nu {
            v if v == 0.5 => Ok(MaternSmoothness::Half),
            v if v == 1.5 => Ok(MaternSmoothness::ThreeHalves),
            v if v == 2.5 => Ok(MaternSmoothness::FiveHalves),
            _ => Err(Error::domain(format!("Matérn smoothness {nu} not in {{1/2, 3/2, 5/2}}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `xᵀy`
    Linear,
    /// `(xᵀy + offset)^degree`
    Polynomial {
        degree: u32,
        offset: f64,
    },
    /// `exp(-‖x-y‖² / (2ι²))`
    Gaussian {
        lengthscale: f64,
    },
    Matern {
        smoothness: MaternSmoothness,
        lengthscale: f64,
    },
    /// `exp(-ℓ N(π, π'))`
    Mallows {
        lengthscale: f64,
    },
}

impl KernelFamily {
    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::Polynomial { .. } => "polynomial",
            KernelFamily::Gaussian { .. } => "gaussian",
            KernelFamily::Matern { .. } => "matern",
            KernelFamily::Mallows { .. } => "mallows",
        }
    }

    pub fn takes_rankings(&self) -> bool {
        matches!(self, KernelFamily::Mallows { .. })
    }

    /// Families whose values lie in (0, 1] with unit diagonal.
    pub fn is_normalized(&self) -> bool {
        matches!(self, KernelFamily::Gaussian { .. } | KernelFamily::Matern { .. } | KernelFamily::Mallows { .. })
    }
}

/// A kernel family with its hyperparameters and the bound `κ` with `k(s,t) ≤ κ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sup_bound: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, sup_bound: f64) -> Result<Self> {
        let spec = KernelSpec { family, sup_bound };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear kernel; `sup_bound` must be supplied because it depends on the input domain.
    pub fn linear(sup_bound: f64) -> Result<Self> {
        Self::new(KernelFamily::Linear, sup_bound)
    }

    pub fn polynomial(degree: u32, offset: f64, sup_bound: f64) -> Result<Self> {
        Self::new(KernelFamily::Polynomial { degree, offset }, sup_bound)
    }

    pub fn gaussian(lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian { lengthscale }, 1.0)
    }

    pub fn matern(smoothness: MaternSmoothness, lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern { smoothness, lengthscale }, 1.0)
    }

    pub fn mallows(lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Mallows { lengthscale }, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sup_bound >= 0.0 && self.sup_bound.is_finite()) {
            return Err(Error::domain(format!("sup bound {} must be finite and ≥ 0", self.sup_bound)));
        }
        match self.family {
            KernelFamily::Linear => Ok(()),
            KernelFamily::Polynomial { degree, offset } => {
                if degree == 0 {
                    Err(Error::domain("polynomial degree must be ≥ 1"))
                } else if !(offset >= 0.0 && offset.is_finite()) {
                    Err(Error::domain(format!("polynomial offset {offset} must be finite and ≥ 0")))
                } else {
                    Ok(())
                }
            }
            KernelFamily::Gaussian { lengthscale } | KernelFamily::Matern { lengthscale, .. } => {
                if lengthscale > 0.0 && lengthscale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::domain(format!("lengthscale {lengthscale} must be positive and finite")))
                }
            }
            KernelFamily::Mallows { lengthscale } => {
                if lengthscale >= 0.0 && lengthscale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::domain(format!("Mallows lengthscale {lengthscale} must be finite and ≥ 0")))
                }
            }
        }
    }

    /// Checks that `shape` is an input this kernel can evaluate.
    pub fn check_shape(&self, shape: InputShape) -> Result<()> {
        match (self.family.takes_rankings(), shape) {
            (true, InputShape::Ranking(_)) | (false, InputShape::Vector(_)) => Ok(()),
            (true, InputShape::Vector(_)) => {
                Err(Error::kind(format!("{} kernel takes rankings, got a vector", self.family.name())))
            }
            (false, InputShape::Ranking(_)) => {
                Err(Error::kind(format!("{} kernel takes vectors, got a ranking", self.family.name())))
            }
        }
    }

    fn evaluator(&self, shape: InputShape) -> Result<Evaluator> {
        self.check_shape(shape)?;
        let mallows_table = match (self.family, shape) {
            (KernelFamily::Mallows { lengthscale }, InputShape::Ranking(q)) => {
                (0..=max_discordant(q)).map(|d| math::exp(-lengthscale * d as f64)).collect()
            }
            _ => Vec::new(),
        };
        Ok(Evaluator { family: self.family, mallows_table })
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Linear => write!(f, "linear"),
            KernelFamily::Polynomial { degree, offset } => write!(f, "polynomial(d={degree}, c={offset})"),
            KernelFamily::Gaussian { lengthscale } => write!(f, "gaussian(ι={lengthscale})"),
            KernelFamily::Matern { smoothness, lengthscale } => {
                write!(f, "matern(ν={}, ι={lengthscale})", smoothness.value())
            }
            KernelFamily::Mallows { lengthscale } => write!(f, "mallows(ℓ={lengthscale})"),
        }
    }
}

/// Shape-checked kernel with precomputed lookup tables.
struct Evaluator {
    family: KernelFamily,
    mallows_table: Vec<f64>,
}

impl Evaluator {
    // Callers guarantee both points match the shape the evaluator was built for.
    #[inline]
    fn eval(&self, x: &InputPoint, y: &InputPoint) -> f64 {
        match (x, y) {
            (InputPoint::Ranking(a), InputPoint::Ranking(b)) => {
                self.mallows_table[discordant_unchecked(&a.ranks, &b.ranks)]
            }
            (InputPoint::Vector(a), InputPoint::Vector(b)) => vector_kernel(self.family, a, b),
            _ => unreachable!("shape checked by caller"),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn vector_kernel(family: KernelFamily, a: &[f64], b: &[f64]) -> f64 {
    match family {
        KernelFamily::Linear => dot(a, b),
        KernelFamily::Polynomial { degree, offset } => math::powi(dot(a, b) + offset, degree),
        KernelFamily::Gaussian { lengthscale } => {
            math::exp(-squared_distance(a, b) / (2.0 * lengthscale * lengthscale))
        }
        KernelFamily::Matern { smoothness, lengthscale } => {
            let r = math::sqrt(squared_distance(a, b)) / lengthscale;
            match smoothness {
                MaternSmoothness::Half => math::exp(-r),
                MaternSmoothness::ThreeHalves => {
                    let s = math::sqrt(3.0) * r;
                    (1.0 + s) * math::exp(-s)
                }
                MaternSmoothness::FiveHalves => {
                    let s = math::sqrt(5.0) * r;
                    (1.0 + s + s * s / 3.0) * math::exp(-s)
                }
            }
        }
        KernelFamily::Mallows { .. } => unreachable!("Mallows takes rankings"),
    }
}

fn check_pair(x: &InputPoint, y: &InputPoint) -> Result<InputShape> {
    let (sx, sy) = (x.shape(), y.shape());
    match (sx, sy) {
        (InputShape::Vector(a), InputShape::Vector(b)) | (InputShape::Ranking(a), InputShape::Ranking(b)) => {
            if a == b {
                Ok(sx)
            } else {
                Err(Error::Dimension { expected: a, found: b })
            }
        }
        _ => Err(Error::kind("cannot compare a vector with a ranking")),
    }
}

/// `k(x, y)` for one pair of points.
pub fn kernel_eval(spec: &KernelSpec, x: &InputPoint, y: &InputPoint) -> Result<f64> {
    let shape = check_pair(x, y)?;
    spec.check_shape(shape)?;
    Ok(match (x, y) {
        (InputPoint::Ranking(a), InputPoint::Ranking(b)) => match spec.family {
            KernelFamily::Mallows { lengthscale } => {
                math::exp(-lengthscale * discordant_unchecked(&a.ranks, &b.ranks) as f64)
            }
            _ => unreachable!(),
        },
        (InputPoint::Vector(a), InputPoint::Vector(b)) => vector_kernel(spec.family, a, b),
        _ => unreachable!(),
    })
}

/// Symmetric `n × n` Gram matrix `K_ij = k(x_i, x_j)`.
pub fn gram_matrix(spec: &KernelSpec, xs: &[InputPoint]) -> Result<DMatrix<f64>> {
    let shape = common_shape(xs)?;
    let ev = spec.evaluator(shape)?;
    let n = xs.len();
    // Upper triangle row by row; each entry is computed exactly once.
    let rows = parallel::map_indexed(n, |i| (i..n).map(|j| ev.eval(&xs[i], &xs[j])).collect::<Vec<f64>>());
    let mut k = DMatrix::<f64>::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Row vector `K_x = (k(x, x_1), …, k(x, x_n))`, returned as a column.
pub fn cross_vector(spec: &KernelSpec, x: &InputPoint, xs: &[InputPoint]) -> Result<DVector<f64>> {
    let shape = common_shape(xs)?;
    check_pair(x, &xs[0])?;
    let ev = spec.evaluator(shape)?;
    Ok(DVector::from_iterator(xs.len(), xs.iter().map(|xi| ev.eval(x, xi))))
}

/// `rows.len() × cols.len()` matrix of kernel values.
pub fn cross_matrix(spec: &KernelSpec, rows: &[InputPoint], cols: &[InputPoint]) -> Result<DMatrix<f64>> {
    let shape = common_shape(cols)?;
    let row_shape = common_shape(rows)?;
    if row_shape != shape {
        return Err(match (row_shape, shape) {
            (InputShape::Vector(a), InputShape::Vector(b)) | (InputShape::Ranking(a), InputShape::Ranking(b)) => {
                Error::Dimension { expected: b, found: a }
            }
            _ => Error::kind("cannot compare vectors with rankings"),
        });
    }
    let ev = spec.evaluator(shape)?;
    let m = cols.len();
    let data = parallel::map_indexed(rows.len(), |i| (0..m).map(|j| ev.eval(&rows[i], &cols[j])).collect::<Vec<f64>>());
    Ok(DMatrix::from_fn(rows.len(), m, |i, j| data[i][j]))
}

// ---------------------------------------------------------------------------
// Median heuristic
// ---------------------------------------------------------------------------

/// How a median pairwise dissimilarity becomes a Mallows lengthscale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MallowsConvention {
    /// `ℓ = 1 / median N`.
    #[default]
    Reciprocal,
    /// `ℓ = median N`, literally.
    Raw,
    /// `exp(-N / (2ι²))` with `ι = median N`, i.e. `ℓ = 1 / (2 median²)`.
    HalfInverseSquare,
}

/// Median pairwise dissimilarity of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianHeuristic {
    /// Median Euclidean distance (vectors) or discordant-pair count (rankings).
    pub median: f64,
    /// `1 / median`.
    pub reciprocal: f64,
}

impl MedianHeuristic {
    /// Gaussian/Matérn lengthscale `ι` = median distance.
    pub fn lengthscale(&self) -> f64 {
        self.median
    }

    pub fn mallows_lengthscale(&self, convention: MallowsConvention) -> f64 {
        match convention {
            MallowsConvention::Reciprocal => self.reciprocal,
            MallowsConvention::Raw => self.median,
            MallowsConvention::HalfInverseSquare => 1.0 / (2.0 * self.median * self.median),
        }
    }
}

/// Median over pairs `i < j` of `‖x_i − x_j‖` (vectors) or `N(x_i, x_j)` (rankings).
pub fn median_heuristic(xs: &[InputPoint]) -> Result<MedianHeuristic> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::domain("median heuristic needs at least two points"));
    }
    let shape = common_shape(xs)?;
    let pairs = n * (n - 1) / 2;
    let median = match shape {
        InputShape::Ranking(q) => {
            let mut hist = vec![0usize; max_discordant(q) + 1];
            for i in 0..n {
                let a = &xs[i].as_ranking().unwrap().ranks;
                for x in &xs[i + 1..] {
                    hist[discordant_unchecked(a, &x.as_ranking().unwrap().ranks)] += 1;
                }
            }
            let kth = |k: usize| {
                let mut acc = 0usize;
                for (d, &c) in hist.iter().enumerate() {
                    acc += c;
                    if acc > k {
                        return d as f64;
                    }
                }
                unreachable!()
            };
            median_from_order_stat(pairs, kth)
        }
        InputShape::Vector(_) => {
            let mut dists = Vec::with_capacity(pairs);
            for i in 0..n {
                let a = xs[i].as_vector().unwrap();
                for x in &xs[i + 1..] {
                    dists.push(math::sqrt(squared_distance(a, x.as_vector().unwrap())));
                }
            }
            dists.sort_by(f64::total_cmp);
            median_from_order_stat(pairs, |k| dists[k])
        }
    };
    if !(median > 0.0) {
        return Err(Error::DegenerateData(String::from("median pairwise dissimilarity is zero")));
    }
    Ok(MedianHeuristic { median, reciprocal: 1.0 / median })
}

fn median_from_order_stat(len: usize, kth: impl Fn(usize) -> f64) -> f64 {
    if len % 2 == 1 {
        kth(len / 2)
    } else {
        0.5 * (kth(len / 2 - 1) + kth(len / 2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(v: &[u32]) -> Ranking {
        Ranking::from_ranks(v.to_vec()).unwrap()
    }

    fn brute_discordant(a: &Ranking, b: &Ranking) -> usize {
        let q = a.q();
        let mut c = 0;
        for s in 0..q {
            for t in 0..q {
                if s != t && a.rank_of(s) < a.rank_of(t) && b.rank_of(s) > b.rank_of(t) {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn discordant_examples() {
        let a = r(&[1, 2, 3]);
        assert_eq!(discordant_pairs(&a, &a).unwrap(), 0);
        assert_eq!(discordant_pairs(&a, &r(&[3, 2, 1])).unwrap(), 3);
        for q in 1..9 {
            let id = Ranking::identity(q);
            let rev = Ranking::from_ranks((1..=q as u32).rev().collect()).unwrap();
            assert_eq!(discordant_pairs(&id, &rev).unwrap(), q * (q - 1) / 2);
        }
        assert!(matches!(discordant_pairs(&a, &r(&[1, 2])), Err(Error::Dimension { expected: 3, found: 2 })));
    }

    #[test]
    fn discordant_matches_pair_enumeration_up_to_six() {
        for q in 1..=6 {
            let all = Ranking::all(q);
            for a in &all {
                for b in &all {
                    assert_eq!(discordant_pairs(a, b).unwrap(), brute_discordant(a, b));
                }
            }
        }
    }

    #[test]
    fn mallows_is_right_invariant_up_to_five() {
        for q in 1..=5 {
            let all = Ranking::all(q);
            for a in &all {
                for b in &all {
                    let n = discordant_pairs(a, b).unwrap();
                    for tau in &all {
                        let (at, bt) = (a.compose(tau).unwrap(), b.compose(tau).unwrap());
                        assert_eq!(discordant_pairs(&at, &bt).unwrap(), n);
                    }
                }
            }
        }
    }

    #[test]
    fn ranking_helpers() {
        assert_eq!(Ranking::all(4).len(), 24);
        for (i, p) in Ranking::all(4).iter().enumerate() {
            assert_eq!(p.lexicographic_index(), i);
            assert_eq!(Ranking::from_order(&p.order()).unwrap(), *p);
        }
        assert!(Ranking::from_ranks(vec![1, 1, 3]).is_err());
        assert!(Ranking::from_ranks(vec![0, 1]).is_err());
        let parsed: Ranking = "3,1,2".parse().unwrap();
        assert_eq!(parsed.to_string(), "3,1,2");
        assert_eq!(parsed.order(), vec![1, 2, 0]);
    }

    #[test]
    fn kernel_examples() {
        let m = KernelSpec::mallows(1.0).unwrap();
        let a = InputPoint::from(r(&[1, 2, 3]));
        let b = InputPoint::from(r(&[3, 2, 1]));
        assert_eq!(kernel_eval(&m, &a, &a).unwrap(), 1.0);
        let expected = libm::exp(-(brute_discordant(&r(&[1, 2, 3]), &r(&[3, 2, 1])) as f64));
        assert_eq!(kernel_eval(&m, &a, &b).unwrap(), expected);
        assert!((expected - libm::exp(-3.0)).abs() < 1e-15);

        let lin = KernelSpec::linear(1.0).unwrap();
        let x = InputPoint::Vector(vec![1.0, 2.0]);
        let y = InputPoint::Vector(vec![3.0, -1.0]);
        assert_eq!(kernel_eval(&lin, &x, &y).unwrap(), 1.0);

        assert!(matches!(kernel_eval(&m, &x, &x), Err(Error::Kind(_))));
        assert!(matches!(kernel_eval(&lin, &a, &a), Err(Error::Kind(_))));
        assert!(matches!(kernel_eval(&lin, &x, &a), Err(Error::Kind(_))));
    }

    #[test]
    fn matern_closed_forms() {
        let x = InputPoint::scalar(0.0);
        let y = InputPoint::scalar(0.3);
        let r = 0.3 / 0.2;
        let half = KernelSpec::matern(MaternSmoothness::Half, 0.2).unwrap();
        assert!((kernel_eval(&half, &x, &y).unwrap() - libm::exp(-r)).abs() < 1e-15);
        let th = KernelSpec::matern(MaternSmoothness::ThreeHalves, 0.2).unwrap();
        let s = math::sqrt(3.0) * r;
        assert!((kernel_eval(&th, &x, &y).unwrap() - (1.0 + s) * libm::exp(-s)).abs() < 1e-15);
        let fh = KernelSpec::matern(MaternSmoothness::FiveHalves, 0.2).unwrap();
        let s = math::sqrt(5.0) * r;
        let want = (1.0 + s + 5.0 * r * r / 3.0) * libm::exp(-s);
        assert!((kernel_eval(&fh, &x, &y).unwrap() - want).abs() < 1e-15);
        for spec in [half, th, fh] {
            assert_eq!(kernel_eval(&spec, &x, &x).unwrap(), 1.0);
        }
        assert!(MaternSmoothness::from_value(1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::mallows(0.0).is_ok());
        assert!(KernelSpec::mallows(-0.1).is_err());
        assert!(KernelSpec::polynomial(0, 1.0, 1.0).is_err());
        assert!(KernelSpec::linear(-1.0).is_err());
    }

    #[test]
    fn gram_small_cases() {
        let g = KernelSpec::gaussian(0.5).unwrap();
        let one = [InputPoint::scalar(0.3)];
        let k = gram_matrix(&g, &one).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_eq!(k[(0, 0)], 1.0);

        // Linear kernel Gram equals X Xᵀ.
        let rows = [[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let xs: Vec<InputPoint> = rows.iter().map(|r| InputPoint::Vector(r.to_vec())).collect();
        let x = DMatrix::from_fn(3, 2, |i, j| rows[i][j]);
        let k = gram_matrix(&KernelSpec::linear(4.0).unwrap(), &xs).unwrap();
        assert!((k - &x * x.transpose()).norm() < 1e-14);

        let mixed = [InputPoint::scalar(0.0), InputPoint::from(r(&[1, 2]))];
        assert!(matches!(gram_matrix(&g, &mixed), Err(Error::Kind(_))));
    }

    #[test]
    fn mallows_gram_over_s3_is_psd() {
        let xs: Vec<InputPoint> = Ranking::all(3).into_iter().map(InputPoint::from).collect();
        let k = gram_matrix(&KernelSpec::mallows(1.0).unwrap(), &xs).unwrap();
        assert_eq!(k.shape(), (6, 6));
        let min = k.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn cross_vector_consistency() {
        let g = KernelSpec::gaussian(0.2).unwrap();
        let xs: Vec<InputPoint> = [0.0, 0.1, 0.5, 0.9].iter().map(|&v| InputPoint::scalar(v)).collect();
        let k = gram_matrix(&g, &xs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let row = cross_vector(&g, x, &xs).unwrap();
            assert_eq!(row[i], kernel_eval(&g, x, x).unwrap());
            for j in 0..xs.len() {
                assert_eq!(row[j], k[(i, j)]);
            }
        }
        let far = cross_vector(&g, &InputPoint::scalar(1e6), &xs).unwrap();
        assert!(far.iter().all(|&v| v == 0.0));
        let cm = cross_matrix(&g, &xs, &xs).unwrap();
        assert_eq!(cm, k);
    }

    #[test]
    fn median_heuristic_examples() {
        let xs: Vec<InputPoint> = [0.0, 1.0, 3.0].iter().map(|&v| InputPoint::scalar(v)).collect();
        let h = median_heuristic(&xs).unwrap();
        assert_eq!(h.median, 2.0);
        assert_eq!(h.lengthscale(), 2.0);

        let same = [InputPoint::scalar(1.0), InputPoint::scalar(1.0)];
        assert!(matches!(median_heuristic(&same), Err(Error::DegenerateData(_))));

        // Identity and its reversal over 3 alternatives: the only pair has N = 3.
        let rk = [InputPoint::from(r(&[1, 2, 3])), InputPoint::from(r(&[3, 2, 1]))];
        let h = median_heuristic(&rk).unwrap();
        assert_eq!(h.median, 3.0);
        assert!((h.mallows_lengthscale(MallowsConvention::Reciprocal) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(h.mallows_lengthscale(MallowsConvention::Raw), 3.0);
        assert!((h.mallows_lengthscale(MallowsConvention::HalfInverseSquare) - 1.0 / 18.0).abs() < 1e-15);
    }
}
