//! Closed-form kernel ridge regression.
//!
//! `f̂(x) = K_x (K + nλI)^{-1} Y`. The Cholesky factor of `K + nλI` is
//! computed once in [`fit`] and reused by prediction, weight vectors and the
//! bootstrap.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, common_shape, InputPoint, InputShape, KernelSpec};
use crate::linalg::SpdFactor;
use crate::math;

/// Regularization rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    /// `λ = n^{-1/3}`.
    #[default]
    Auto,
    Value(f64),
}

impl Lambda {
    pub fn resolve(self, n: usize) -> Result<f64> {
        let lambda = match self {
            Lambda::Auto => {
                if n == 0 {
                    return Err(Error::domain("automatic λ needs n ≥ 1"));
                }
                math::pow(n as f64, -1.0 / 3.0)
            }
            Lambda::Value(v) => v,
        };
        check_lambda(lambda)?;
        Ok(lambda)
    }
}

impl core::str::FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Lambda::Auto);
        }
        let v: f64 = s.parse().map_err(|_| Error::config(format!("λ must be a number or \"auto\", got {s:?}")))?;
        check_lambda(v)?;
        Ok(Lambda::Value(v))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("λ = {lambda} must be positive and finite")))
    }
}

/// Observed inputs and outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    xs: Vec<InputPoint>,
    ys: Vec<f64>,
}

impl Dataset {
    pub fn new(xs: Vec<InputPoint>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Dimension { expected: xs.len(), found: ys.len() });
        }
        common_shape(&xs)?;
        if let Some(i) = ys.iter().position(|y| !y.is_finite()) {
            return Err(Error::domain(format!("outcome {i} is not finite")));
        }
        if let Some(i) = xs.iter().position(|x| x.as_vector().is_some_and(|v| v.iter().any(|c| !c.is_finite()))) {
            return Err(Error::domain(format!("covariate {i} is not finite")));
        }
        Ok(Dataset { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn xs(&self) -> &[InputPoint] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn shape(&self) -> InputShape {
        self.xs[0].shape()
    }

    pub fn into_parts(self) -> (Vec<InputPoint>, Vec<f64>) {
        (self.xs, self.ys)
    }
}

/// Points at which predictions and bands are reported.
///
/// Suprema over a continuous domain are taken over this finite set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    points: Vec<InputPoint>,
}

impl EvalGrid {
    pub fn new(points: Vec<InputPoint>) -> Result<Self> {
        common_shape(&points)?;
        Ok(EvalGrid { points })
    }

    /// `size` equispaced scalars `j / (size - 1)` on `[0, 1]`.
    pub fn unit_interval(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::domain("grid size must be ≥ 1"));
        }
        let points = if size == 1 {
            alloc::vec![InputPoint::scalar(0.5)]
        } else {
            (0..size).map(|j| InputPoint::scalar(j as f64 / (size - 1) as f64)).collect()
        };
        Ok(EvalGrid { points })
    }

    pub fn points(&self) -> &[InputPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.points[0].shape()
    }
}

/// A fitted KRR model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct FittedKrr {
    spec: KernelSpec,
    xs: Vec<InputPoint>,
    ys: Vec<f64>,
    lambda: f64,
    dual_weights: DVector<f64>,
    residuals: DVector<f64>,
    gram: DMatrix<f64>,
    factor: SpdFactor,
}

/// Fits KRR with regularization `lambda`.
pub fn fit(spec: &KernelSpec, data: &Dataset, lambda: f64) -> Result<FittedKrr> {
    check_lambda(lambda)?;
    spec.validate()?;
    spec.check_shape(data.shape())?;
    let gram = kernels::gram_matrix(spec, data.xs())?;
    let factor = factor_regularized(&gram, lambda)?;
    let y = DVector::from_column_slice(data.ys());
    let dual_weights = factor.solve_vec(&y);
    if dual_weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("dual weights are not finite"));
    }
    let residuals = training_residuals(&gram, &dual_weights, data.ys());
    Ok(FittedKrr {
        spec: *spec,
        xs: data.xs().to_vec(),
        ys: data.ys().to_vec(),
        lambda,
        dual_weights,
        residuals,
        gram,
        factor,
    })
}

fn factor_regularized(gram: &DMatrix<f64>, lambda: f64) -> Result<SpdFactor> {
    let n = gram.nrows();
    let mut a = gram.clone();
    let shift = n as f64 * lambda;
    for i in 0..n {
        a[(i, i)] += shift;
    }
    SpdFactor::new(a)
}

// Column i of K equals the cross vector at x_i bit for bit, so this matches predict(x_i).
fn training_residuals(gram: &DMatrix<f64>, alpha: &DVector<f64>, ys: &[f64]) -> DVector<f64> {
    DVector::from_iterator(ys.len(), ys.iter().enumerate().map(|(i, y)| y - gram.column(i).dot(alpha)))
}

impl FittedKrr {
    /// Rebuilds a model from stored parts. The Gram matrix and factorization
    /// are recomputed; the stored dual weights and residuals are kept verbatim
    /// so predictions round-trip exactly.
    pub fn from_parts(
        spec: KernelSpec,
        xs: Vec<InputPoint>,
        ys: Vec<f64>,
        lambda: f64,
        dual_weights: Vec<f64>,
        residuals: Vec<f64>,
    ) -> Result<Self> {
        let n = xs.len();
        for len in [ys.len(), dual_weights.len(), residuals.len()] {
            if len != n {
                return Err(Error::Dimension { expected: n, found: len });
            }
        }
        let data = Dataset::new(xs, ys)?;
        check_lambda(lambda)?;
        spec.validate()?;
        spec.check_shape(data.shape())?;
        let gram = kernels::gram_matrix(&spec, data.xs())?;
        let factor = factor_regularized(&gram, lambda)?;
        let (xs, ys) = data.into_parts();
        Ok(FittedKrr {
            spec,
            xs,
            ys,
            lambda,
            dual_weights: DVector::from_vec(dual_weights),
            residuals: DVector::from_vec(residuals),
            gram,
            factor,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn xs(&self) -> &[InputPoint] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `α = (K + nλI)^{-1} Y`.
    pub fn dual_weights(&self) -> &DVector<f64> {
        &self.dual_weights
    }

    /// `ε̂_i = Y_i − f̂(X_i)`.
    pub fn residuals(&self) -> &DVector<f64> {
        &self.residuals
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// Solves `(K + nλI) z = b` with the cached factor.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(b)
    }

    pub fn solve_many(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve_mat(b)
    }

    pub fn shape(&self) -> InputShape {
        self.xs[0].shape()
    }

    fn check_point(&self, x: &InputPoint) -> Result<()> {
        let (want, got) = (self.shape(), x.shape());
        match (want, got) {
            _ if want == got => Ok(()),
            (InputShape::Vector(a), InputShape::Vector(b)) | (InputShape::Ranking(a), InputShape::Ranking(b)) => {
                Err(Error::Dimension { expected: a, found: b })
            }
            _ => Err(Error::kind(format!("model trained on {want:?}, queried with {got:?}"))),
        }
    }

    /// `K_x` for a query point.
    pub fn kernel_row(&self, x: &InputPoint) -> Result<DVector<f64>> {
        self.check_point(x)?;
        kernels::cross_vector(&self.spec, x, &self.xs)
    }

    /// `f̂(x) = K_x α`.
    pub fn predict(&self, x: &InputPoint) -> Result<f64> {
        Ok(self.kernel_row(x)?.dot(&self.dual_weights))
    }

    pub fn predict_many(&self, points: &[InputPoint]) -> Result<Vec<f64>> {
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let kt = self.cross_transposed(points)?;
        Ok((0..points.len()).map(|j| kt.column(j).dot(&self.dual_weights)).collect())
    }

    /// `v_x = (K + nλI)^{-1} K_xᵀ`, so that `f̂(x) = v_xᵀ Y`.
    pub fn weight_vector(&self, x: &InputPoint) -> Result<DVector<f64>> {
        Ok(self.factor.solve_vec(&self.kernel_row(x)?))
    }

    /// `n × g` matrix whose column j is the kernel vector of `points[j]`.
    pub fn cross_transposed(&self, points: &[InputPoint]) -> Result<DMatrix<f64>> {
        for p in points {
            self.check_point(p)?;
        }
        kernels::cross_matrix(&self.spec, &self.xs, points)
    }

    /// `n × g` matrix whose column j is `v_{points[j]}`.
    pub fn weight_matrix(&self, points: &[InputPoint]) -> Result<DMatrix<f64>> {
        Ok(self.factor.solve_mat(&self.cross_transposed(points)?))
    }

    /// `‖f̂‖²_H = αᵀKα`.
    pub fn hnorm_sq(&self) -> f64 {
        (&self.gram * &self.dual_weights).dot(&self.dual_weights)
    }

    /// `‖f̂ − f‖_H` for a candidate `f ∈ H` described by its values at the
    /// training inputs and its squared norm:
    /// `αᵀKα − 2 Σ α_i f(X_i) + ‖f‖²_H`, clamped at zero.
    pub fn hnorm_distance(&self, f_at_training: &[f64], f_norm_sq: f64) -> Result<f64> {
        if f_at_training.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), found: f_at_training.len() });
        }
        let cross: f64 = self.dual_weights.iter().zip(f_at_training).map(|(a, f)| a * f).sum();
        Ok(math::sqrt((self.hnorm_sq() - 2.0 * cross + f_norm_sq).max(0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_data(xs: &[f64], ys: &[f64]) -> Dataset {
        Dataset::new(xs.iter().map(|&x| InputPoint::scalar(x)).collect(), ys.to_vec()).unwrap()
    }

    #[test]
    fn auto_lambda() {
        assert!((Lambda::Auto.resolve(1000).unwrap() - 0.1).abs() < 1e-12);
        assert!(Lambda::Value(0.0).resolve(5).is_err());
        assert_eq!("auto".parse::<Lambda>().unwrap(), Lambda::Auto);
        assert_eq!("0.5".parse::<Lambda>().unwrap(), Lambda::Value(0.5));
        assert!("-1".parse::<Lambda>().is_err());
    }

    #[test]
    fn single_point_closed_form() {
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let data = scalar_data(&[0.2], &[1.7]);
        let lambda = 0.4;
        let m = fit(&spec, &data, lambda).unwrap();
        let x = InputPoint::scalar(0.5);
        let kx = libm::exp(-0.09 / (2.0 * 0.09));
        assert!((m.predict(&x).unwrap() - kx * 1.7 / (1.0 + lambda)).abs() < 1e-14);
        let v = m.weight_vector(&x).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v[0] - kx / (1.0 + lambda)).abs() < 1e-14);
    }

    #[test]
    fn invalid_inputs() {
        let spec = KernelSpec::gaussian(0.3).unwrap();
        let data = scalar_data(&[0.2, 0.4], &[1.0, 2.0]);
        assert!(matches!(fit(&spec, &data, 0.0), Err(Error::Domain(_))));
        assert!(Dataset::new(vec![InputPoint::scalar(0.0)], vec![f64::NAN]).is_err());
        assert!(Dataset::new(vec![InputPoint::scalar(0.0)], vec![]).is_err());
        let m = fit(&spec, &data, 0.1).unwrap();
        let r = InputPoint::Ranking(crate::kernels::Ranking::identity(3));
        assert!(matches!(m.predict(&r), Err(Error::Kind(_))));
        assert!(matches!(m.predict(&InputPoint::Vector(vec![0.0, 1.0])), Err(Error::Dimension { .. })));
        // Non-finite kernel values surface as numeric failures.
        let lin = KernelSpec::linear(1.0).unwrap();
        let big = scalar_data(&[1e200, 1.0], &[1.0, 1.0]);
        assert!(matches!(fit(&lin, &big, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn residuals_and_weights_are_consistent() {
        let spec = KernelSpec::matern(crate::MaternSmoothness::ThreeHalves, 0.2).unwrap();
        let xs = [0.05, 0.2, 0.33, 0.5, 0.51, 0.8, 0.95];
        let ys = [1.0, -0.5, 0.25, 2.0, 1.9, 0.0, -1.0];
        let m = fit(&spec, &scalar_data(&xs, &ys), 0.05).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let p = InputPoint::scalar(x);
            assert_eq!(m.residuals()[i], ys[i] - m.predict(&p).unwrap());
            let v = m.weight_vector(&p).unwrap();
            let y = DVector::from_column_slice(&ys);
            assert!((v.dot(&y) - m.predict(&p).unwrap()).abs() < 1e-12);
        }
        // (K + nλ) α = Y
        let n = xs.len();
        let lhs = m.gram() * m.dual_weights() + m.dual_weights() * (n as f64 * 0.05);
        let y = DVector::from_column_slice(&ys);
        assert!((lhs - &y).norm() <= 1e-8 * y.norm());
        let many = m.predict_many(&[InputPoint::scalar(0.1), InputPoint::scalar(0.7)]).unwrap();
        assert!((many[0] - m.predict(&InputPoint::scalar(0.1)).unwrap()).abs() < 1e-14);
        let w = m.weight_matrix(&[InputPoint::scalar(0.7)]).unwrap();
        assert!((w.column(0) - m.weight_vector(&InputPoint::scalar(0.7)).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn far_point_has_zero_weights() {
        let spec = KernelSpec::gaussian(0.1).unwrap();
        let m = fit(&spec, &scalar_data(&[0.0, 0.5], &[1.0, 2.0]), 0.1).unwrap();
        let v = m.weight_vector(&InputPoint::scalar(1e5)).unwrap();
        assert!(v.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn heavy_regularization_shrinks_to_zero() {
        let spec = KernelSpec::gaussian(0.2).unwrap();
        let ys = [1.0, -2.0, 3.0, 0.5];
        let m = fit(&spec, &scalar_data(&[0.1, 0.4, 0.6, 0.9], &ys), 1e6).unwrap();
        let bound = ys.iter().map(|y: &f64| y.abs()).sum::<f64>() / (4.0 * 1e6);
        for j in 0..=10 {
            assert!(m.predict(&InputPoint::scalar(j as f64 / 10.0)).unwrap().abs() <= bound);
        }
    }

    #[test]
    fn hnorm_distance_to_itself_is_zero() {
        let spec = KernelSpec::gaussian(0.2).unwrap();
        let m = fit(&spec, &scalar_data(&[0.1, 0.4, 0.6, 0.9], &[1.0, -2.0, 3.0, 0.5]), 0.1).unwrap();
        let at_train = m.predict_many(m.xs()).unwrap();
        assert!(m.hnorm_distance(&at_train, m.hnorm_sq()).unwrap() < 1e-6);
    }
}
