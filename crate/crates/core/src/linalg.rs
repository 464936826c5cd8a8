//! Dense linear-algebra helpers on top of `nalgebra`.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Cached Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("matrix has non-finite entries"));
        }
        let n = matrix.nrows();
        Cholesky::new(matrix)
            .map(|chol| SpdFactor { chol })
            .ok_or_else(|| Error::numeric(format!("Cholesky factorization of {n}x{n} matrix failed")))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// All eigenvalues of a symmetric matrix, largest first.
pub fn symmetric_eigenvalues_desc(matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("matrix has non-finite entries"));
    }
    let mut vals: Vec<f64> = matrix.clone().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Largest-`k` eigenpairs of a symmetric positive-semidefinite matrix.
///
/// Small problems use a full decomposition. Larger ones use block subspace
/// iteration with Rayleigh-Ritz, which copes with repeated eigenvalues (the
/// Gram matrix of a Mallows kernel over a whole symmetric group is highly
/// degenerate). Eigenvectors are returned as columns, unit norm, with values
/// in descending order.
pub fn top_eigenpairs(matrix: &DMatrix<f64>, k: usize, seed: u64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = matrix.nrows();
    if matrix.ncols() != m {
        return Err(Error::Dimension { expected: m, found: matrix.ncols() });
    }
    if k == 0 || k > m {
        return Err(Error::domain(format!("requested {k} eigenpairs of a {m}x{m} matrix")));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("matrix has non-finite entries"));
    }
    if m <= 400 || 4 * k >= m {
        return Ok(take_top(SymmetricEigen::new(matrix.clone()), k));
    }

    let block = (k + k.max(10)).min(m);
    let mut rng = rng::substream(seed, &[rng::tag::EIGEN, m as u64, k as u64]);
    let start = DMatrix::<f64>::from_fn(m, block, |_, _| StandardNormal.sample(&mut rng));
    let mut basis = start.qr().q();
    let tol = 1e-11;
    for _ in 0..2000 {
        let image = matrix * &basis;
        let projected = basis.transpose() * &image;
        let eig = SymmetricEigen::new(symmetrize(projected));
        let order = descending_order(&eig.eigenvalues);
        let scale = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
        let mut converged = true;
        for &j in order.iter().take(k) {
            let w = eig.eigenvectors.column(j);
            let residual = &image * w - (&basis * w) * eig.eigenvalues[j];
            if residual.norm() > tol * scale {
                converged = false;
                break;
            }
        }
        if converged {
            let ritz = &basis * &eig.eigenvectors;
            let mut vals = Vec::with_capacity(k);
            let mut vecs = DMatrix::<f64>::zeros(m, k);
            for (col, &j) in order.iter().take(k).enumerate() {
                vals.push(eig.eigenvalues[j]);
                let v = ritz.column(j);
                vecs.set_column(col, &(v / v.norm()));
            }
            return Ok((vals, vecs));
        }
        basis = image.qr().q();
    }
    Err(Error::numeric(format!("subspace iteration for top {k} eigenpairs did not converge")))
}

fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

fn descending_order(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn take_top(eig: SymmetricEigen<f64, Dyn>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let order = descending_order(&eig.eigenvalues);
    let m = eig.eigenvectors.nrows();
    let mut vals = Vec::with_capacity(k);
    let mut vecs = DMatrix::<f64>::zeros(m, k);
    for (col, &j) in order.iter().take(k).enumerate() {
        vals.push(eig.eigenvalues[j]);
        vecs.set_column(col, &eig.eigenvectors.column(j));
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subspace_iteration_matches_full_decomposition() {
        // Exponential-kernel Gram on 600 points: large enough for the iterative path.
        let m = 600;
        let a = DMatrix::<f64>::from_fn(m, m, |i, j| {
            let d = (i as f64 - j as f64).abs() / m as f64;
            libm::exp(-d / 0.05)
        });
        let (vals, vecs) = top_eigenpairs(&a, 5, 3).unwrap();
        let full = take_top(SymmetricEigen::new(a.clone()), 5);
        for i in 0..5 {
            assert!((vals[i] - full.0[i]).abs() <= 1e-9 * full.0[0]);
            let dot = vecs.column(i).dot(&full.1.column(i)).abs();
            assert!((dot - 1.0).abs() < 1e-8, "eigvec {i} alignment {dot}");
        }
    }

    #[test]
    fn repeated_eigenvalues_are_resolved() {
        // Block-diagonal with a 3-fold top eigenvalue.
        let m = 450;
        let mut a = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            a[(i, i)] = if i < 3 { 5.0 } else { 1.0 / (1.0 + i as f64) };
        }
        let (vals, vecs) = top_eigenpairs(&a, 4, 1).unwrap();
        for v in &vals[..3] {
            assert!((v - 5.0).abs() < 1e-9);
        }
        assert!((vals[3] - 0.25).abs() < 1e-9);
        let gram = vecs.transpose() * &vecs;
        assert!((gram - DMatrix::<f64>::identity(4, 4)).norm() < 1e-8);
    }

    #[test]
    fn factor_rejects_indefinite_and_non_finite() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdFactor::new(bad).is_err());
        let nan = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(SpdFactor::new(nan), Err(Error::Numeric(_))));
    }
}
