//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Inverse of a symmetric positive-definite matrix; `None` when it is not
/// numerically positive definite.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Some(symmetrize(&inv))
    } else {
        None
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric square root `S` with `S Sᵀ = m`, clamping tiny negative
/// eigenvalues to zero. Used to draw from possibly singular normal laws.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Weighted least squares of every column of `y` on `x`.
///
/// Returns the `p × q` coefficient matrix, or `None` when `xᵀWx` is singular.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &[f64]) -> Option<DMatrix<f64>> {
    let (n, p) = x.shape();
    assert_eq!(y.nrows(), n);
    assert_eq!(w.len(), n);
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DMatrix::<f64>::zeros(p, y.ncols());
    for i in 0..n {
        let xi = x.row(i);
        for a in 0..p {
            let wa = w[i] * xi[a];
            if wa == 0.0 {
                continue;
            }
            for b in a..p {
                xtwx[(a, b)] += wa * xi[b];
            }
            for c in 0..y.ncols() {
                xtwy[(a, c)] += wa * y[(i, c)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let chol = xtwx.cholesky()?;
    Some(chol.solve(&xtwy))
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
