//! Small dense kernels shared by the solver, the baselines and the analysis code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(q: f64) -> f64 {
    q.ln() - (-q).ln_1p()
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix. Infinite when singular.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves the symmetric system `m x = b`, adding `ridge * I` only when `m` is
/// numerically singular (condition estimate above `cond_limit`).
///
/// Returns the solution and whether the ridge path was taken.
pub fn solve_symmetric(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    ridge: f64,
    cond_limit: f64,
) -> Result<(DVector<f64>, bool)> {
    let cond = condition_estimate(m);
    let (sys, ridged) = if cond > cond_limit {
        let n = m.nrows();
        (m + DMatrix::<f64>::identity(n, n) * ridge, true)
    } else {
        (m.clone(), false)
    };
    let x = match sys.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => sys.lu().solve(b).ok_or(Error::Singular { condition: cond })?,
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular { condition: cond });
    }
    Ok((x, ridged))
}

/// Least-squares fit of `y` on the listed columns of `a` through a QR factorisation.
///
/// Returns coefficients in the order of `columns` and the squared residual norm.
/// Columns that are linearly dependent on earlier ones get coefficient zero.
pub fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>, columns: &[usize]) -> (DVector<f64>, f64) {
    if columns.is_empty() {
        return (DVector::zeros(0), y.norm_squared());
    }
    let n = a.nrows();
    let sub = DMatrix::from_fn(n, columns.len(), |i, j| a[(i, columns[j])]);
    let coef = if columns.len() <= n {
        let qr = sub.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let well_posed = r.diagonal().iter().all(|v| v.abs() > 1e-12 * scale.max(1.0));
        if well_posed {
            let qty = qr.q().transpose() * y;
            r.solve_upper_triangular(&qty)
                .unwrap_or_else(|| pseudo_solve(&sub, y))
        } else {
            pseudo_solve(&sub, y)
        }
    } else {
        pseudo_solve(&sub, y)
    };
    let resid = y - &sub * &coef;
    (coef, resid.norm_squared())
}

fn pseudo_solve(sub: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = sub.clone().svd(true, true);
    svd.solve(y, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(sub.ncols()))
}

/// Largest eigenvalue of the symmetric-definite pencil `(h1, h0)`, i.e. of
/// `L^{-1} h1 L^{-T}` where `h0 = L L^T`. `None` when `h0` is not positive definite.
pub fn generalized_max_eigenvalue(h1: &DMatrix<f64>, h0: &DMatrix<f64>) -> Option<f64> {
    let chol = h0.clone().cholesky()?;
    let l = chol.l();
    let linv_h1 = l.solve_lower_triangular(h1)?;
    let reduced = l.solve_lower_triangular(&linv_h1.transpose())?;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    eig.eigenvalues.iter().cloned().reduce(f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_saturates() {
        for &z in &[0.0, 0.3, 5.0, 40.0, 800.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((logit(sigmoid(1.7)) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 0.5, -1.0]);
        let (c, r2) = least_squares(&a, &y, &[0, 2]);
        let sub = DMatrix::from_fn(4, 2, |i, j| a[(i, [0, 2][j])]);
        let normal = (sub.transpose() * &sub).lu().solve(&(sub.transpose() * &y)).unwrap();
        assert!((c - &normal).amax() < 1e-12);
        assert!((r2 - (y - sub * normal).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn ridge_only_when_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 1.0]);
        let (x, ridged) = solve_symmetric(&m, &b, 1e-10, 1e12).unwrap();
        assert!(!ridged);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);

        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (x, ridged) = solve_symmetric(&s, &b, 1e-8, 1e12).unwrap();
        assert!(ridged);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pencil_diagonal_case() {
        let h0 = DMatrix::<f64>::identity(2, 2);
        let h1 = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.25]));
        assert!((generalized_max_eigenvalue(&h1, &h0).unwrap() - 0.5).abs() < 1e-14);
        let not_pd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(generalized_max_eigenvalue(&h1, &not_pd).is_none());
    }
}
