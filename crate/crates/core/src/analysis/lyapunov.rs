//! Dense continuous-time Lyapunov solver.

use nalgebra::DMatrix;

use super::AnalysisError;

/// Largest real part among the eigenvalues of `a`.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::NEG_INFINITY;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `Aᵀ X + X A + Q = 0` through the Kronecker form
/// `(I ⊗ Aᵀ + Aᵀ ⊗ I) vec(X) = -vec(Q)`.
///
/// `A` must be Hurwitz. The returned `X` is symmetrized and its residual
/// checked against `1e-8 · ‖Q‖_F`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, AnalysisError> {
    let d = a.nrows();
    if a.ncols() != d || q.nrows() != d || q.ncols() != d {
        return Err(AnalysisError::Shape(format!(
            "A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    if d == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let abscissa = spectral_abscissa(a);
    if !(abscissa < 0.0) {
        return Err(AnalysisError::NotHurwitz { max_real: abscissa });
    }

    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(d, d);
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -DMatrix::from_column_slice(d * d, 1, q.as_slice());
    let sol = k.lu().solve(&rhs).ok_or(AnalysisError::Singular("Lyapunov operator"))?;
    let x = DMatrix::from_column_slice(d, d, sol.as_slice());
    let x = (&x + x.transpose()) * 0.5;

    let residual = (a.transpose() * &x + &x * a + q).norm();
    let bound = 1e-8 * q.norm().max(f64::MIN_POSITIVE);
    if residual > bound && residual > 0.0 {
        return Err(AnalysisError::Residual { residual, bound });
    }
    Ok(x)
}
