//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Iteration cap for every power/inverse iteration in the crate.
pub const EIGEN_MAX_ITERS: usize = 10_000;
/// Relative convergence threshold for eigenvalue iterations.
pub const EIGEN_TOL: f64 = 1e-12;

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Cholesky factor of a symmetric positive definite matrix, with a named
/// failure.
pub fn cholesky<T: Real>(m: &DMatrix<T>, what: &str) -> Result<Cholesky<T, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument(format!("{what} is not square")));
    }
    Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Synthesis(format!("{what} is not positive definite")))
}

/// `‖a M^{-1/2}‖₂` for a row vector `a`, computed as `‖L⁻¹ aᵀ‖` with
/// `M = L Lᵀ`.
pub fn inv_sqrt_norm<T: Real>(chol: &Cholesky<T, Dyn>, row: &DVector<T>) -> T {
    let y = chol
        .l_dirty()
        .solve_lower_triangular(row)
        .expect("cholesky factor has a positive diagonal");
    y.norm()
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration on the Rayleigh quotient.
pub fn max_eigenvalue_psd<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let n = m.nrows();
    if n == 0 || n != m.ncols() {
        return Err(Error::InvalidArgument("eigenvalue of an empty or non-square matrix".into()));
    }
    let scale = max_abs(m);
    if scale == T::zero() {
        return Ok(T::zero());
    }
    let m = symmetrize(m) / scale;
    // Deterministic start that is not orthogonal to any coordinate axis.
    let mut v = DVector::from_fn(n, |i, _| T::one() + T::lit(0.137 * (i as f64 + 1.0)));
    v.normalize_mut();
    let tol = T::tol(EIGEN_TOL);
    let mut lambda = (m.transpose() * &v).dot(&v);
    let mut stalls = 0;
    for _ in 0..EIGEN_MAX_ITERS {
        let w = &m * &v;
        let norm = w.norm();
        if norm == T::zero() {
            return Ok(T::zero());
        }
        v = w / norm;
        let next = (&m * &v).dot(&v);
        let change = (next - lambda).abs();
        lambda = next;
        if change <= tol * lambda.abs().max(T::eps()) {
            stalls += 1;
            // Two quiet iterations in a row guard against a lucky plateau.
            if stalls >= 2 {
                return Ok(lambda * scale);
            }
        } else {
            stalls = 0;
        }
    }
    Err(Error::Synthesis(format!(
        "power iteration did not converge in {EIGEN_MAX_ITERS} iterations"
    )))
}

/// Smallest eigenvalue of a symmetric positive definite matrix by inverse
/// iteration.
pub fn min_eigenvalue_spd<T: Real>(m: &DMatrix<T>) -> Result<T> {
    let chol = cholesky(m, "matrix")?;
    let inv = chol.inverse();
    let top = max_eigenvalue_psd(&inv)?;
    Ok(T::one() / top)
}

/// Spectral radius of a general square matrix (via its real Schur form).
pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, z| acc.max((z.re * z.re + z.im * z.im).sqrt()))
}

/// Row `i` of `h` multiplied by the stacked map `[I; k]`, i.e. the
/// sensitivity of constraint `i` to a state deviation when the input
/// deviation is `k` times it.
pub fn row_times_identity_gain<T: Real>(h: &DMatrix<T>, i: usize, k: &DMatrix<T>) -> DVector<T> {
    let n = k.ncols();
    let m = k.nrows();
    DVector::from_fn(n, |j, _| {
        let mut acc = h[(i, j)];
        for r in 0..m {
            acc += h[(i, n + r)] * k[(r, j)];
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn power_iteration_matches_closed_form() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_relative_eq!(max_eigenvalue_psd(&m).unwrap(), 3.0, epsilon = 1e-10);
        assert_relative_eq!(min_eigenvalue_spd(&m).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn power_iteration_on_repeated_eigenvalue() {
        let m = DMatrix::<f64>::identity(3, 3) * 4.0;
        assert_relative_eq!(max_eigenvalue_psd(&m).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_has_zero_top_eigenvalue() {
        let m = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(max_eigenvalue_psd(&m).unwrap(), 0.0);
    }

    #[test]
    fn inverse_sqrt_norm_identity() {
        let p = DMatrix::<f64>::identity(2, 2) * 4.0;
        let chol = cholesky(&p, "p").unwrap();
        let a = DVector::from_vec(vec![3.0, 4.0]);
        assert_relative_eq!(inv_sqrt_norm(&chol, &a), 2.5, epsilon = 1e-14);
    }

    #[test]
    fn spectral_radius_of_rotation_block() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert_relative_eq!(spectral_radius(&m), 0.5, epsilon = 1e-12);
    }
}
