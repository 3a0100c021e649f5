//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Inverse of a symmetric positive-definite matrix via Cholesky.
/// Returns `None` when the factorization fails.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    inv.iter().all(|v| v.is_finite()).then(|| symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `max |a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

/// Sum of outer products `Σ u uᵀ`, accumulated in the given order.
pub fn outer_sum<'a>(dim: usize, vs: impl IntoIterator<Item = &'a DVector<f64>>) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(dim, dim);
    for v in vs {
        acc.ger(1.0, v, v, 1.0);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtFailure {
    /// An eigenvalue lies on the closed negative real axis.
    BranchCut,
    /// The iteration did not settle or produced non-finite values.
    NoConvergence,
}

/// Principal square root of a real square matrix.
///
/// Rejects matrices with an eigenvalue on `(-∞, 0]` (checked through the real
/// Schur form), then runs the unscaled Denman–Beavers iteration, which
/// converges quadratically to the principal root. The principal root of a
/// real matrix is real, so no complex arithmetic is needed.
pub fn principal_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SqrtFailure> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "square matrix required");
    if n == 0 {
        return Ok(a.clone());
    }
    let scale = a.amax().max(1.0);
    let tol = 1e-12 * scale;
    let eig = a
        .clone()
        .try_schur(f64::EPSILON, 500)
        .ok_or(SqrtFailure::NoConvergence)?
        .complex_eigenvalues();
    if eig.iter().any(|z| z.re <= tol && z.im.abs() <= tol) {
        return Err(SqrtFailure::BranchCut);
    }

    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse().ok_or(SqrtFailure::NoConvergence)?;
        let z_inv = z.clone().try_inverse().ok_or(SqrtFailure::NoConvergence)?;
        let y_next = (&y + z_inv) * 0.5;
        let z_next = (&z + y_inv) * 0.5;
        let delta = (&y_next - &y).amax();
        y = y_next;
        z = z_next;
        if !y.iter().all(|v| v.is_finite()) {
            return Err(SqrtFailure::NoConvergence);
        }
        if delta <= 1e-15 * y.amax().max(1.0) {
            return Ok(y);
        }
    }
    // Accept if the residual is tight even though the step test stalled at
    // rounding level.
    let resid = (&y * &y - a).amax();
    if resid <= 1e-10 * scale {
        Ok(y)
    } else {
        Err(SqrtFailure::NoConvergence)
    }
}
