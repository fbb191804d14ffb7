//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn ensure_finite(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}

pub fn cholesky(m: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))
}

/// Log density of a centred residual under `N(0, S)` given the Cholesky factor of `S`.
pub fn log_gauss(residual: &Vector, chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let white = l.solve_lower_triangular(residual).expect("cholesky factor has a positive diagonal");
    -0.5 * (residual.len() as f64 * LN_2PI + log_det + white.norm_squared())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix through its eigendecomposition.
/// Eigenvalues down to `-tol` are clamped to zero; anything more negative is an error.
pub fn sqrt_psd(m: &Matrix, tol: f64) -> Result<Matrix> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol * scale {
            return Err(Error::Param(format!("matrix is not PSD (eigenvalue {v:e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Draw from `N(mean, cov)` for a PSD `cov`, tolerating exactly singular directions.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: &Vector, cov: &Matrix, rng: &mut R) -> Result<Vector> {
    let root = sqrt_psd(cov, 1e-9)?;
    let z = standard_normal(mean.len(), rng);
    Ok(mean + root * z)
}

/// `log(sum(exp(v)))` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
