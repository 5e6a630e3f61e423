//! Gaussian fits of sample matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gradcore::Array;

/// Sample mean and unbiased covariance of an `n x d` matrix.
pub fn gaussian_fit(samples: &Array) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = (samples.rows(), samples.cols());
    if n < 2 {
        return Err(Error::DegenerateSample(format!("need at least 2 samples, got {n}")));
    }
    let mean = DVector::from_vec(samples.column_means());
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let row = samples.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok((mean, cov))
}

/// Natural log of the determinant of a symmetric positive-definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateSample("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        let v = l[(i, i)];
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::DegenerateSample("covariance is singular".into()));
        }
        acc += 2.0 * v.ln();
    }
    Ok(acc)
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues in `[-tol, 0)` are treated as zero; anything more negative
/// is a numeric error.
pub fn sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Numeric(format!(
                "matrix has eigenvalue {v:e}, below the tolerance -{tol:e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Trace of the principal square root of a symmetric PSD matrix.
pub fn trace_sqrt_psd(m: &DMatrix<f64>, tol: f64) -> Result<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut acc = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < -tol {
            return Err(Error::Numeric(format!(
                "matrix has eigenvalue {v:e}, below the tolerance -{tol:e}"
            )));
        }
        acc += v.max(0.0).sqrt();
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbiased_covariance() {
        let a = Array::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 3.0]]).unwrap();
        let (m, c) = gaussian_fit(&a).unwrap();
        assert_eq!(m.as_slice(), &[3.0, 1.0]);
        assert!((c[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 3.0).abs() < 1e-12);
        assert!((c[(0, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn square_root_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sqrt_psd(&m, 1e-10).unwrap();
        assert!((&r * &r - &m).abs().max() < 1e-12);
    }

    #[test]
    fn singular_log_det_is_degenerate() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(log_det_spd(&m), Err(Error::DegenerateSample(_))));
    }
}
