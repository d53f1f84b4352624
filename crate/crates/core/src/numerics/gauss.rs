use std::f64::consts::PI;

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added on the first factorisation retry.
pub const BASE_JITTER: f64 = 1e-8;
/// Number of jittered retries after the plain attempt.
pub const JITTER_RETRIES: usize = 3;

/// A Cholesky factor together with the diagonal jitter that was needed.
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        2.0 * self
            .factor
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// Cholesky factorisation retrying with `1e-8 * mean(diag) * 10^k`, `k = 0..3`.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if !cov.is_square() {
        return Err(Error::SizeMismatch(format!(
            "covariance is {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if let Some(factor) = Cholesky::new(cov.clone()) {
        return Ok(JitteredCholesky {
            factor,
            jitter: 0.0,
        });
    }
    let n = cov.nrows();
    let mean_diag = cov.diagonal().iter().sum::<f64>() / n.max(1) as f64;
    let mut jitter = 0.0;
    for k in 0..JITTER_RETRIES {
        jitter = BASE_JITTER * mean_diag.abs().max(f64::MIN_POSITIVE) * 10f64.powi(k as i32);
        let mut m = cov.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(m) {
            return Ok(JitteredCholesky { factor, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { jitter })
}

/// Log-likelihood value and the jitter used to factorise the covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLogLik {
    pub value: f64,
    pub jitter: f64,
}

/// Sum over the columns of `data` of the zero-mean `N(0, cov)` log density.
pub fn gaussian_loglik(cov: &DMatrix<f64>, data: &DMatrix<f64>) -> Result<GaussianLogLik> {
    let n = cov.nrows();
    if n == 0 || data.ncols() == 0 {
        return Err(Error::InvalidArgument("empty covariance or data".into()));
    }
    if data.nrows() != n {
        return Err(Error::SizeMismatch(format!(
            "data has {} rows, covariance is {n}x{n}",
            data.nrows()
        )));
    }
    let chol = cholesky_with_jitter(cov)?;
    let value = loglik_from_factor(&chol, data);
    Ok(GaussianLogLik {
        value,
        jitter: chol.jitter,
    })
}

pub(crate) fn loglik_from_factor(chol: &JitteredCholesky, data: &DMatrix<f64>) -> f64 {
    let n = data.nrows() as f64;
    let m = data.ncols() as f64;
    let whitened = chol
        .factor
        .l_dirty()
        .solve_lower_triangular(data)
        .expect("cholesky factor has a nonzero diagonal");
    let quad = whitened.iter().map(|v| v * v).sum::<f64>();
    -0.5 * m * (n * (2.0 * PI).ln() + chol.log_det()) - 0.5 * quad
}
