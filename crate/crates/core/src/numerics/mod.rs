//! Shared numeric kernels.

mod gauss;
mod simplex;
pub mod special;
mod spline;

pub use gauss::{cholesky_with_jitter, gaussian_loglik, GaussianLogLik, JitteredCholesky};
pub(crate) use gauss::loglik_from_factor;
pub use simplex::{nelder_mead, SimplexConfig, SimplexResult};
pub use spline::smoothing_spline;

/// Logistic map onto `(lo, hi)`.
pub(crate) fn to_interval(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) / (1.0 + (-u).exp())
}

/// Inverse of [`to_interval`]; clamps values at or beyond the bounds.
pub(crate) fn from_interval(v: f64, lo: f64, hi: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
    (t / (1.0 - t)).ln()
}
