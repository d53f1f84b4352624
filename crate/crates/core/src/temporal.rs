//! Per-voxel AR(2) noise with a GLS-profiled mean.
//!
//! The stationary AR(2) covariance `K` has an exact banded Cholesky inverse:
//! the first two observations are scaled by their marginal and conditional
//! standard deviations and the remaining ones are the innovations
//! `(y_t - phi1 y_{t-1} - phi2 y_{t-2}) / sigma`. Every likelihood here is
//! computed through that whitening in `O(T p)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::dataset::FmriDataset;
use crate::error::{Error, Result};
use crate::numerics::{nelder_mead, SimplexConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar2Params {
    pub phi1: f64,
    pub phi2: f64,
    /// Innovation variance.
    pub sigma2: f64,
}

impl Ar2Params {
    pub fn new(phi1: f64, phi2: f64, sigma2: f64) -> Self {
        Self { phi1, phi2, sigma2 }
    }

    pub fn white(sigma2: f64) -> Self {
        Self::new(0.0, 0.0, sigma2)
    }

    pub fn is_stationary(&self) -> bool {
        self.phi1 + self.phi2 < 1.0
            && self.phi2 - self.phi1 < 1.0
            && self.phi2.abs() < 1.0
            && self.sigma2 > 0.0
            && self.phi1.is_finite()
    }

    fn check(&self) -> Result<()> {
        if self.is_stationary() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "AR(2) parameters ({}, {}, {}) are not stationary",
                self.phi1, self.phi2, self.sigma2
            )))
        }
    }

    /// Map from partial autocorrelations `(r1, r2)` in `(-1, 1)^2`.
    pub fn from_pacf(r1: f64, r2: f64, sigma2: f64) -> Self {
        Self::new(r1 * (1.0 - r2), r2, sigma2)
    }

    pub fn pacf(&self) -> (f64, f64) {
        let r2 = self.phi2;
        let r1 = self.phi1 / (1.0 - r2);
        (r1, r2)
    }
}

/// Per-voxel mean coefficients, AR(2) noise and maximised log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFit {
    pub beta: Vec<f64>,
    pub ar: Ar2Params,
    pub loglik: f64,
}

/// Autocovariances `gamma(0..=max_lag)` of a stationary AR(2) process.
pub fn ar2_autocovariance(ar: &Ar2Params, max_lag: usize) -> Result<Vec<f64>> {
    ar.check()?;
    let (p1, p2) = (ar.phi1, ar.phi2);
    let g0 = ar.sigma2 * (1.0 - p2) / ((1.0 + p2) * ((1.0 - p2).powi(2) - p1 * p1));
    let mut g = Vec::with_capacity(max_lag + 1);
    g.push(g0);
    if max_lag >= 1 {
        g.push(p1 * g0 / (1.0 - p2));
    }
    for k in 2..=max_lag {
        g.push(p1 * g[k - 1] + p2 * g[k - 2]);
    }
    Ok(g)
}

/// Whitening operator `P` with `P^T P = K^{-1}` for the stationary AR(2) covariance.
struct Whitener {
    ar: Ar2Params,
    s0: f64,
    s1: f64,
    rho1: f64,
}

impl Whitener {
    fn new(ar: &Ar2Params) -> Result<Self> {
        let g = ar2_autocovariance(ar, 1)?;
        let rho1 = g[1] / g[0];
        let cond = g[0] * (1.0 - rho1 * rho1);
        if !(cond > 0.0) {
            return Err(Error::Singular("AR(2) start-up covariance".into()));
        }
        Ok(Self {
            ar: *ar,
            s0: g[0].sqrt(),
            s1: cond.sqrt(),
            rho1,
        })
    }

    fn log_det(&self, n: usize) -> f64 {
        let mut ld = 2.0 * self.s0.ln();
        if n > 1 {
            ld += 2.0 * self.s1.ln();
        }
        if n > 2 {
            ld += (n - 2) as f64 * self.ar.sigma2.ln();
        }
        ld
    }

    fn apply(&self, y: &[f64], out: &mut [f64]) {
        let n = y.len();
        let sigma = self.ar.sigma2.sqrt();
        if n > 0 {
            out[0] = y[0] / self.s0;
        }
        if n > 1 {
            out[1] = (y[1] - self.rho1 * y[0]) / self.s1;
        }
        for t in 2..n {
            out[t] = (y[t] - self.ar.phi1 * y[t - 1] - self.ar.phi2 * y[t - 2]) / sigma;
        }
    }

    fn apply_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        let mut buf = vec![0.0; x.nrows()];
        for (j, col) in x.column_iter().enumerate() {
            let col: Vec<f64> = col.iter().copied().collect();
            self.apply(&col, &mut buf);
            out.column_mut(j).copy_from_slice(&buf);
        }
        out
    }
}

struct GlsFit {
    beta: DVector<f64>,
    whitened_rss: f64,
    log_det_k: f64,
}

fn gls(ar: &Ar2Params, y: &[f64], x: &DMatrix<f64>) -> Result<GlsFit> {
    if y.len() != x.nrows() {
        return Err(Error::SizeMismatch(format!(
            "series length {} vs design rows {}",
            y.len(),
            x.nrows()
        )));
    }
    let w = Whitener::new(ar)?;
    let xw = w.apply_matrix(x);
    let mut yw = vec![0.0; y.len()];
    w.apply(y, &mut yw);
    let yw = DVector::from_vec(yw);
    let gram = xw.transpose() * &xw;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("W = X^T K^-1 X".into()))?;
    let beta = chol.solve(&(xw.transpose() * &yw));
    let resid = &yw - &xw * &beta;
    Ok(GlsFit {
        beta,
        whitened_rss: resid.norm_squared(),
        log_det_k: w.log_det(y.len()),
    })
}

/// GLS estimate `W^{-1} X^T K^{-1} y`.
pub fn gls_beta(ar: &Ar2Params, y: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(gls(ar, y, x)?.beta.iter().copied().collect())
}

/// Exact Gaussian log-likelihood of `y` with the mean profiled out by GLS.
pub fn profile_loglik(ar: &Ar2Params, y: &[f64], x: &DMatrix<f64>) -> Result<f64> {
    let fit = gls(ar, y, x)?;
    let n = y.len() as f64;
    Ok(-0.5 * n * (2.0 * PI).ln() - 0.5 * fit.log_det_k - 0.5 * fit.whitened_rss)
}

fn ols_residuals(y: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let yv = DVector::from_column_slice(y);
    let gram = x.transpose() * x;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("X^T X".into()))?;
    let beta = chol.solve(&(x.transpose() * &yv));
    Ok((yv - x * beta).iter().copied().collect())
}

fn yule_walker_start(resid: &[f64]) -> Ar2Params {
    let n = resid.len() as f64;
    let acov = |k: usize| resid.iter().zip(&resid[k..]).map(|(a, b)| a * b).sum::<f64>() / n;
    let g0 = acov(0).max(1e-300);
    let r1 = (acov(1) / g0).clamp(-0.9, 0.9);
    let r2 = (acov(2) / g0).clamp(-0.9, 0.9);
    let phi2 = ((r2 - r1 * r1) / (1.0 - r1 * r1)).clamp(-0.9, 0.9);
    let phi1 = r1 * (1.0 - phi2);
    let sigma2 = (g0 * (1.0 - phi1 * r1 - phi2 * r2)).max(g0 * 1e-3).max(1e-12);
    Ar2Params::new(phi1, phi2, sigma2)
}

/// Map an unconstrained 3-vector onto the stationarity triangle and `sigma2 > 0`.
fn ar_from_unconstrained(u: &[f64]) -> Ar2Params {
    Ar2Params::from_pacf(u[0].tanh(), u[1].tanh(), u[2].exp())
}

fn unconstrained_from_ar(ar: &Ar2Params) -> [f64; 3] {
    let (r1, r2) = ar.pacf();
    let c = |r: f64| r.clamp(-0.95, 0.95).atanh();
    [c(r1), c(r2), ar.sigma2.ln()]
}

/// Maximum-likelihood AR(2) noise and GLS mean for a single voxel.
pub fn fit_voxel(y: &[f64], x: &DMatrix<f64>) -> Result<VoxelFit> {
    fit_voxel_with(y, x, &SimplexConfig::default())
}

pub fn fit_voxel_with(y: &[f64], x: &DMatrix<f64>, config: &SimplexConfig) -> Result<VoxelFit> {
    if let Some(t) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("scan {}", t + 1)));
    }
    let resid = ols_residuals(y, x)?;
    let start = unconstrained_from_ar(&yule_walker_start(&resid));
    let objective = |u: &[f64]| {
        let ar = ar_from_unconstrained(u);
        if !ar.is_stationary() {
            return f64::INFINITY;
        }
        match profile_loglik(&ar, y, x) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let result = nelder_mead(objective, &start, config)?;
    let ar = ar_from_unconstrained(&result.x_min);
    if !ar.is_stationary() {
        return Err(Error::Optimizer("AR(2) optimum left the stationarity region".into()));
    }
    let fit = gls(&ar, y, x)?;
    Ok(VoxelFit {
        beta: fit.beta.iter().copied().collect(),
        ar,
        loglik: -result.f_min,
    })
}

/// Detrended series whitened by the fitted AR(2) filter, `V x (T-2)`.
pub fn standardized_residuals(
    dataset: &FmriDataset,
    x: &DMatrix<f64>,
    fits: &[VoxelFit],
) -> Result<DMatrix<f64>> {
    let (v_count, t_len) = (dataset.n_voxels(), dataset.n_scans());
    if fits.len() != v_count {
        return Err(Error::SizeMismatch(format!(
            "{} voxel fits for {v_count} voxels",
            fits.len()
        )));
    }
    let mut e = DMatrix::zeros(v_count, t_len - 2);
    for (v, fit) in fits.iter().enumerate() {
        let y: Vec<f64> = dataset.series.row(v).iter().copied().collect();
        let row = whitened_residual_row(&y, x, fit)?;
        for (t, val) in row.into_iter().enumerate() {
            e[(v, t)] = val;
        }
    }
    Ok(e)
}

pub(crate) fn whitened_residual_row(y: &[f64], x: &DMatrix<f64>, fit: &VoxelFit) -> Result<Vec<f64>> {
    if fit.beta.len() != x.ncols() {
        return Err(Error::SizeMismatch("beta length vs design columns".into()));
    }
    let beta = DVector::from_column_slice(&fit.beta);
    let mean = x * beta;
    let detrended: Vec<f64> = y.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
    Ok(ar_filter(&detrended, &fit.ar))
}

/// `(z_t - phi1 z_{t-1} - phi2 z_{t-2}) / sigma` for `t = 3..=T`.
pub fn ar_filter(z: &[f64], ar: &Ar2Params) -> Vec<f64> {
    let sigma = ar.sigma2.sqrt();
    (2..z.len())
        .map(|t| (z[t] - ar.phi1 * z[t - 1] - ar.phi2 * z[t - 2]) / sigma)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BlockDesign;
    use crate::design::{canonical_hrf, design_matrix, HrfSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design(session_len: usize) -> DMatrix<f64> {
        let d = BlockDesign::alternating(2.0, session_len).unwrap();
        design_matrix(&d, &canonical_hrf(2.0, &HrfSpec::default())).unwrap()
    }

    pub(crate) fn simulate_ar2(ar: &Ar2Params, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sigma = ar.sigma2.sqrt();
        let burn = 200;
        let mut out = Vec::with_capacity(n + burn);
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n + burn {
            let e: f64 = StandardNormal.sample(rng);
            let v = ar.phi1 * a + ar.phi2 * b + sigma * e;
            b = a;
            a = v;
            out.push(v);
        }
        out.split_off(burn)
    }

    fn dense_k(ar: &Ar2Params, n: usize) -> DMatrix<f64> {
        let g = ar2_autocovariance(ar, n).unwrap();
        DMatrix::from_fn(n, n, |i, j| g[i.abs_diff(j)])
    }

    #[test]
    fn white_noise_autocovariance() {
        assert_eq!(ar2_autocovariance(&Ar2Params::white(2.5), 3).unwrap(), vec![2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ar1_autocovariance() {
        let g = ar2_autocovariance(&Ar2Params::new(0.5, 0.0, 1.0), 2).unwrap();
        assert!((g[0] - 4.0 / 3.0).abs() < 1e-14);
        assert!((g[1] / g[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn non_stationary_rejected() {
        assert!(ar2_autocovariance(&Ar2Params::new(0.6, 0.5, 1.0), 2).is_err());
        assert!(ar2_autocovariance(&Ar2Params::new(0.0, -1.0, 1.0), 2).is_err());
    }

    #[test]
    fn yule_walker_recursion_holds() {
        let ar = Ar2Params::new(0.5, 0.2, 1.3);
        let g = ar2_autocovariance(&ar, 10).unwrap();
        for k in 2..=10 {
            assert!((g[k] - 0.5 * g[k - 1] - 0.2 * g[k - 2]).abs() < 1e-14);
        }
        // gamma(0) = phi1 gamma(1) + phi2 gamma(2) + sigma2.
        assert!((g[0] - 0.5 * g[1] - 0.2 * g[2] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn whitener_matches_dense_inverse() {
        let ar = Ar2Params::new(0.4, 0.1, 2.0);
        let k = dense_k(&ar, 9);
        let w = Whitener::new(&ar).unwrap();
        let p = w.apply_matrix(&DMatrix::identity(9, 9));
        let ptp = p.transpose() * &p;
        let kinv = k.clone().try_inverse().unwrap();
        assert!((ptp - kinv).abs().max() < 1e-10);
        assert!((w.log_det(9) - k.determinant().ln()).abs() < 1e-10);
    }

    #[test]
    fn perfect_fit_gives_pure_normalising_constant() {
        let x = design(12);
        let beta = DVector::from_column_slice(&[3.0, 0.5, -0.2, 1.0, 2.0, 0.7]);
        let y: Vec<f64> = (&x * beta).iter().copied().collect();
        let ll = profile_loglik(&Ar2Params::white(1.0), &y, &x).unwrap();
        let t = y.len() as f64;
        assert!((ll + 0.5 * t * (2.0 * PI).ln()).abs() < 1e-8);
    }

    #[test]
    fn profile_loglik_matches_dense_oracle() {
        // T = 30 with a T x 6 design.
        let x = design(10);
        let ar = Ar2Params::new(0.4, 0.1, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y: Vec<f64> = simulate_ar2(&ar, 30, &mut rng)
            .iter()
            .enumerate()
            .map(|(t, e)| e + 10.0 + 0.1 * t as f64)
            .collect();
        let k = dense_k(&ar, 30);
        let kinv = k.clone().try_inverse().unwrap();
        let yv = DVector::from_column_slice(&y);
        let w = x.transpose() * &kinv * &x;
        let winv = w.try_inverse().unwrap();
        let proj = &kinv - &kinv * &x * winv * x.transpose() * &kinv;
        let quad = (yv.transpose() * proj * &yv)[(0, 0)];
        let want = -15.0 * (2.0 * PI).ln() - 0.5 * k.determinant().ln() - 0.5 * quad;
        let got = profile_loglik(&ar, &y, &x).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn white_noise_gls_is_ols() {
        let x = design(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..36).map(|_| StandardNormal.sample(&mut rng)).collect();
        let gls = gls_beta(&Ar2Params::white(3.0), &y, &x).unwrap();
        let ols = (x.transpose() * &x)
            .try_inverse()
            .unwrap()
            * x.transpose()
            * DVector::from_column_slice(&y);
        for i in 0..6 {
            assert!((gls[i] - ols[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn noise_free_recovery_under_correlated_noise() {
        let x = design(12);
        let truth = [1.0, -2.0, 0.5, 3.0, 4.0, -1.5];
        let y: Vec<f64> = (&x * DVector::from_column_slice(&truth)).iter().copied().collect();
        let b = gls_beta(&Ar2Params::new(0.7, -0.2, 0.4), &y, &x).unwrap();
        for i in 0..6 {
            assert!((b[i] - truth[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn white_variance_maximiser_is_ols_rss_over_t() {
        let x = design(12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..36).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let resid = ols_residuals(&y, &x).unwrap();
        let rss_over_t = resid.iter().map(|r| r * r).sum::<f64>() / 36.0;
        // Maximise over sigma2 on the white-noise line with a golden grid.
        let f = |s: f64| profile_loglik(&Ar2Params::white(s), &y, &x).unwrap();
        let (mut lo, mut hi) = (0.01, 20.0);
        for _ in 0..200 {
            let a = lo + (hi - lo) * 0.382;
            let b = lo + (hi - lo) * 0.618;
            if f(a) > f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        assert!(((lo + hi) / 2.0 - rss_over_t).abs() < 1e-6);
    }

    #[test]
    fn gls_unbiased_under_ar_noise() {
        let x = design(16);
        let ar = Ar2Params::new(0.5, 0.2, 1.0);
        let truth = [2.0, 0.3, -0.4, 1.0, 1.5, 0.5];
        let mean = &x * DVector::from_column_slice(&truth);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 500;
        let mut sum = [0.0; 6];
        let mut sumsq = [0.0; 6];
        for _ in 0..reps {
            let e = simulate_ar2(&ar, 48, &mut rng);
            let y: Vec<f64> = mean.iter().zip(&e).map(|(m, e)| m + e).collect();
            let b = gls_beta(&ar, &y, &x).unwrap();
            for i in 0..6 {
                sum[i] += b[i];
                sumsq[i] += b[i] * b[i];
            }
        }
        for i in 0..6 {
            let m = sum[i] / reps as f64;
            let sd = (sumsq[i] / reps as f64 - m * m).sqrt();
            let se = sd / (reps as f64).sqrt();
            assert!((m - truth[i]).abs() < 4.0 * se, "coef {i}: {m} vs {} (se {se})", truth[i]);
        }
    }

    #[test]
    fn fit_recovers_white_noise() {
        // Each estimate has sd near 1/sqrt(T), so 2/sqrt(T) covers about 95% of fits.
        let x = design(48);
        let bound = 2.0 / (144f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let reps = 40;
        let mut inside = 0;
        let mut mean_phi = [0.0; 2];
        for _ in 0..reps {
            let y: Vec<f64> = (0..144)
                .map(|_| 5.0 + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let fit = fit_voxel(&y, &x).unwrap();
            assert!(fit.ar.is_stationary());
            // The intercept trades off against X1 + X2, so check the fitted level.
            let level = (&x * DVector::from_column_slice(&fit.beta)).mean();
            assert!((level - 5.0).abs() < 0.5, "{level}");
            inside += (fit.ar.phi1.abs() < bound) as usize + (fit.ar.phi2.abs() < bound) as usize;
            mean_phi[0] += fit.ar.phi1 / reps as f64;
            mean_phi[1] += fit.ar.phi2 / reps as f64;
        }
        assert!(inside as f64 >= 0.85 * 2.0 * reps as f64, "{inside} of {}", 2 * reps);
        assert!(mean_phi[0].abs() < bound && mean_phi[1].abs() < bound, "{mean_phi:?}");
    }

    #[test]
    fn fit_is_consistent_for_long_series() {
        let d = BlockDesign::alternating(2.0, 334).unwrap();
        let x = design_matrix(&d, &canonical_hrf(2.0, &HrfSpec::default())).unwrap();
        let ar = Ar2Params::new(0.5, 0.2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = simulate_ar2(&ar, x.nrows(), &mut rng);
        let y: Vec<f64> = e.iter().map(|e| e + 100.0).collect();
        let fit = fit_voxel(&y, &x).unwrap();
        assert!((fit.ar.phi1 - 0.5).abs() < 0.05, "{:?}", fit.ar);
        assert!((fit.ar.phi2 - 0.2).abs() < 0.05, "{:?}", fit.ar);
        assert!((fit.ar.sigma2 - 1.0).abs() < 0.15, "{:?}", fit.ar);
        // Fitted loglik is at least the truth's.
        assert!(fit.loglik >= profile_loglik(&ar, &y, &x).unwrap() - 1e-6);
    }

    #[test]
    fn residuals_are_white_with_unit_variance() {
        let d = BlockDesign::alternating(2.0, 200).unwrap();
        let x = design_matrix(&d, &canonical_hrf(2.0, &HrfSpec::default())).unwrap();
        let t_len = x.nrows();
        let ar = Ar2Params::new(0.5, 0.2, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = simulate_ar2(&ar, t_len, &mut rng);
        let mean = &x * DVector::from_column_slice(&[10.0, 1.0, -1.0, 0.5, 2.0, 1.0]);
        let y: Vec<f64> = mean.iter().zip(&e).map(|(m, e)| m + e).collect();
        let fit = fit_voxel(&y, &x).unwrap();
        let r = whitened_residual_row(&y, &x, &fit).unwrap();
        assert_eq!(r.len(), t_len - 2);
        let m = r.len() as f64;
        let var = r.iter().map(|v| v * v).sum::<f64>() / m;
        let rho1 = r.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / m / var;
        assert!((var - 1.0).abs() < 3.0 / m.sqrt(), "{var}");
        assert!(rho1.abs() < 3.0 / m.sqrt(), "{rho1}");
    }

    #[test]
    fn zero_ar_residual_is_scaled_detrended_series() {
        let x = design(10);
        let y: Vec<f64> = (0..30).map(|t| (t as f64 * 0.7).sin()).collect();
        let fit = VoxelFit {
            beta: vec![0.0; 6],
            ar: Ar2Params::white(4.0),
            loglik: 0.0,
        };
        let r = whitened_residual_row(&y, &x, &fit).unwrap();
        for t in 2..30 {
            assert!((r[t - 2] - y[t] / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pacf_map_stays_in_triangle() {
        for &u1 in &[-30.0, -2.0, 0.0, 1.5, 40.0] {
            for &u2 in &[-30.0, -0.3, 0.0, 3.0, 40.0] {
                let ar = ar_from_unconstrained(&[u1, u2, 0.0]);
                if u1.abs() < 15.0 && u2.abs() < 15.0 {
                    assert!(ar.is_stationary(), "{u1} {u2} -> {ar:?}");
                }
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn profile_invariant_to_mean_shift(
            seed in 0u64..1000,
            c in proptest::collection::vec(-5.0f64..5.0, 6),
            r1 in -0.9f64..0.9, r2 in -0.9f64..0.9,
        ) {
            let x = design(10);
            let ar = Ar2Params::from_pacf(r1, r2, 1.2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = simulate_ar2(&ar, 30, &mut rng);
            let shift = &x * DVector::from_column_slice(&c);
            let ys: Vec<f64> = y.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
            let a = profile_loglik(&ar, &y, &x).unwrap();
            let b = profile_loglik(&ar, &ys, &x).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-7);
        }

        #[test]
        fn gls_is_scale_equivariant(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let x = design(10);
            let ar = Ar2Params::new(0.3, 0.1, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = simulate_ar2(&ar, 30, &mut rng);
            let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
            let a = gls_beta(&ar, &y, &x).unwrap();
            let b = gls_beta(&ar, &ys, &x).unwrap();
            for i in 0..6 {
                proptest::prop_assert!((b[i] - scale * a[i]).abs() < 1e-8 * (1.0 + b[i].abs()));
            }
        }
    }
}
