//! Inter-region dependence: ROI-mean residuals, l1-penalised precision
//! estimation, cross-validated penalty and the resulting edge list.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Parcellation;
use crate::error::{Error, Result};
use crate::numerics::cholesky_with_jitter;

/// ROI-mean residuals, `R x m`.
pub fn roi_means(e: &DMatrix<f64>, parcellation: &Parcellation) -> Result<DMatrix<f64>> {
    if e.nrows() != parcellation.n_voxels() {
        return Err(Error::SizeMismatch(format!(
            "{} residual rows for {} voxels",
            e.nrows(),
            parcellation.n_voxels()
        )));
    }
    let r = parcellation.n_rois();
    let mut out = DMatrix::zeros(r, e.ncols());
    for roi in 1..=r {
        let members = parcellation.roi_members(roi);
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("ROI {roi} is empty")));
        }
        for t in 0..e.ncols() {
            let s: f64 = members.iter().map(|&v| e[(v, t)]).sum();
            out[(roi - 1, t)] = s / members.len() as f64;
        }
    }
    Ok(out)
}

/// `(1/m) sum_t x(t) x(t)^T` over the `m` columns.
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let m = x.ncols().max(1) as f64;
    let mut s = x * x.transpose() / m;
    // Exact symmetry regardless of summation order.
    for i in 0..s.nrows() {
        for j in i + 1..s.ncols() {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

/// Rescales a covariance to unit diagonal; zero-variance rows stay zero.
pub fn to_correlation(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = a.diagonal().iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlassoConfig {
    pub max_sweeps: usize,
    /// Mean absolute change of the covariance iterate that ends the sweeps.
    pub tol: f64,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoResult {
    /// Estimated precision matrix.
    pub precision: DMatrix<f64>,
    pub lambda: f64,
    pub nnz_offdiag: usize,
    /// `log det W - tr(W A) - lambda sum_{r != s} |W_rs|`.
    pub objective: f64,
    pub sweeps: usize,
    /// Diagonal jitter added to `A` before fitting.
    pub jitter: f64,
}

fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Penalised log-likelihood objective (to be maximised).
pub fn glasso_objective(a: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let chol = cholesky_with_jitter(w)?;
    if chol.jitter > 0.0 {
        return Err(Error::NotPositiveDefinite { jitter: chol.jitter });
    }
    let tr = (w * a).trace();
    let mut l1 = 0.0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            if i != j {
                l1 += w[(i, j)].abs();
            }
        }
    }
    Ok(chol.log_det() - tr - lambda * l1)
}

/// Largest violation of the optimality conditions of the penalised problem.
pub fn kkt_residual(a: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let inv = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("precision matrix".into()))?;
    let g = inv - a;
    let mut worst: f64 = 0.0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let v = if i == j {
                g[(i, j)].abs()
            } else if w[(i, j)] == 0.0 {
                (g[(i, j)].abs() - lambda).max(0.0)
            } else {
                (g[(i, j)] - lambda * w[(i, j)].signum()).abs()
            };
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

/// Block coordinate descent for the l1-penalised precision with an unpenalised diagonal.
pub fn glasso(a: &DMatrix<f64>, lambda: f64) -> Result<GlassoResult> {
    glasso_with(a, lambda, &GlassoConfig::default())
}

pub fn glasso_with(a: &DMatrix<f64>, lambda: f64, config: &GlassoConfig) -> Result<GlassoResult> {
    let p = a.nrows();
    if p == 0 || !a.is_square() {
        return Err(Error::InvalidArgument("glasso needs a nonempty square matrix".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda = {lambda}")));
    }
    let jitter = cholesky_with_jitter(a)?.jitter;
    let mut a = a.clone();
    for i in 0..p {
        a[(i, i)] += jitter;
    }
    if p == 1 {
        let precision = DMatrix::from_element(1, 1, 1.0 / a[(0, 0)]);
        let objective = glasso_objective(&a, &precision, lambda)?;
        return Ok(GlassoResult {
            precision,
            lambda,
            nnz_offdiag: 0,
            objective,
            sweeps: 0,
            jitter,
        });
    }

    let mut w = a.clone();
    let mut betas = vec![vec![0.0; p - 1]; p];
    let offdiag_scale = {
        let mut s = 0.0;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    s += a[(i, j)].abs();
                }
            }
        }
        (s / (p * (p - 1)) as f64).max(1e-300)
    };
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut change = 0.0;
        for j in 0..p {
            let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let beta = &mut betas[j];
            // Lasso: min 1/2 b' W11 b - b' s12 + lambda |b|_1.
            for _ in 0..10_000 {
                let mut delta: f64 = 0.0;
                for (ki, &k) in others.iter().enumerate() {
                    let mut r = a[(k, j)];
                    for (li, &l) in others.iter().enumerate() {
                        if li != ki {
                            r -= w[(k, l)] * beta[li];
                        }
                    }
                    let nb = soft(r, lambda) / w[(k, k)];
                    delta = delta.max((nb - beta[ki]).abs());
                    beta[ki] = nb;
                }
                if delta < 1e-14 {
                    break;
                }
            }
            for &k in &others {
                let v: f64 = others.iter().enumerate().map(|(li, &l)| w[(k, l)] * beta[li]).sum();
                change += (v - w[(k, j)]).abs();
                w[(k, j)] = v;
                w[(j, k)] = v;
            }
        }
        if change / ((p * (p - 1)) as f64) < config.tol * offdiag_scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!("glasso after {sweeps} sweeps")));
    }

    let mut theta = DMatrix::zeros(p, p);
    for j in 0..p {
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let beta = &betas[j];
        let w12b: f64 = others.iter().enumerate().map(|(ki, &k)| w[(k, j)] * beta[ki]).sum();
        let t22 = 1.0 / (w[(j, j)] - w12b);
        theta[(j, j)] = t22;
        for (ki, &k) in others.iter().enumerate() {
            theta[(k, j)] = -beta[ki] * t22;
        }
    }
    for i in 0..p {
        for j in i + 1..p {
            let (x, y) = (theta[(i, j)], theta[(j, i)]);
            let v = if x == 0.0 || y == 0.0 { 0.0 } else { 0.5 * (x + y) };
            theta[(i, j)] = v;
            theta[(j, i)] = v;
        }
    }
    let nnz_offdiag = (0..p)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .filter(|&(i, j)| i < j && theta[(i, j)] != 0.0)
        .count();
    let objective = glasso_objective(&a, &theta, lambda)?;
    Ok(GlassoResult {
        precision: theta,
        lambda,
        nnz_offdiag,
        objective,
        sweeps,
        jitter,
    })
}

/// Geometric grid from the largest off-diagonal magnitude down by `ratio`, decreasing.
pub fn default_lambda_grid(a: &DMatrix<f64>, n: usize, ratio: f64) -> Vec<f64> {
    let mut top: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j {
                top = top.max(a[(i, j)].abs());
            }
        }
    }
    let top = top.max(1e-12);
    if n <= 1 {
        return vec![top];
    }
    (0..n)
        .map(|k| top * ratio.powf(k as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub lambda_grid: Vec<f64>,
    pub train_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambda: f64,
    /// `(lambda, sse)` in grid order; failed fits carry `+inf`.
    pub sse_curve: Vec<(f64, f64)>,
    pub test_columns: Vec<usize>,
}

/// Seeded random train/test split of the time columns.
pub fn split_columns(m: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_test = (((1.0 - train_fraction) * m as f64).round() as usize).clamp(1, m.saturating_sub(2).max(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Squared error of predicting each ROI from the others via the conditional mean.
pub fn prediction_sse(precision: &DMatrix<f64>, x: &DMatrix<f64>, columns: &[usize]) -> f64 {
    let r = precision.nrows();
    let mut sse = 0.0;
    for &t in columns {
        for i in 0..r {
            let mut pred = 0.0;
            for s in 0..r {
                if s != i {
                    pred -= precision[(i, s)] * x[(s, t)];
                }
            }
            pred /= precision[(i, i)];
            sse += (x[(i, t)] - pred).powi(2);
        }
    }
    sse
}

/// Cross-validated penalty; ties within `1e-12` favour the larger penalty.
pub fn cv_lambda(x: &DMatrix<f64>, config: &CvConfig) -> Result<CvResult> {
    if config.lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
    }
    if x.ncols() < 3 {
        return Err(Error::InvalidArgument("need at least 3 time columns".into()));
    }
    let (train, test) = split_columns(x.ncols(), config.train_fraction, config.seed);
    let xt = x.select_columns(&train);
    let a = sample_cov(&xt);
    let sse: Vec<f64> = config
        .lambda_grid
        .par_iter()
        .map(|&l| match glasso(&a, l) {
            Ok(fit) => prediction_sse(&fit.precision, x, &test),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let best = sse.iter().copied().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Optimizer("every lambda on the grid failed".into()));
    }
    let lambda = config
        .lambda_grid
        .iter()
        .zip(&sse)
        .filter(|(_, s)| **s <= best + 1e-12)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CvResult {
        lambda,
        sse_curve: config.lambda_grid.iter().copied().zip(sse).collect(),
        test_columns: test,
    })
}

/// Off-diagonal entries above `threshold` in magnitude, as 1-based ROI
/// label pairs `(r, s)` with `r < s`, strongest first.
pub fn edges(w: &DMatrix<f64>, threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..w.nrows() {
        for j in i + 1..w.ncols() {
            let v = w[(i, j)];
            if v.abs() > threshold {
                out.push((i + 1, j + 1, v));
            }
        }
    }
    out.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
    out
}

/// Support of the precision along a penalty path.
pub fn support_path(a: &DMatrix<f64>, grid: &[f64]) -> Vec<(f64, Vec<(usize, usize, f64)>)> {
    grid.par_iter()
        .map(|&l| (l, glasso(a, l).map(|f| edges(&f.precision, 0.0)).unwrap_or_default()))
        .collect()
}
