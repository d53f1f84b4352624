//! Voxel-level task-versus-rest tests with a spatially varying task effect.
//!
//! Within each ROI the task coefficient is a Fourier series in the
//! normalised voxel coordinates and the rest coefficient is constant.
//! Both are re-estimated by GLS under the separable covariance built from
//! the per-voxel AR(2) filters and the shrunk within-ROI covariance.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::dataset::Coord;
use crate::design::DesignLayout;
use crate::error::{Error, Result};
use crate::numerics::cholesky_with_jitter;
use crate::temporal::{ar_filter, VoxelFit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationConfig {
    /// Harmonics per axis.
    pub harmonics: usize,
    /// FDR level.
    pub q: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self { harmonics: 1, q: 0.05 }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.harmonics == 0 || !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidArgument("harmonics must be >= 1 and q in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Identifies one basis column: axis (0 = x), harmonic, and sine or cosine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisTerm {
    pub axis: usize,
    pub harmonic: usize,
    pub sine: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub matrix: DMatrix<f64>,
    pub terms: Vec<BasisTerm>,
}

/// Separable Fourier basis on coordinates normalised as `(c - min) / (extent + 1)`.
/// Columns that vanish, are constant, or repeat an earlier column are dropped.
pub fn fourier_basis(coords: &[Coord], harmonics: usize) -> FourierBasis {
    let n = coords.len();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut terms = Vec::new();
    for axis in 0..3 {
        let lo = coords.iter().map(|c| c[axis]).min().unwrap_or(0);
        let hi = coords.iter().map(|c| c[axis]).max().unwrap_or(0);
        let span = (hi - lo + 1) as f64;
        for h in 1..=harmonics {
            for sine in [false, true] {
                let col: Vec<f64> = coords
                    .iter()
                    .map(|c| {
                        let arg = 2.0 * std::f64::consts::PI * h as f64 * (c[axis] - lo) as f64 / span;
                        if sine {
                            arg.sin()
                        } else {
                            arg.cos()
                        }
                    })
                    .collect();
                let constant = col.iter().all(|v| (v - col[0]).abs() < 1e-12);
                let repeat = cols
                    .iter()
                    .any(|c: &Vec<f64>| c.iter().zip(&col).all(|(a, b)| (a - b).abs() < 1e-12));
                if constant || repeat {
                    continue;
                }
                cols.push(col);
                terms.push(BasisTerm {
                    axis,
                    harmonic: h,
                    sine,
                });
            }
        }
    }
    let matrix = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    FourierBasis { matrix, terms }
}

/// GLS coefficients for one ROI: task Fourier coefficients followed by the rest coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiActivation {
    pub coef: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub basis: FourierBasis,
}

/// Inputs for one ROI. `series` is `n x T` for the ROI voxels in canonical
/// order, `spatial_cov` the `n x n` covariance of the whitened residuals.
pub struct RoiInputs<'a> {
    pub coords: &'a [Coord],
    pub series: &'a DMatrix<f64>,
    pub fits: &'a [VoxelFit],
    pub spatial_cov: &'a DMatrix<f64>,
}

pub fn fit_activation(
    inputs: &RoiInputs<'_>,
    design: &DMatrix<f64>,
    layout: DesignLayout,
    config: &ActivationConfig,
) -> Result<RoiActivation> {
    config.validate()?;
    let n = inputs.coords.len();
    let t_len = design.nrows();
    if inputs.series.shape() != (n, t_len) || inputs.fits.len() != n || inputs.spatial_cov.shape() != (n, n) {
        return Err(Error::SizeMismatch("activation inputs disagree on voxel or scan counts".into()));
    }
    if t_len < 3 {
        return Err(Error::InvalidArgument("need at least 3 scans".into()));
    }
    let basis = fourier_basis(inputs.coords, config.harmonics);
    let q = basis.matrix.ncols();
    let m = t_len - 2;
    let x1: Vec<f64> = design.column(layout.task_col()).iter().copied().collect();
    let x2: Vec<f64> = design.column(layout.rest_col()).iter().copied().collect();

    // Temporally whitened response and regressor traces, n x m each.
    let mut y = DMatrix::zeros(n, m);
    let mut f1 = DMatrix::zeros(n, m);
    let mut f2 = DMatrix::zeros(n, m);
    for v in 0..n {
        let fit = &inputs.fits[v];
        if fit.beta.len() != design.ncols() {
            return Err(Error::SizeMismatch(format!("voxel {v} has {} coefficients", fit.beta.len())));
        }
        let resid: Vec<f64> = (0..t_len)
            .map(|t| {
                let fixed: f64 = (0..layout.n_fixed()).map(|c| design[(t, c)] * fit.beta[c]).sum();
                inputs.series[(v, t)] - fixed
            })
            .collect();
        for (t, val) in ar_filter(&resid, &fit.ar).into_iter().enumerate() {
            y[(v, t)] = val;
        }
        for (t, val) in ar_filter(&x1, &fit.ar).into_iter().enumerate() {
            f1[(v, t)] = val;
        }
        for (t, val) in ar_filter(&x2, &fit.ar).into_iter().enumerate() {
            f2[(v, t)] = val;
        }
    }

    let chol = cholesky_with_jitter(inputs.spatial_cov)?;
    let l = chol.factor.l();
    let solve = |mtx: DMatrix<f64>| {
        l.solve_lower_triangular(&mtx)
            .ok_or_else(|| Error::Singular("spatial covariance factor".into()))
    };
    let yw = solve(y)?;
    let mut regs = Vec::with_capacity(q + 1);
    for k in 0..q {
        let col = DMatrix::from_fn(n, m, |v, t| basis.matrix[(v, k)] * f1[(v, t)]);
        regs.push(solve(col)?);
    }
    regs.push(solve(f2)?);

    let p = q + 1;
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for a in 0..p {
        rhs[a] = regs[a].dot(&yw);
        for b in a..p {
            let v = regs[a].dot(&regs[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let gchol = gram
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficient { rank: crate::design::numerical_rank(&gram), cols: p })?;
    let coef = gchol.solve(&rhs);
    let cov = gchol.inverse();
    Ok(RoiActivation {
        coef: coef.iter().copied().collect(),
        cov,
        basis,
    })
}

/// Per-voxel contrast of the task effect against the rest effect.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelTest {
    pub contrast: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn voxel_tests(fit: &RoiActivation) -> Result<Vec<VoxelTest>> {
    let b = &fit.basis.matrix;
    let q = b.ncols();
    let theta = DVector::from_column_slice(&fit.coef);
    (0..b.nrows())
        .map(|v| {
            let mut c = DVector::zeros(q + 1);
            for k in 0..q {
                c[k] = b[(v, k)];
            }
            c[q] = -1.0;
            let contrast = c.dot(&theta);
            let var = (c.transpose() * &fit.cov * &c)[(0, 0)];
            if !(var > 0.0) {
                return Err(Error::Singular(format!("contrast variance {var} at ROI voxel {v}")));
            }
            let se = var.sqrt();
            let z = contrast / se;
            Ok(VoxelTest {
                contrast,
                se,
                z,
                p: normal_p_value(z),
            })
        })
        .collect()
}

/// Benjamini–Hochberg step-up rejections at level `q`.
pub fn bh_fdr(pvalues: &[f64], q: f64) -> Vec<bool> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut cutoff = None;
    for (rank, &i) in order.iter().enumerate() {
        if pvalues[i] <= q * (rank + 1) as f64 / m as f64 {
            cutoff = Some(pvalues[i]);
        }
    }
    match cutoff {
        Some(c) => pvalues.iter().map(|&p| p <= c).collect(),
        None => vec![false; m],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BlockDesign;
    use crate::design::{canonical_hrf, design_matrix};
    use crate::temporal::Ar2Params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn brute_bh(p: &[f64], q: f64) -> Vec<bool> {
        let m = p.len();
        let mut sorted = p.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = (1..=m).filter(|&k| sorted[k - 1] <= q * k as f64 / m as f64).max();
        match k {
            Some(k) => p.iter().map(|&x| x <= sorted[k - 1]).collect(),
            None => vec![false; m],
        }
    }

    fn block(nx: i64, ny: i64, nz: i64) -> Vec<Coord> {
        let mut v = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    v.push([x, y, z]);
                }
            }
        }
        v
    }

    fn setup() -> (DMatrix<f64>, DesignLayout) {
        let d = BlockDesign::alternating(2.0, 16).unwrap();
        let h = canonical_hrf(2.0, &Default::default());
        (design_matrix(&d, &h).unwrap(), DesignLayout { n_sessions: 2 })
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_fdr(&[0.01, 0.02, 0.04, 0.5], 0.05), vec![true, true, false, false]);
        assert_eq!(bh_fdr(&[1.0; 5], 0.05), vec![false; 5]);
        assert_eq!(bh_fdr(&[0.0; 5], 0.05), vec![true; 5]);
    }

    #[test]
    fn p_values() {
        assert_eq!(normal_p_value(0.0), 1.0);
        assert!((normal_p_value(1.959_963_984_540_054) - 0.05).abs() < 1e-10);
    }

    #[test]
    fn basis_shape_and_origin() {
        let c = block(4, 3, 3);
        let b = fourier_basis(&c, 1);
        assert_eq!(b.matrix.ncols(), 6);
        for t in 0..6 {
            assert_eq!(b.matrix[(0, t)], if b.terms[t].sine { 0.0 } else { 1.0 });
        }
        // Voxels 0 and 12 differ only in z.
        for (k, t) in b.terms.iter().enumerate() {
            if t.axis < 2 {
                assert_eq!(b.matrix[(0, k)], b.matrix[(12, k)]);
            }
        }
        // A flat slab drops both z columns, a two-voxel axis only its sine.
        assert_eq!(fourier_basis(&block(4, 3, 1), 1).matrix.ncols(), 4);
        assert_eq!(fourier_basis(&block(4, 3, 2), 1).matrix.ncols(), 5);
    }

    #[test]
    fn white_identity_case_is_stacked_ols() {
        let (x, layout) = setup();
        let c = block(3, 2, 2);
        let n = c.len();
        let t_len = x.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series = DMatrix::from_fn(n, t_len, |_, _| rng.random_range(-1.0..1.0));
        let fits: Vec<VoxelFit> = (0..n)
            .map(|_| VoxelFit {
                beta: vec![0.1, 0.2, -0.1, 0.3, 0.0, 0.0],
                ar: Ar2Params::white(1.0),
                loglik: 0.0,
            })
            .collect();
        let cov = DMatrix::identity(n, n);
        let inputs = RoiInputs { coords: &c, series: &series, fits: &fits, spatial_cov: &cov };
        let fit = fit_activation(&inputs, &x, layout, &ActivationConfig::default()).unwrap();
        // Dense oracle on rows (v, t), t >= 3.
        let basis = fourier_basis(&c, 1).matrix;
        let q = basis.ncols();
        let rows = n * (t_len - 2);
        let mut z = DMatrix::zeros(rows, q + 1);
        let mut yv = DVector::zeros(rows);
        let mut r = 0;
        for v in 0..n {
            for t in 2..t_len {
                for k in 0..q {
                    z[(r, k)] = basis[(v, k)] * x[(t, layout.task_col())];
                }
                z[(r, q)] = x[(t, layout.rest_col())];
                let fixed: f64 = (0..4).map(|k| x[(t, k)] * fits[v].beta[k]).sum();
                yv[r] = series[(v, t)] - fixed;
                r += 1;
            }
        }
        let ols = (z.transpose() * &z).try_inverse().unwrap() * z.transpose() * yv;
        for k in 0..=q {
            assert!((fit.coef[k] - ols[k]).abs() < 1e-8, "{k}");
        }
    }

    #[test]
    fn zero_contrast_gives_unit_p() {
        let basis = FourierBasis {
            matrix: DMatrix::from_row_slice(1, 1, &[1.0]),
            terms: vec![BasisTerm { axis: 0, harmonic: 1, sine: false }],
        };
        let fit = RoiActivation { coef: vec![0.7, 0.7], cov: DMatrix::identity(2, 2), basis };
        let t = voxel_tests(&fit).unwrap()[0];
        assert_eq!(t.z, 0.0);
        assert_eq!(t.p, 1.0);
        assert!((t.se - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn null_contrast_variance_matches_reported_se() {
        // The task series has no constant term, so the null is zero effects.
        let (x, layout) = setup();
        let c = block(3, 3, 2);
        let n = c.len();
        let t_len = x.nrows();
        let ar = Ar2Params::new(0.4, 0.1, 1.0);
        let fits: Vec<VoxelFit> = (0..n)
            .map(|_| VoxelFit { beta: vec![0.0; 6], ar, loglik: 0.0 })
            .collect();
        let cov = DMatrix::identity(n, n);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 500;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut reported = 0.0;
        for _ in 0..reps {
            let mut series = DMatrix::zeros(n, t_len);
            for v in 0..n {
                let (mut a, mut b) = (0.0, 0.0);
                for t in 0..(t_len + 100) {
                    let e: f64 = rng.sample(StandardNormal);
                    let val = 0.4 * a + 0.1 * b + e;
                    b = a;
                    a = val;
                    if t >= 100 {
                        series[(v, t - 100)] = val;
                    }
                }
            }
            let inputs = RoiInputs { coords: &c, series: &series, fits: &fits, spatial_cov: &cov };
            let fit = fit_activation(&inputs, &x, layout, &ActivationConfig::default()).unwrap();
            let t = voxel_tests(&fit).unwrap()[4];
            sum += t.contrast;
            sumsq += t.contrast * t.contrast;
            reported += t.se * t.se / reps as f64;
        }
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64 - mean * mean;
        assert!((var / reported - 1.0).abs() < 0.15, "{var} vs {reported}");
        assert!(mean.abs() < 4.0 * (var / reps as f64).sqrt());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(128))]
        #[test]
        fn bh_matches_brute_force(p in proptest::collection::vec(0.0f64..1.0, 1..60), q in 0.01f64..0.3) {
            proptest::prop_assert_eq!(bh_fdr(&p, q), brute_bh(&p, q));
        }

        #[test]
        fn duplicating_a_rejection_keeps_the_set(p in proptest::collection::vec(0.0f64..0.2, 2..40)) {
            let base = bh_fdr(&p, 0.1);
            if let Some(i) = base.iter().position(|&r| r) {
                let mut more = p.clone();
                more.push(p[i]);
                let grown = bh_fdr(&more, 0.1);
                for k in 0..p.len() {
                    proptest::prop_assert!(!base[k] || grown[k]);
                }
            }
        }

        #[test]
        fn coordinate_shift_and_scale_invariance(dx in -20i64..20, dz in -5i64..5) {
            let c = block(4, 3, 2);
            let shifted: Vec<Coord> = c.iter().map(|v| [v[0] + dx, v[1] - dx, v[2] + dz]).collect();
            proptest::prop_assert_eq!(fourier_basis(&c, 2), fourier_basis(&shifted, 2));
        }
    }
}
