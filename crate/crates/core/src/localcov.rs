//! Within-ROI spatial covariance: anisotropic Matérn kernels, the
//! inverse-distance mixture over subregions, maximum-likelihood fitting and
//! kriging.

use std::collections::HashMap;
use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::Coord;
use crate::error::{Error, Result};
use crate::numerics::special::bessel_k_scaled;
use crate::numerics::{
    cholesky_with_jitter, from_interval, loglik_from_factor, nelder_mead, to_interval, SimplexConfig,
};

pub const NU_MIN: f64 = 0.05;
pub const NU_MAX: f64 = 5.0;
pub const LENGTH_MIN: f64 = 0.1;

/// Matérn smoothness, axis lengths (voxel units) and two rotation angles.
/// The Matérn scale is fixed at 1; the lengths carry all distance scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnisoParams {
    pub nu: f64,
    pub lengths: [f64; 3],
    /// Rotation about the z axis.
    pub xi1: f64,
    /// Rotation about the (rotated) y axis.
    pub xi2: f64,
}

impl AnisoParams {
    pub fn isotropic(nu: f64, length: f64) -> Self {
        Self {
            nu,
            lengths: [length; 3],
            xi1: 0.0,
            xi2: 0.0,
        }
    }

    /// Representative angles in `[0, pi)^2` describing the same distance.
    pub fn canonical(mut self) -> Self {
        let (mut a, mut b) = (self.xi1.rem_euclid(2.0 * PI), self.xi2);
        if a >= PI {
            a -= PI;
            b = -b;
        }
        b = b.rem_euclid(PI);
        // rem_euclid can round up to the period itself.
        if a >= PI {
            a = 0.0;
        }
        if b >= PI {
            b = 0.0;
        }
        self.xi1 = a;
        self.xi2 = b;
        self
    }

    fn check(&self) -> Result<()> {
        let ok = self.nu > 0.0
            && self.nu.is_finite()
            && self.lengths.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.xi1.is_finite()
            && self.xi2.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid covariance parameters {self:?}")))
        }
    }

    /// Rows of `D R2^T R1^T`.
    fn transform(&self) -> [[f64; 3]; 3] {
        let (s1, c1) = self.xi1.sin_cos();
        let (s2, c2) = self.xi2.sin_cos();
        let r1t = [[c1, s1, 0.0], [-s1, c1, 0.0], [0.0, 0.0, 1.0]];
        let r2t = [[c2, 0.0, -s2], [0.0, 1.0, 0.0], [s2, 0.0, c2]];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r2t[i][k] * r1t[k][j]).sum();
                m[i][j] = v / self.lengths[i];
            }
        }
        m
    }
}

fn apply(m: &[[f64; 3]; 3], d: [f64; 3]) -> f64 {
    m.iter()
        .map(|row| {
            let v = row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `|| D R2^T R1^T delta ||` with `D = diag(1 / lengths)`.
pub fn aniso_distance(delta: [f64; 3], params: &AnisoParams) -> f64 {
    apply(&params.transform(), delta)
}

/// Matérn correlation with unit scale, `2^(1-nu)/Gamma(nu) d^nu K_nu(d)`.
pub fn matern_corr(d: f64, nu: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let k = bessel_k_scaled(nu, d);
    let ln_c = (1.0 - nu) * LN_2 - ln_gamma(nu) + nu * d.ln() + k.ln();
    ln_c.exp().min(1.0)
}

/// Assignment of ROI voxels to subregions and the subregion centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SubregionPartition {
    /// Zero-based subregion index for each ROI voxel.
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
}

impl SubregionPartition {
    pub fn single(coords: &[Coord]) -> Self {
        Self::from_assignment(coords, vec![0; coords.len()])
    }

    /// Builds a partition, relabelling cells densely in order of first appearance.
    pub fn from_assignment(coords: &[Coord], assignment: Vec<usize>) -> Self {
        let mut relabel: HashMap<usize, usize> = HashMap::new();
        let assignment: Vec<usize> = assignment
            .into_iter()
            .map(|a| {
                let next = relabel.len();
                *relabel.entry(a).or_insert(next)
            })
            .collect();
        let l = relabel.len();
        let mut sums = vec![[0.0; 3]; l];
        let mut counts = vec![0usize; l];
        for (c, &a) in coords.iter().zip(&assignment) {
            for k in 0..3 {
                sums[a][k] += c[k] as f64;
            }
            counts[a] += 1;
        }
        let centroids = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
            .collect();
        Self {
            assignment,
            centroids,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_regions()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Normalised inverse-distance weights, one unit-norm row per voxel.
pub fn mixture_weights(voxels: &[[f64; 3]], centroids: &[[f64; 3]]) -> DMatrix<f64> {
    let l = centroids.len();
    let mut w = DMatrix::zeros(voxels.len(), l);
    if l == 1 {
        w.fill(1.0);
        return w;
    }
    for (i, v) in voxels.iter().enumerate() {
        let dist: Vec<f64> = centroids
            .iter()
            .map(|c| ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt())
            .collect();
        if let Some(hit) = dist.iter().position(|&d| d == 0.0) {
            w[(i, hit)] = 1.0;
            continue;
        }
        let norm = dist.iter().map(|d| d.powi(-2)).sum::<f64>().sqrt();
        for (k, d) in dist.iter().enumerate() {
            w[(i, k)] = 1.0 / (d * norm);
        }
    }
    w
}

/// Voxel geometry of one ROI with pairwise offsets grouped into classes
/// (offsets equal up to sign share one kernel evaluation).
#[derive(Debug, Clone)]
pub struct RoiGeometry {
    coords: Vec<Coord>,
    classes: Vec<[f64; 3]>,
    /// Class of pair `(i, j)`, `i < j`, stored row by row.
    pair_class: Vec<u32>,
    diameter: f64,
}

impl RoiGeometry {
    pub fn new(coords: &[Coord]) -> Self {
        let n = coords.len();
        let mut lookup: HashMap<[i64; 3], u32> = HashMap::new();
        let mut classes = Vec::new();
        let mut pair_class = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let mut d = [
                    coords[j][0] - coords[i][0],
                    coords[j][1] - coords[i][1],
                    coords[j][2] - coords[i][2],
                ];
                if d.iter().find(|&&v| v != 0).is_some_and(|&v| v < 0) {
                    d = [-d[0], -d[1], -d[2]];
                }
                let id = *lookup.entry(d).or_insert_with(|| {
                    classes.push([d[0] as f64, d[1] as f64, d[2] as f64]);
                    (classes.len() - 1) as u32
                });
                pair_class.push(id);
            }
        }
        let extent = |k: usize| {
            let lo = coords.iter().map(|c| c[k]).min().unwrap_or(0);
            let hi = coords.iter().map(|c| c[k]).max().unwrap_or(0);
            (hi - lo) as f64
        };
        let diameter = (extent(0).powi(2) + extent(1).powi(2) + extent(2).powi(2))
            .sqrt()
            .max(1.0);
        Self {
            coords: coords.to_vec(),
            classes,
            pair_class,
            diameter,
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    /// Bounding-box diagonal in voxel units, at least 1.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn n_offset_classes(&self) -> usize {
        self.classes.len()
    }

    fn class_correlations(&self, p: &AnisoParams) -> Vec<f64> {
        let m = p.transform();
        self.classes
            .iter()
            .map(|&d| matern_corr(apply(&m, d), p.nu))
            .collect()
    }

    /// Nonstationary correlation `sum_l (w_l w_l^T) o M_l`.
    pub fn correlation(&self, partition: &SubregionPartition, params: &[AnisoParams]) -> Result<DMatrix<f64>> {
        let n = self.n_voxels();
        if partition.assignment.len() != n {
            return Err(Error::SizeMismatch(format!(
                "partition covers {} voxels, ROI has {n}",
                partition.assignment.len()
            )));
        }
        if params.len() != partition.n_regions() {
            return Err(Error::SizeMismatch(format!(
                "{} parameter sets for {} subregions",
                params.len(),
                partition.n_regions()
            )));
        }
        for p in params {
            p.check()?;
        }
        let pts: Vec<[f64; 3]> = self
            .coords
            .iter()
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        let w = mixture_weights(&pts, &partition.centroids);
        let kernels: Vec<Vec<f64>> = params.iter().map(|p| self.class_correlations(p)).collect();
        let mut s = DMatrix::identity(n, n);
        let mut idx = 0;
        for i in 0..n {
            for j in i + 1..n {
                let c = self.pair_class[idx] as usize;
                idx += 1;
                let v: f64 = kernels
                    .iter()
                    .enumerate()
                    .map(|(l, k)| w[(i, l)] * w[(j, l)] * k[c])
                    .sum();
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(s)
    }
}

/// Nonstationary within-ROI correlation matrix (unit diagonal).
pub fn nonstat_cov(coords: &[Coord], partition: &SubregionPartition, params: &[AnisoParams]) -> Result<DMatrix<f64>> {
    RoiGeometry::new(coords).correlation(partition, params)
}

/// `omega^2 sigma1 + (1 - omega)^2 I`.
pub fn roi_error_cov(sigma1: &DMatrix<f64>, omega: f64) -> DMatrix<f64> {
    let mut c = sigma1 * (omega * omega);
    let nugget = (1.0 - omega).powi(2);
    for i in 0..c.nrows() {
        c[(i, i)] += nugget;
    }
    c
}

/// Which kernel parameters are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AngleMode {
    /// One smoothness and one length per subregion.
    Isotropic,
    /// Three lengths per subregion, rotations fixed at zero.
    Frozen,
    /// Three lengths and both rotations per subregion.
    Free,
}

impl AngleMode {
    pub fn params_per_region(self) -> usize {
        match self {
            AngleMode::Isotropic => 2,
            AngleMode::Frozen => 4,
            AngleMode::Free => 6,
        }
    }

    /// Free parameters including the mixing weight.
    pub fn n_params(self, n_regions: usize) -> usize {
        self.params_per_region() * n_regions + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            AngleMode::Isotropic => "iso",
            AngleMode::Frozen => "frozen",
            AngleMode::Free => "free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "iso" => Some(AngleMode::Isotropic),
            "frozen" => Some(AngleMode::Frozen),
            "free" => Some(AngleMode::Free),
            _ => None,
        }
    }
}

/// Fitted within-ROI covariance model.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCovModel {
    pub partition: SubregionPartition,
    pub params: Vec<AnisoParams>,
    pub omega: f64,
    pub mode: AngleMode,
    /// Correlation part `sigma1` (unit diagonal).
    pub sigma1: DMatrix<f64>,
    pub loglik: f64,
}

impl RoiCovModel {
    pub fn error_cov(&self) -> DMatrix<f64> {
        roi_error_cov(&self.sigma1, self.omega)
    }

    pub fn n_params(&self) -> usize {
        self.mode.n_params(self.partition.n_regions())
    }
}

/// Starting point and optimiser settings for [`fit_roi_cov`].
#[derive(Debug, Clone)]
pub struct RoiFitOptions {
    pub mode: AngleMode,
    pub simplex: SimplexConfig,
    /// Warm start (per-subregion parameters and mixing weight).
    pub init: Option<(Vec<AnisoParams>, f64)>,
}

impl RoiFitOptions {
    pub fn new(mode: AngleMode) -> Self {
        Self {
            mode,
            simplex: SimplexConfig::default(),
            init: None,
        }
    }
}

struct Packing {
    mode: AngleMode,
    n_regions: usize,
    ln_len_lo: f64,
    ln_len_hi: f64,
}

impl Packing {
    fn unpack(&self, u: &[f64]) -> (Vec<AnisoParams>, f64) {
        let k = self.mode.params_per_region();
        let params = (0..self.n_regions)
            .map(|l| {
                let v = &u[l * k..(l + 1) * k];
                let nu = to_interval(v[0], NU_MIN, NU_MAX);
                let len = |x: f64| to_interval(x, self.ln_len_lo, self.ln_len_hi).exp();
                match self.mode {
                    AngleMode::Isotropic => AnisoParams::isotropic(nu, len(v[1])),
                    AngleMode::Frozen => AnisoParams {
                        nu,
                        lengths: [len(v[1]), len(v[2]), len(v[3])],
                        xi1: 0.0,
                        xi2: 0.0,
                    },
                    AngleMode::Free => AnisoParams {
                        nu,
                        lengths: [len(v[1]), len(v[2]), len(v[3])],
                        xi1: v[4],
                        xi2: v[5],
                    },
                }
            })
            .collect();
        let omega = to_interval(u[self.n_regions * k], 0.0, 1.0);
        (params, omega)
    }

    fn pack(&self, params: &[AnisoParams], omega: f64) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.mode.n_params(self.n_regions));
        let len = |x: f64| from_interval(x.ln(), self.ln_len_lo, self.ln_len_hi);
        for p in params {
            u.push(from_interval(p.nu, NU_MIN, NU_MAX));
            match self.mode {
                AngleMode::Isotropic => {
                    let g = (p.lengths[0] * p.lengths[1] * p.lengths[2]).cbrt();
                    u.push(len(g));
                }
                AngleMode::Frozen => u.extend(p.lengths.iter().map(|&l| len(l))),
                AngleMode::Free => {
                    u.extend(p.lengths.iter().map(|&l| len(l)));
                    u.push(p.xi1);
                    u.push(p.xi2);
                }
            }
        }
        u.push(from_interval(omega, 0.0, 1.0));
        u
    }
}

/// Columns sorted by their bit patterns so that the fit does not depend on
/// the order of the time replicates.
fn canonical_columns(e: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<Vec<f64>> = e.column_iter().map(|c| c.iter().copied().collect()).collect();
    cols.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| cols[j][i])
}

/// Log-likelihood of the replicates `e` (`n x m`) under the given parameters.
pub fn roi_loglik(
    geometry: &RoiGeometry,
    e: &DMatrix<f64>,
    partition: &SubregionPartition,
    params: &[AnisoParams],
    omega: f64,
) -> Result<f64> {
    let sigma1 = geometry.correlation(partition, params)?;
    let chol = cholesky_with_jitter(&roi_error_cov(&sigma1, omega))?;
    Ok(loglik_from_factor(&chol, e))
}

/// Maximum-likelihood fit of the mixture covariance to residual replicates.
pub fn fit_roi_cov(
    geometry: &RoiGeometry,
    e: &DMatrix<f64>,
    partition: &SubregionPartition,
    options: &RoiFitOptions,
) -> Result<RoiCovModel> {
    let n = geometry.n_voxels();
    if e.nrows() != n {
        return Err(Error::SizeMismatch(format!(
            "residuals have {} rows for {n} voxels",
            e.nrows()
        )));
    }
    if n < 3 || e.ncols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 voxels and 2 replicates, got {n} x {}",
            e.ncols()
        )));
    }
    if partition.assignment.len() != n || partition.n_regions() == 0 {
        return Err(Error::InvalidArgument("partition does not cover the ROI".into()));
    }
    let e = canonical_columns(e);
    let n_regions = partition.n_regions();
    let packing = Packing {
        mode: options.mode,
        n_regions,
        ln_len_lo: LENGTH_MIN.ln(),
        ln_len_hi: (10.0 * geometry.diameter()).ln(),
    };
    let (init_params, init_omega) = match &options.init {
        Some((p, w)) if p.len() == n_regions => (p.clone(), *w),
        Some(_) => return Err(Error::SizeMismatch("warm start has wrong region count".into())),
        None => (vec![AnisoParams::isotropic(1.0, 2.0); n_regions], 0.7),
    };
    let x0 = packing.pack(&init_params, init_omega);
    let objective = |u: &[f64]| {
        let (params, omega) = packing.unpack(u);
        match roi_loglik(geometry, &e, partition, &params, omega) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        }
    };
    let result = nelder_mead(objective, &x0, &options.simplex)?;
    let (params, omega) = packing.unpack(&result.x_min);
    let params: Vec<AnisoParams> = params.into_iter().map(AnisoParams::canonical).collect();
    let sigma1 = geometry.correlation(partition, &params)?;
    Ok(RoiCovModel {
        partition: partition.clone(),
        params,
        omega,
        mode: options.mode,
        sigma1,
        loglik: -result.f_min,
    })
}

/// Conditional mean `S_to S_oo^{-1} z_o` of a zero-mean Gaussian vector.
/// `values` holds one column per replicate, rows matching `observed`.
pub fn krige(cov: &DMatrix<f64>, observed: &[usize], values: &DMatrix<f64>, targets: &[usize]) -> Result<DMatrix<f64>> {
    if observed.is_empty() {
        return Err(Error::InvalidArgument("no observed locations".into()));
    }
    if values.nrows() != observed.len() {
        return Err(Error::SizeMismatch(format!(
            "{} values for {} observed locations",
            values.nrows(),
            observed.len()
        )));
    }
    let n = cov.nrows();
    if let Some(&bad) = observed.iter().chain(targets).find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("index {bad} outside covariance of size {n}")));
    }
    let s_oo = DMatrix::from_fn(observed.len(), observed.len(), |i, j| cov[(observed[i], observed[j])]);
    let s_to = DMatrix::from_fn(targets.len(), observed.len(), |i, j| cov[(targets[i], observed[j])]);
    let chol = cholesky_with_jitter(&s_oo).map_err(|_| Error::Singular("observed covariance block".into()))?;
    let alpha = chol.factor.solve(values);
    Ok(s_to * alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

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

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    /// Draws `m` replicates from `N(0, cov)`.
    fn sample(cov: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let l = cholesky_with_jitter(cov).unwrap().factor.l();
        let z = DMatrix::from_fn(cov.nrows(), m, |_, _| rng.sample::<f64, _>(StandardNormal));
        l * z
    }

    #[test]
    fn axis_aligned_scaling() {
        let p = AnisoParams {
            nu: 1.0,
            lengths: [2.0, 1.0, 1.0],
            xi1: 0.0,
            xi2: 0.0,
        };
        assert!((aniso_distance([2.0, 0.0, 0.0], &p) - 1.0).abs() < 1e-15);
        assert_eq!(aniso_distance([0.0; 3], &p), 0.0);
    }

    #[test]
    fn unit_lengths_give_euclidean_distance() {
        let p = AnisoParams {
            nu: 1.0,
            lengths: [1.0; 3],
            xi1: 0.7,
            xi2: 2.1,
        };
        let d = [1.0, -2.0, 3.0];
        assert!((aniso_distance(d, &p) - 14f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rotation_turns_the_long_axis() {
        // Long axis rotated onto y by a quarter turn about z.
        let p = AnisoParams {
            nu: 1.0,
            lengths: [4.0, 1.0, 1.0],
            xi1: PI / 2.0,
            xi2: 0.0,
        };
        assert!((aniso_distance([0.0, 4.0, 0.0], &p) - 1.0).abs() < 1e-12);
        assert!((aniso_distance([1.0, 0.0, 0.0], &p) - 1.0).abs() < 1e-12);
        // And onto z by a quarter turn about y.
        let q = AnisoParams {
            xi1: 0.0,
            xi2: PI / 2.0,
            ..p
        };
        assert!((aniso_distance([0.0, 0.0, 4.0], &q) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_angles_preserve_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = AnisoParams {
                nu: 1.0,
                lengths: [rng.random_range(0.5..4.0), rng.random_range(0.5..4.0), rng.random_range(0.5..4.0)],
                xi1: rng.random_range(-10.0..10.0),
                xi2: rng.random_range(-10.0..10.0),
            };
            let c = p.canonical();
            assert!((0.0..PI).contains(&c.xi1) && (0.0..PI).contains(&c.xi2));
            let d = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            assert!((aniso_distance(d, &p) - aniso_distance(d, &c)).abs() < 1e-10);
        }
    }

    #[test]
    fn matern_special_cases() {
        assert_eq!(matern_corr(0.0, 0.7), 1.0);
        assert!((matern_corr(1.0, 0.5) - (-1f64).exp()).abs() < 1e-10);
        for &d in &[0.1, 0.5, 1.0, 2.0, 3.5, 8.0] {
            assert!((matern_corr(d, 0.5) - (-d).exp()).abs() < 1e-10);
            assert!((matern_corr(d, 1.5) - (1.0 + d) * (-d).exp()).abs() < 1e-10);
            let want = (1.0 + d + d * d / 3.0) * (-d).exp();
            assert!((matern_corr(d, 2.5) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn matern_decreasing_in_distance() {
        for &nu in &[0.5, 1.0, 1.5, 2.5] {
            let vals: Vec<f64> = (1..=100).map(|k| matern_corr(k as f64 * 0.1, nu)).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "nu = {nu}");
        }
    }

    #[test]
    fn mixture_weight_rules() {
        let w = mixture_weights(&[[1.0, 2.0, 3.0]], &[[0.0; 3]]);
        assert_eq!(w[(0, 0)], 1.0);
        let w = mixture_weights(&[[0.0; 3]], &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((w[(0, 0)] - r).abs() < 1e-15 && (w[(0, 1)] - r).abs() < 1e-15);
        let cents = [[0.0; 3], [5.0, 5.0, 5.0], [9.0, 0.0, 0.0]];
        let w = mixture_weights(&[[5.0, 5.0, 5.0]], &cents);
        assert_eq!(w.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_region_is_plain_matern() {
        let coords = block(3, 3, 2);
        let p = AnisoParams {
            nu: 1.5,
            lengths: [2.0, 1.0, 0.5],
            xi1: 0.3,
            xi2: 0.2,
        };
        let s = nonstat_cov(&coords, &SubregionPartition::single(&coords), &[p]).unwrap();
        for i in 0..coords.len() {
            for j in 0..coords.len() {
                let d = [
                    (coords[j][0] - coords[i][0]) as f64,
                    (coords[j][1] - coords[i][1]) as f64,
                    (coords[j][2] - coords[i][2]) as f64,
                ];
                let want = matern_corr(aniso_distance(d, &p), 1.5);
                assert!((s[(i, j)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn far_voxels_decorrelate() {
        let coords = vec![[0, 0, 0], [40, 0, 0], [0, 40, 0]];
        let s = nonstat_cov(&coords, &SubregionPartition::single(&coords), &[AnisoParams::isotropic(1.0, 0.5)]).unwrap();
        assert!(s[(0, 1)] < 1e-6 && s[(0, 2)] < 1e-6);
    }

    #[test]
    fn mixture_is_psd_with_unit_diagonal() {
        let coords = block(8, 4, 3);
        let assign: Vec<usize> = coords.iter().map(|c| (c[0] >= 4) as usize).collect();
        let part = SubregionPartition::from_assignment(&coords, assign);
        let params = [
            AnisoParams {
                nu: 0.8,
                lengths: [3.0, 1.0, 0.7],
                xi1: 0.4,
                xi2: 1.1,
            },
            AnisoParams::isotropic(2.0, 1.5),
        ];
        let s = nonstat_cov(&coords, &part, &params).unwrap();
        for i in 0..coords.len() {
            assert!((s[(i, i)] - 1.0).abs() < 1e-12);
        }
        assert!(min_eig(&s) >= -1e-10);
        for &w in &[0.0, 0.3, 1.0] {
            assert!(min_eig(&roi_error_cov(&s, w)) >= -1e-10);
        }
    }

    #[test]
    fn translation_invariance() {
        let coords = block(4, 3, 2);
        let shifted: Vec<Coord> = coords.iter().map(|c| [c[0] + 7, c[1] - 3, c[2] + 11]).collect();
        let a1: Vec<usize> = coords.iter().map(|c| (c[1] > 0) as usize).collect();
        let p = [AnisoParams::isotropic(1.0, 1.0), AnisoParams::isotropic(0.6, 2.0)];
        let s1 = nonstat_cov(&coords, &SubregionPartition::from_assignment(&coords, a1.clone()), &p).unwrap();
        let s2 = nonstat_cov(&shifted, &SubregionPartition::from_assignment(&shifted, a1), &p).unwrap();
        assert!((s1 - s2).abs().max() < 1e-12);
    }

    #[test]
    fn error_cov_endpoints() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        assert_eq!(roi_error_cov(&s, 1.0), s);
        assert_eq!(roi_error_cov(&s, 0.0), DMatrix::identity(2, 2));
        assert_eq!(roi_error_cov(&DMatrix::identity(3, 3), 0.5), DMatrix::identity(3, 3) * 0.5);
    }

    #[test]
    fn kriging_basics() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        let vals = DMatrix::from_column_slice(2, 1, &[1.2, -0.4]);
        // Interpolation at an observed point.
        let p = krige(&cov, &[0, 2], &vals, &[2, 0]).unwrap();
        assert!((p[(0, 0)] + 0.4).abs() < 1e-12 && (p[(1, 0)] - 1.2).abs() < 1e-12);
        // Middle of the chain, solved by hand: [0.5 0.5] [[1 .25][.25 1]]^-1 z.
        let det = 1.0 - 0.0625;
        let a = (0.5 * 1.0 - 0.5 * 0.25) / det;
        let b = (-0.5 * 0.25 + 0.5 * 1.0) / det;
        let mid = krige(&cov, &[0, 2], &vals, &[1]).unwrap()[(0, 0)];
        assert!((mid - (a * 1.2 + b * -0.4)).abs() < 1e-10);
        let iid = krige(&DMatrix::identity(3, 3), &[0, 1], &vals, &[2]).unwrap();
        assert_eq!(iid[(0, 0)], 0.0);
    }

    #[test]
    fn time_permutation_gives_identical_fit() {
        let coords = block(4, 3, 1);
        let geom = RoiGeometry::new(&coords);
        let part = SubregionPartition::single(&coords);
        let truth = roi_error_cov(&geom.correlation(&part, &[AnisoParams::isotropic(1.0, 1.5)]).unwrap(), 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = sample(&truth, 20, &mut rng);
        let perm = DMatrix::from_fn(12, 20, |i, j| e[(i, (j * 7) % 20)]);
        let mut opts = RoiFitOptions::new(AngleMode::Isotropic);
        opts.simplex.max_iter = 300;
        let a = fit_roi_cov(&geom, &e, &part, &opts).unwrap();
        let b = fit_roi_cov(&geom, &perm, &part, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn iid_residuals_give_negligible_spatial_part() {
        let coords = block(5, 5, 2);
        let geom = RoiGeometry::new(&coords);
        let part = SubregionPartition::single(&coords);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = DMatrix::from_fn(50, 100, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = fit_roi_cov(&geom, &e, &part, &RoiFitOptions::new(AngleMode::Isotropic)).unwrap();
        assert!(fit.omega < 0.2 || fit.params[0].lengths[0] < 0.3, "{fit:?}");
    }

    #[test]
    fn recovers_elongated_kernel() {
        // 10 x 5 x 4 = 200 voxels, 142 replicates.
        let coords = block(10, 5, 4);
        let geom = RoiGeometry::new(&coords);
        let part = SubregionPartition::single(&coords);
        let truth = AnisoParams {
            nu: 1.0,
            lengths: [3.0, 1.0, 1.0],
            xi1: 0.0,
            xi2: 0.0,
        };
        let cov = roi_error_cov(&geom.correlation(&part, &[truth]).unwrap(), 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = sample(&cov, 142, &mut rng);
        let fit = fit_roi_cov(&geom, &e, &part, &RoiFitOptions::new(AngleMode::Frozen)).unwrap();
        let p = fit.params[0];
        let ratio = p.lengths[0] / p.lengths[1];
        assert!((ratio / 3.0 - 1.0).abs() < 0.25, "{p:?}");
        assert!((fit.omega - 0.8).abs() < 0.1, "{}", fit.omega);
        let at_truth = roi_loglik(&geom, &e, &part, &[truth], 0.8).unwrap();
        assert!(fit.loglik >= at_truth - 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn distance_symmetric_and_isotropic_special_case(
            d in proptest::array::uniform3(-5.0f64..5.0),
            l in proptest::array::uniform3(0.2f64..5.0),
            xi1 in -4.0f64..4.0, xi2 in -4.0f64..4.0, iso in 0.2f64..5.0,
        ) {
            let p = AnisoParams { nu: 1.0, lengths: l, xi1, xi2 };
            let neg = [-d[0], -d[1], -d[2]];
            proptest::prop_assert!((aniso_distance(d, &p) - aniso_distance(neg, &p)).abs() < 1e-12);
            let a = AnisoParams { nu: 1.0, lengths: [iso; 3], xi1, xi2 };
            let b = AnisoParams::isotropic(1.0, iso);
            proptest::prop_assert!((aniso_distance(d, &a) - aniso_distance(d, &b)).abs() < 1e-12);
        }

        #[test]
        fn weight_rows_have_unit_norm(
            v in proptest::array::uniform3(-10.0f64..10.0),
            c in proptest::collection::vec(proptest::array::uniform3(-10.0f64..10.0), 1..5),
        ) {
            let w = mixture_weights(&[v], &c);
            let norm: f64 = w.row(0).iter().map(|x| x * x).sum();
            proptest::prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
