//! Phantom datasets drawn from the full model, and the Monte-Carlo studies
//! comparing the independence, isotropic, anisotropic and locally
//! anisotropic covariance estimators.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::normal_p_value;
use crate::dataset::{BlockDesign, Coord, FmriDataset, Parcellation, Voxel};
use crate::design::{canonical_hrf, design_matrix, DesignLayout, HrfSpec};
use crate::error::{Error, Result};
use crate::localcov::{
    fit_roi_cov, krige, roi_error_cov, AngleMode, AnisoParams, RoiFitOptions, RoiGeometry, SubregionPartition,
};
use crate::numerics::{cholesky_with_jitter, SimplexConfig};
use crate::rng::{stream, sub_seed};
use crate::select::{bic_search, SearchOptions, MIN_CELL};
use crate::temporal::Ar2Params;

pub const BURN_IN: usize = 200;

/// Within-ROI kernel used to build the true `Sigma_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelTruth {
    Independent,
    Stationary { params: AnisoParams },
    /// Two subregions split at the midpoint of `axis` inside every ROI.
    TwoRegime { axis: usize, params: [AnisoParams; 2] },
}

/// How the `(1 - omega)` part of the innovation is generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionalTerm {
    /// Independent unit-variance noise per voxel.
    Nugget,
    /// One ROI-wide signal per scan, correlated across ROIs as `rho^|r-s|`.
    Common { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    /// ROI blocks per axis; ROIs are the axis-aligned blocks of the grid.
    pub roi_blocks: [usize; 3],
    pub session_len: usize,
    pub tr_seconds: f64,
    pub intercept: f64,
    /// Voxel-to-voxel spread of the intercept.
    pub intercept_sd: f64,
    pub task: f64,
    pub rest: f64,
    /// 1-based ROI labels whose task coefficient varies as
    /// `active_boost * cos(2 pi u)`, `u` the normalised x coordinate in the ROI.
    pub active_rois: Vec<usize>,
    pub active_boost: f64,
    pub ar: Ar2Params,
    pub kernel: KernelTruth,
    pub omega: f64,
    pub regional: RegionalTerm,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [16, 16, 8],
            roi_blocks: [2, 2, 1],
            session_len: 48,
            tr_seconds: 2.0,
            intercept: 100.0,
            intercept_sd: 1.0,
            task: 0.0,
            rest: 0.0,
            active_rois: vec![1],
            active_boost: 1.0,
            ar: Ar2Params::new(0.4, 0.2, 1.0),
            kernel: KernelTruth::TwoRegime {
                axis: 0,
                params: [
                    AnisoParams {
                        nu: 1.0,
                        lengths: [3.0, 1.0, 1.0],
                        xi1: 0.0,
                        xi2: 0.0,
                    },
                    AnisoParams {
                        nu: 1.0,
                        lengths: [1.0, 3.0, 1.0],
                        xi1: 0.0,
                        xi2: 0.0,
                    },
                ],
            },
            omega: 0.8,
            regional: RegionalTerm::Common { rho: 0.5 },
        }
    }
}

impl PhantomSpec {
    /// 8^3 grid split into two ROIs, 48 scans.
    pub fn smoke() -> Self {
        Self {
            grid: [8, 8, 8],
            roi_blocks: [2, 1, 1],
            session_len: 16,
            ..Self::default()
        }
    }

    pub fn n_rois(&self) -> usize {
        self.roi_blocks.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.grid[k] == 0 || self.roi_blocks[k] == 0 || self.roi_blocks[k] > self.grid[k] {
                return Err(Error::InvalidArgument(format!(
                    "grid {:?} cannot be split into {:?} blocks",
                    self.grid, self.roi_blocks
                )));
            }
        }
        let smallest: usize = (0..3).map(|k| self.grid[k] / self.roi_blocks[k]).product();
        if smallest < MIN_CELL {
            return Err(Error::InvalidArgument(format!(
                "smallest ROI has {smallest} voxels, need at least {MIN_CELL}"
            )));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument("omega must lie in [0, 1]".into()));
        }
        if !self.ar.is_stationary() || !(self.ar.sigma2 > 0.0) {
            return Err(Error::InvalidArgument("AR(2) truth must be stationary with positive variance".into()));
        }
        if let RegionalTerm::Common { rho } = self.regional {
            if !(rho.abs() < 1.0) {
                return Err(Error::InvalidArgument("regional rho must lie in (-1, 1)".into()));
            }
        }
        if let Some(&r) = self.active_rois.iter().find(|&&r| r == 0 || r > self.n_rois()) {
            return Err(Error::InvalidArgument(format!("active ROI {r} does not exist")));
        }
        Ok(())
    }

    /// Voxels in `(z, y, x)` raster order with block ROI labels.
    pub fn parcellation(&self) -> Result<Parcellation> {
        let [nx, ny, nz] = self.grid;
        let [bx, by, _] = self.roi_blocks;
        let mut voxels = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let b = [x, y, z]
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| c * self.roi_blocks[k] / self.grid[k])
                        .collect::<Vec<_>>();
                    voxels.push(Voxel {
                        id: voxels.len() + 1,
                        coord: [x as i64, y as i64, z as i64],
                        roi: 1 + b[0] + bx * (b[1] + by * b[2]),
                    });
                }
            }
        }
        Parcellation::new(voxels)
    }
}

/// Everything used to generate a phantom.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    /// `V x (J+4)` mean coefficients.
    pub beta: DMatrix<f64>,
    pub partitions: Vec<SubregionPartition>,
    pub params: Vec<Vec<AnisoParams>>,
    pub sigma1: Vec<DMatrix<f64>>,
    /// Covariance of the spatial innovation within each ROI.
    pub error_cov: Vec<DMatrix<f64>>,
    /// Covariance of the ROI-wide signals (identity under the nugget form).
    pub regional_cov: DMatrix<f64>,
}

/// Factor `F` with `F F^T = m`, from the eigendecomposition so that
/// rank-deficient covariances are accepted.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs())).max(1.0);
    if let Some(&l) = eig.eigenvalues.iter().find(|&&l| l < -1e-8 * scale) {
        return Err(Error::NotPositiveDefinite { jitter: l });
    }
    let mut f = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

fn truth_partition(kernel: &KernelTruth, coords: &[Coord]) -> (SubregionPartition, Vec<AnisoParams>) {
    match kernel {
        KernelTruth::Independent => (SubregionPartition::single(coords), Vec::new()),
        KernelTruth::Stationary { params } => (SubregionPartition::single(coords), vec![*params]),
        KernelTruth::TwoRegime { axis, params } => {
            let lo = coords.iter().map(|c| c[*axis]).min().unwrap_or(0);
            let hi = coords.iter().map(|c| c[*axis]).max().unwrap_or(0);
            // Twice the coordinate avoids a fractional midpoint.
            let assignment = coords.iter().map(|c| usize::from(2 * c[*axis] > lo + hi)).collect();
            let part = SubregionPartition::from_assignment(coords, assignment);
            let params = if part.n_regions() == 2 { params.to_vec() } else { vec![params[0]] };
            (part, params)
        }
    }
}

fn truth_sigma1(kernel: &KernelTruth, coords: &[Coord]) -> Result<(SubregionPartition, Vec<AnisoParams>, DMatrix<f64>)> {
    let (part, params) = truth_partition(kernel, coords);
    let sigma1 = match kernel {
        KernelTruth::Independent => DMatrix::identity(coords.len(), coords.len()),
        _ => RoiGeometry::new(coords).correlation(&part, &params)?,
    };
    Ok((part, params, sigma1))
}

fn regional_cov(spec: &PhantomSpec) -> DMatrix<f64> {
    let r = spec.n_rois();
    match spec.regional {
        RegionalTerm::Nugget => DMatrix::identity(r, r),
        RegionalTerm::Common { rho } => DMatrix::from_fn(r, r, |i, j| rho.powi(i.abs_diff(j) as i32)),
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Forward simulation: block ROIs, per-ROI spatial innovations, AR(2)
/// recursion per voxel after a stationary burn-in, and the block-design mean.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<(FmriDataset, PhantomTruth)> {
    spec.validate()?;
    let parcellation = spec.parcellation()?;
    let design = BlockDesign::alternating(spec.tr_seconds, spec.session_len)?;
    let x = design_matrix(&design, &canonical_hrf(spec.tr_seconds, &HrfSpec::default()))?;
    let layout = DesignLayout {
        n_sessions: design.sessions.len() - 1,
    };
    let (v_count, t_len, n_rois) = (parcellation.n_voxels(), design.n_scans, parcellation.n_rois());
    let mut rng = stream(seed, "phantom", 0);

    let mut x_range = vec![(i64::MAX, i64::MIN); n_rois];
    for voxel in parcellation.voxels() {
        let r = &mut x_range[voxel.roi - 1];
        *r = (r.0.min(voxel.coord[0]), r.1.max(voxel.coord[0]));
    }
    let mut beta = DMatrix::zeros(v_count, layout.n_cols());
    for voxel in parcellation.voxels() {
        let v = voxel.id - 1;
        beta[(v, 0)] = spec.intercept + spec.intercept_sd * rng.sample::<f64, _>(StandardNormal);
        let boost = if spec.active_rois.contains(&voxel.roi) {
            let (lo, hi) = x_range[voxel.roi - 1];
            let u = (voxel.coord[0] - lo) as f64 / (hi - lo + 1) as f64;
            spec.active_boost * (2.0 * std::f64::consts::PI * u).cos()
        } else {
            0.0
        };
        beta[(v, layout.task_col())] = spec.task + boost;
        beta[(v, layout.rest_col())] = spec.rest;
    }

    let mut partitions = Vec::with_capacity(n_rois);
    let mut params = Vec::with_capacity(n_rois);
    let mut sigma1 = Vec::with_capacity(n_rois);
    let mut factors = Vec::with_capacity(n_rois);
    for r in 1..=n_rois {
        let coords = parcellation.roi_coords(r);
        let (part, p, s1) = truth_sigma1(&spec.kernel, &coords)?;
        factors.push(psd_sqrt(&s1)?);
        partitions.push(part);
        params.push(p);
        sigma1.push(s1);
    }
    let r_cov = regional_cov(spec);
    let r_factor = psd_sqrt(&r_cov)?;
    let error_cov: Vec<DMatrix<f64>> = sigma1
        .iter()
        .enumerate()
        .map(|(i, s1)| match spec.regional {
            RegionalTerm::Nugget => roi_error_cov(s1, spec.omega),
            RegionalTerm::Common { .. } => {
                let c = (1.0 - spec.omega).powi(2) * r_cov[(i, i)];
                s1 * spec.omega.powi(2) + DMatrix::from_element(s1.nrows(), s1.ncols(), c)
            }
        })
        .collect();

    let sigma = spec.ar.sigma2.sqrt();
    let (phi1, phi2) = (spec.ar.phi1, spec.ar.phi2);
    let mut lag1 = vec![0.0; v_count];
    let mut lag2 = vec![0.0; v_count];
    let mut noise = DMatrix::zeros(v_count, t_len);
    let mut u = vec![0.0; v_count];
    for step in 0..BURN_IN + t_len {
        let h2 = &r_factor * DVector::from_fn(n_rois, |_, _| rng.sample::<f64, _>(StandardNormal));
        for r in 1..=n_rois {
            let members = parcellation.roi_members(r);
            let f = &factors[r - 1];
            let h1 = f * DVector::from_fn(f.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            for (k, &v) in members.iter().enumerate() {
                let second = match spec.regional {
                    RegionalTerm::Nugget => rng.sample::<f64, _>(StandardNormal),
                    RegionalTerm::Common { .. } => h2[r - 1],
                };
                u[v] = spec.omega * h1[k] + (1.0 - spec.omega) * second;
            }
        }
        for v in 0..v_count {
            let nu = phi1 * lag1[v] + phi2 * lag2[v] + sigma * u[v];
            lag2[v] = lag1[v];
            lag1[v] = nu;
            if step >= BURN_IN {
                noise[(v, step - BURN_IN)] = nu;
            }
        }
    }
    let series = &beta * x.transpose() + noise;
    let dataset = FmriDataset::new(parcellation, series, design)?;
    Ok((
        dataset,
        PhantomTruth {
            beta,
            partitions,
            params,
            sigma1,
            error_cov,
            regional_cov: r_cov,
        },
    ))
}

// ---------------------------------------------------------------------------
// Studies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StudyModel {
    #[serde(rename = "glm")]
    Glm,
    #[serde(rename = "iso")]
    Iso,
    #[serde(rename = "aniso")]
    Aniso,
    #[serde(rename = "l-aniso")]
    LAniso,
}

impl StudyModel {
    pub const ALL: [StudyModel; 4] = [StudyModel::Glm, StudyModel::Iso, StudyModel::Aniso, StudyModel::LAniso];

    pub fn name(self) -> &'static str {
        match self {
            StudyModel::Glm => "glm",
            StudyModel::Iso => "iso",
            StudyModel::Aniso => "aniso",
            StudyModel::LAniso => "l-aniso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// True spatial covariance of one ROI, rescaled to unit variances.
#[derive(Debug, Clone)]
pub struct StudyRoi {
    pub coords: Vec<Coord>,
    pub cov: DMatrix<f64>,
}

impl StudyRoi {
    pub fn new(coords: Vec<Coord>, cov: DMatrix<f64>) -> Result<Self> {
        let n = coords.len();
        if cov.shape() != (n, n) {
            return Err(Error::SizeMismatch(format!("{n} coordinates for a {:?} covariance", cov.shape())));
        }
        if cov.diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::NotPositiveDefinite { jitter: 0.0 });
        }
        let cov = unit_diagonal(&cov);
        Ok(Self { coords, cov })
    }
}

fn unit_diagonal(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (d[i] * d[j])
        }
    })
}

/// Per-ROI truths from the phantom's kernel and the nugget mixture.
pub fn study_rois(spec: &PhantomSpec) -> Result<Vec<StudyRoi>> {
    spec.validate()?;
    let parcellation = spec.parcellation()?;
    (1..=parcellation.n_rois())
        .map(|r| {
            let coords = parcellation.roi_coords(r);
            let (_, _, s1) = truth_sigma1(&spec.kernel, &coords)?;
            StudyRoi::new(coords, roi_error_cov(&s1, spec.omega))
        })
        .collect()
}

/// Per-ROI truths taken as the sample covariance of OLS-detrended series.
pub fn empirical_rois(dataset: &FmriDataset) -> Result<Vec<StudyRoi>> {
    let x = design_matrix(&dataset.design, &canonical_hrf(dataset.design.tr_seconds, &HrfSpec::default()))?;
    let resid = ols_residuals(&dataset.series, &x)?;
    let t_len = dataset.n_scans() as f64;
    (1..=dataset.parcellation.n_rois())
        .map(|r| {
            let members = dataset.parcellation.roi_members(r);
            let rows = resid.select_rows(members);
            let cov = &rows * rows.transpose() / t_len;
            StudyRoi::new(dataset.parcellation.roi_coords(r), cov)
        })
        .collect()
}

fn ols_residuals(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let proj = ols_projector(x)?;
    Ok(y - y * proj.transpose() * x.transpose())
}

/// `(X^T X)^{-1} X^T`.
fn ols_projector(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Singular("design cross-product".into()))?;
    Ok(chol.solve(&x.transpose()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub reps: usize,
    pub seed: u64,
    /// Voxels kept per ROI; larger ROIs are randomly subsampled.
    pub subsample_cap: usize,
    pub session_len: usize,
    pub tr_seconds: f64,
    /// Test level.
    pub alpha: f64,
    pub n_removed: usize,
    pub models: Vec<StudyModel>,
    /// Optimiser for the per-replicate covariance fits.
    pub simplex: SimplexConfig,
    /// Search used once per ROI to fix the l-aniso partition.
    pub search: SearchOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            reps: 100,
            seed: 1,
            subsample_cap: 1000,
            session_len: 48,
            tr_seconds: 2.0,
            alpha: 0.05,
            n_removed: 50,
            models: StudyModel::ALL.to_vec(),
            simplex: SimplexConfig::default(),
            search: SearchOptions::default(),
        }
    }
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.models.is_empty() || self.subsample_cap < 3 {
            return Err(Error::InvalidArgument("need reps >= 1, a model and subsample_cap >= 3".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
        }
        self.simplex.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyMetric {
    /// Rejection percentage under the null.
    FalsePositive,
    Rmse,
}

impl StudyMetric {
    pub fn schema(self) -> &'static str {
        match self {
            StudyMetric::FalsePositive => "study_fp",
            StudyMetric::Rmse => "study_krige",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    /// 1-based ROI label.
    pub roi: usize,
    pub n_voxels: usize,
    /// One value per model, in report model order; NaN if every rep failed.
    pub values: Vec<f64>,
    pub failures: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub metric: StudyMetric,
    pub models: Vec<StudyModel>,
    pub rows: Vec<StudyRow>,
    pub reps: usize,
    pub runtime_seconds: f64,
}

impl StudyReport {
    /// Mean over ROIs, per model.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.models.len())
            .map(|m| self.rows.iter().map(|r| r.values[m]).sum::<f64>() / self.rows.len() as f64)
            .collect()
    }

    pub fn mean_of(&self, model: StudyModel) -> Option<f64> {
        let i = self.models.iter().position(|&m| m == model)?;
        Some(self.mean()[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema={} version=1\nroi,n_voxels,reps", self.metric.schema());
        for m in &self.models {
            out.push(',');
            out.push_str(m.name());
        }
        out.push_str(",failures\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.roi, row.n_voxels, self.reps));
            for v in &row.values {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", row.failures.iter().sum::<usize>()));
        }
        out.push_str(&format!("mean,,{}", self.reps));
        for v in self.mean() {
            out.push_str(&format!(",{v}"));
        }
        let total: usize = self.rows.iter().flat_map(|r| r.failures.iter()).sum();
        out.push_str(&format!(",{total}\n"));
        out
    }
}

#[derive(Debug, Clone)]
pub struct PowerCurve {
    pub models: Vec<StudyModel>,
    pub effects: Vec<f64>,
    /// Rejection percentage, `power[effect][model]`, averaged over ROIs.
    pub power: Vec<Vec<f64>>,
    pub reps: usize,
    pub runtime_seconds: f64,
}

impl PowerCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# schema=study_power version=1\neffect,model,power\n");
        for (e, row) in self.effects.iter().zip(&self.power) {
            for (m, p) in self.models.iter().zip(row) {
                out.push_str(&format!("{e},{},{p}\n", m.name()));
            }
        }
        out
    }
}

/// Shared per-ROI inputs of a study.
struct Prepared {
    n: usize,
    factor: DMatrix<f64>,
    fit_geometry: RoiGeometry,
    eval_geometry: RoiGeometry,
    fit_single: SubregionPartition,
    eval_single: SubregionPartition,
    /// l-aniso partition restricted to the fitted voxels, and on all voxels.
    local: Option<(SubregionPartition, SubregionPartition)>,
    observed: Vec<usize>,
    held_out: Vec<usize>,
}

struct Context {
    x: DMatrix<f64>,
    proj: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
    contrast: DVector<f64>,
}

impl Context {
    fn new(cfg: &StudyConfig) -> Result<Self> {
        let design = BlockDesign::alternating(cfg.tr_seconds, cfg.session_len)?;
        let x = design_matrix(&design, &canonical_hrf(cfg.tr_seconds, &HrfSpec::default()))?;
        let layout = DesignLayout {
            n_sessions: design.sessions.len() - 1,
        };
        let proj = ols_projector(&x)?;
        let xtx_inv = &proj * &proj.transpose();
        let mut contrast = DVector::zeros(x.ncols());
        contrast[layout.task_col()] = 1.0;
        contrast[layout.rest_col()] = -1.0;
        Ok(Self {
            x,
            proj,
            xtx_inv,
            contrast,
        })
    }

    fn t_len(&self) -> usize {
        self.x.nrows()
    }

    /// Common ROI mean with task coefficient `1 + effect` and rest coefficient 1.
    fn mean_row(&self, effect: f64) -> DVector<f64> {
        let mut b = DVector::zeros(self.x.ncols());
        let task = self.contrast.iter().position(|&c| c > 0.0).unwrap_or(0);
        let rest = self.contrast.iter().position(|&c| c < 0.0).unwrap_or(0);
        b[task] = 1.0 + effect;
        b[rest] = 1.0;
        &self.x * b
    }
}

fn subsample(roi: &StudyRoi, cap: usize, seed: u64, unit: u64) -> (Vec<Coord>, DMatrix<f64>) {
    let n = roi.coords.len();
    if n <= cap {
        return (roi.coords.clone(), roi.cov.clone());
    }
    let mut rng = stream(seed, "subsample", unit);
    let mut keep = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    keep.sort_unstable();
    let coords = keep.iter().map(|&i| roi.coords[i]).collect();
    (coords, roi.cov.select_rows(&keep).select_columns(&keep))
}

/// OLS residuals of `n x T` series, each row divided by its residual SD.
fn standardize(y: &DMatrix<f64>, ctx: &Context) -> (DMatrix<f64>, Vec<f64>) {
    let resid = y - y * ctx.proj.transpose() * ctx.x.transpose();
    let dof = (ctx.t_len() - ctx.x.ncols()) as f64;
    let sd: Vec<f64> = resid.row_iter().map(|r| (r.norm_squared() / dof).sqrt()).collect();
    let e = DMatrix::from_fn(resid.nrows(), resid.ncols(), |i, j| resid[(i, j)] / sd[i]);
    (e, sd)
}

fn prepare(
    roi: &StudyRoi,
    unit: u64,
    cfg: &StudyConfig,
    ctx: &Context,
    n_removed: Option<usize>,
) -> Result<Prepared> {
    let (coords, cov) = subsample(roi, cfg.subsample_cap, cfg.seed, unit);
    let n = coords.len();
    let factor = psd_sqrt(&cov)?;
    let (observed, held_out) = match n_removed {
        Some(k) => {
            if n <= k + 2 {
                return Err(Error::InvalidArgument(format!("ROI with {n} voxels cannot hold out {k}")));
            }
            let mut rng = stream(cfg.seed, "holdout", unit);
            let mut held = rand::seq::index::sample(&mut rng, n, k).into_vec();
            held.sort_unstable();
            let obs: Vec<usize> = (0..n).filter(|i| held.binary_search(i).is_err()).collect();
            (obs, held)
        }
        None => ((0..n).collect(), Vec::new()),
    };
    let fit_coords: Vec<Coord> = observed.iter().map(|&i| coords[i]).collect();
    let eval_geometry = RoiGeometry::new(&coords);
    let fit_geometry = RoiGeometry::new(&fit_coords);

    let local = if cfg.models.contains(&StudyModel::LAniso) {
        // Pilot draw on the whole ROI fixes the partition for every rep.
        let mut rng = stream(cfg.seed, "pilot", unit);
        let y = &factor * normal_matrix(factor.ncols(), ctx.t_len(), &mut rng);
        let (e, _) = standardize(&y, ctx);
        let sel = bic_search(&eval_geometry, &e, sub_seed(cfg.seed, "select", unit), &cfg.search)?;
        let full = sel.partition;
        let fit_part = SubregionPartition {
            assignment: observed.iter().map(|&i| full.assignment[i]).collect(),
            centroids: full.centroids.clone(),
        };
        Some((fit_part, full))
    } else {
        None
    };
    Ok(Prepared {
        n,
        factor,
        fit_single: SubregionPartition::single(&fit_coords),
        eval_single: SubregionPartition::single(&coords),
        fit_geometry,
        eval_geometry,
        local,
        observed,
        held_out,
    })
}

fn model_corr(
    geometry: &RoiGeometry,
    partition: &SubregionPartition,
    params: &[AnisoParams],
    omega: f64,
) -> Result<DMatrix<f64>> {
    let s1 = geometry.correlation(partition, params)?;
    Ok(unit_diagonal(&roi_error_cov(&s1, omega)))
}

/// Fits each requested model to `e` (rows = fitted voxels) and returns its
/// correlation matrix over all ROI voxels.
fn fit_models(prep: &Prepared, e: &DMatrix<f64>, cfg: &StudyConfig) -> Vec<Result<DMatrix<f64>>> {
    let needs_iso = cfg.models.iter().any(|m| *m != StudyModel::Glm);
    let iso = needs_iso.then(|| {
        let opts = RoiFitOptions {
            mode: AngleMode::Isotropic,
            simplex: cfg.simplex,
            init: None,
        };
        fit_roi_cov(&prep.fit_geometry, e, &prep.fit_single, &opts)
    });
    cfg.models
        .iter()
        .map(|model| {
            let iso = || -> Result<&crate::localcov::RoiCovModel> {
                match &iso {
                    Some(Ok(m)) => Ok(m),
                    Some(Err(err)) => Err(Error::Optimizer(format!("isotropic fit failed: {err}"))),
                    None => unreachable!("isotropic fit computed when needed"),
                }
            };
            match model {
                StudyModel::Glm => Ok(DMatrix::identity(prep.n, prep.n)),
                StudyModel::Iso => {
                    let m = iso()?;
                    model_corr(&prep.eval_geometry, &prep.eval_single, &m.params, m.omega)
                }
                StudyModel::Aniso => {
                    let start = iso()?;
                    let opts = RoiFitOptions {
                        mode: AngleMode::Free,
                        simplex: cfg.simplex,
                        init: Some((start.params.clone(), start.omega)),
                    };
                    let m = fit_roi_cov(&prep.fit_geometry, e, &prep.fit_single, &opts)?;
                    model_corr(&prep.eval_geometry, &prep.eval_single, &m.params, m.omega)
                }
                StudyModel::LAniso => {
                    let start = iso()?;
                    let (fit_part, full) = prep.local.as_ref().expect("l-aniso partition prepared");
                    let opts = RoiFitOptions {
                        mode: AngleMode::Free,
                        simplex: cfg.simplex,
                        init: Some((vec![start.params[0]; fit_part.n_regions()], start.omega)),
                    };
                    let m = fit_roi_cov(&prep.fit_geometry, e, fit_part, &opts)?;
                    model_corr(&prep.eval_geometry, full, &m.params, m.omega)
                }
            }
        })
        .collect()
}

/// Wald statistic pieces `(contrast, se)` of the GLS estimate under the
/// common-mean model with spatial covariance `D C D`.
fn gls_contrast(corr: &DMatrix<f64>, sd: &[f64], y: &DMatrix<f64>, ctx: &Context) -> Result<(f64, f64)> {
    let n = corr.nrows();
    let s = DMatrix::from_fn(n, n, |i, j| sd[i] * corr[(i, j)] * sd[j]);
    let chol = cholesky_with_jitter(&s)?;
    let w = chol.factor.solve(&DVector::from_element(n, 1.0));
    let a = w.sum();
    let ybar = y.transpose() * &w / a;
    let beta = &ctx.proj * ybar;
    let contrast = ctx.contrast.dot(&beta);
    let var = (ctx.contrast.transpose() * &ctx.xtx_inv * &ctx.contrast)[(0, 0)] / a;
    Ok((contrast, var.sqrt()))
}

/// Per model, the rejection flags for each effect size (`None` if the fit failed).
fn test_rep(
    prep: &Prepared,
    ctx: &Context,
    cfg: &StudyConfig,
    effects: &[f64],
    unit: u64,
    rep: usize,
) -> Vec<Option<Vec<bool>>> {
    let mut rng = stream(cfg.seed, "fp", (unit << 32) | rep as u64);
    let noise = &prep.factor * normal_matrix(prep.factor.ncols(), ctx.t_len(), &mut rng);
    let with_mean = |effect: f64| {
        let m = ctx.mean_row(effect);
        DMatrix::from_fn(prep.n, ctx.t_len(), |i, t| noise[(i, t)] + m[t])
    };
    let (e, sd) = standardize(&with_mean(0.0), ctx);
    let ys: Vec<DMatrix<f64>> = effects.iter().map(|&d| with_mean(d)).collect();
    fit_models(prep, &e, cfg)
        .into_iter()
        .map(|corr| {
            let corr = corr.ok()?;
            ys.iter()
                .map(|y| {
                    let (c, se) = gls_contrast(&corr, &sd, y, ctx).ok()?;
                    Some(normal_p_value(c / se) < cfg.alpha)
                })
                .collect()
        })
        .collect()
}

fn prepare_all(rois: &[StudyRoi], cfg: &StudyConfig, ctx: &Context, n_removed: Option<usize>) -> Result<Vec<Prepared>> {
    rois.par_iter()
        .enumerate()
        .map(|(r, roi)| prepare(roi, r as u64, cfg, ctx, n_removed).map_err(|e| e.in_stage("study", format!("roi {}", r + 1))))
        .collect()
}

/// Rejection percentages per ROI, effect and model (`rates[roi][effect][model]`),
/// with failure counts per ROI and model.
fn rejection_rates(
    rois: &[StudyRoi],
    cfg: &StudyConfig,
    effects: &[f64],
) -> Result<(Vec<Prepared>, Vec<Vec<Vec<f64>>>, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let ctx = Context::new(cfg)?;
    let prepared = prepare_all(rois, cfg, &ctx, None)?;
    let jobs: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|r| (0..cfg.reps).map(move |k| (r, k)))
        .collect();
    let results: Vec<Vec<Option<Vec<bool>>>> = jobs
        .par_iter()
        .map(|&(r, k)| test_rep(&prepared[r], &ctx, cfg, effects, r as u64, k))
        .collect();
    let n_models = cfg.models.len();
    let mut rates = Vec::with_capacity(prepared.len());
    let mut failures = Vec::with_capacity(prepared.len());
    for r in 0..prepared.len() {
        let reps = &results[r * cfg.reps..(r + 1) * cfg.reps];
        let mut per_effect = vec![vec![0.0; n_models]; effects.len()];
        let mut fails = vec![0; n_models];
        for m in 0..n_models {
            let ok: Vec<&Vec<bool>> = reps.iter().filter_map(|rep| rep[m].as_ref()).collect();
            fails[m] = cfg.reps - ok.len();
            for (ei, row) in per_effect.iter_mut().enumerate() {
                row[m] = if ok.is_empty() {
                    f64::NAN
                } else {
                    100.0 * ok.iter().filter(|f| f[ei]).count() as f64 / ok.len() as f64
                };
            }
        }
        rates.push(per_effect);
        failures.push(fails);
    }
    Ok((prepared, rates, failures))
}

/// False-positive percentage per model under a null task-versus-rest contrast.
pub fn run_fp_study(rois: &[StudyRoi], cfg: &StudyConfig) -> Result<StudyReport> {
    let start = Instant::now();
    let (prepared, rates, failures) = rejection_rates(rois, cfg, &[0.0])?;
    let rows = prepared
        .iter()
        .zip(rates)
        .zip(failures)
        .enumerate()
        .map(|(r, ((p, rate), fails))| StudyRow {
            roi: r + 1,
            n_voxels: p.n,
            values: rate[0].clone(),
            failures: fails,
        })
        .collect();
    Ok(StudyReport {
        metric: StudyMetric::FalsePositive,
        models: cfg.models.clone(),
        rows,
        reps: cfg.reps,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Rejection percentage against the task-minus-rest effect size, averaged
/// over ROIs. Every effect reuses the same noise draws and fits.
pub fn power_curve(rois: &[StudyRoi], effects: &[f64], cfg: &StudyConfig) -> Result<PowerCurve> {
    let start = Instant::now();
    if effects.is_empty() {
        return Err(Error::InvalidArgument("empty effect grid".into()));
    }
    let (_, rates, _) = rejection_rates(rois, cfg, effects)?;
    let n_rois = rates.len() as f64;
    let power = (0..effects.len())
        .map(|ei| {
            (0..cfg.models.len())
                .map(|m| rates.iter().map(|r| r[ei][m]).sum::<f64>() / n_rois)
                .collect()
        })
        .collect();
    Ok(PowerCurve {
        models: cfg.models.clone(),
        effects: effects.to_vec(),
        power,
        reps: cfg.reps,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}

fn krige_rep(prep: &Prepared, ctx: &Context, cfg: &StudyConfig, unit: u64, rep: usize) -> Vec<Option<f64>> {
    let mut rng = stream(cfg.seed, "krige", (unit << 32) | rep as u64);
    let field = &prep.factor * normal_matrix(prep.factor.ncols(), ctx.t_len(), &mut rng);
    let obs = field.select_rows(&prep.observed);
    let truth = field.select_rows(&prep.held_out);
    let (e, _) = standardize(&obs, ctx);
    fit_models(prep, &e, cfg)
        .into_iter()
        .map(|corr| {
            let corr = corr.ok()?;
            let pred = krige(&corr, &prep.observed, &obs, &prep.held_out).ok()?;
            Some(((pred - &truth).norm_squared() / truth.len() as f64).sqrt())
        })
        .collect()
}

/// Kriging RMSE per model on a fixed held-out voxel set per ROI.
pub fn run_krige_study(rois: &[StudyRoi], cfg: &StudyConfig) -> Result<StudyReport> {
    let start = Instant::now();
    cfg.validate()?;
    let ctx = Context::new(cfg)?;
    let prepared = prepare_all(rois, cfg, &ctx, Some(cfg.n_removed))?;
    let jobs: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|r| (0..cfg.reps).map(move |k| (r, k)))
        .collect();
    let results: Vec<Vec<Option<f64>>> = jobs
        .par_iter()
        .map(|&(r, k)| krige_rep(&prepared[r], &ctx, cfg, r as u64, k))
        .collect();
    let n_models = cfg.models.len();
    let rows = prepared
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let reps = &results[r * cfg.reps..(r + 1) * cfg.reps];
            let mut values = vec![f64::NAN; n_models];
            let mut failures = vec![0; n_models];
            for m in 0..n_models {
                let ok: Vec<f64> = reps.iter().filter_map(|rep| rep[m]).collect();
                failures[m] = cfg.reps - ok.len();
                if !ok.is_empty() {
                    values[m] = ok.iter().sum::<f64>() / ok.len() as f64;
                }
            }
            StudyRow {
                roi: r + 1,
                n_voxels: p.n,
                values,
                failures,
            }
        })
        .collect();
    Ok(StudyReport {
        metric: StudyMetric::Rmse,
        models: cfg.models.clone(),
        rows,
        reps: cfg.reps,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
