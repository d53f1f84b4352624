//! Stage orchestration on a worker pool, resumable through [`FitState`].

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{bh_fdr, fit_activation, voxel_tests, ActivationConfig, RoiInputs};
use crate::dataset::{load_dataset, FmriDataset};
use crate::design::{canonical_hrf, design_matrix, DesignLayout, HrfSpec};
use crate::error::{Error, Result};
use crate::localcov::{krige, RoiGeometry};
use crate::numerics::SimplexConfig;
use crate::regional::{cv_lambda, default_lambda_grid, edges, glasso, roi_means, sample_cov, CvConfig};
use crate::rng::{stream, sub_seed};
use crate::select::{bic_search, SearchOptions};
use crate::shrinkage::{select_delta, ShrinkageConfig};
use crate::sim::StudyConfig;
use crate::state::{
    load_state, save_state, ActivationRecord, FitState, Provenance, RegionalRecord, RoiRecord, Stage,
};
use crate::temporal::{fit_voxel_with, standardized_residuals, VoxelFit};

pub const REPORT_DIR: &str = "reports";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub temporal: bool,
    pub local: bool,
    pub regional: bool,
    pub activation: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            temporal: true,
            local: true,
            regional: true,
            activation: true,
        }
    }
}

impl StageToggles {
    pub fn only(stage: Stage) -> Self {
        Self {
            temporal: stage == Stage::Temporal,
            local: stage == Stage::Local,
            regional: stage == Stage::Regional,
            activation: stage == Stage::Activation,
        }
    }

    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Temporal => self.temporal,
            Stage::Local => self.local,
            Stage::Regional => self.regional,
            Stage::Activation => self.activation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Worker threads; 0 uses every logical core.
    pub threads: usize,
    pub seed: u64,
    pub stages: StageToggles,
    /// Smoothing-spline penalty of the shrinkage step.
    pub spline_p: f64,
    pub delta_tol: f64,
    pub fdr_q: f64,
    pub harmonics: usize,
    /// Explicit penalty grid; empty means a geometric grid of
    /// `lambda_count` values spanning `lambda_ratio`.
    pub lambda_grid: Vec<f64>,
    pub lambda_count: usize,
    pub lambda_ratio: f64,
    pub train_fraction: f64,
    /// Rescale the ROI-mean covariance to a correlation matrix before the lasso.
    pub correlation_scale: bool,
    pub temporal_simplex: SimplexConfig,
    pub search: SearchOptions,
    /// Settings of the simulation subcommands.
    pub study: StudyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let shrink = ShrinkageConfig::default();
        let act = ActivationConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            output: PathBuf::from("out"),
            threads: 0,
            seed: 1,
            stages: StageToggles::default(),
            spline_p: shrink.p,
            delta_tol: shrink.delta_tol,
            fdr_q: act.q,
            harmonics: act.harmonics,
            lambda_grid: Vec::new(),
            lambda_count: 20,
            lambda_ratio: 1e-3,
            train_fraction: 0.9,
            correlation_scale: false,
            temporal_simplex: SimplexConfig::default(),
            search: SearchOptions::default(),
            study: StudyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.spline_p) || !(self.delta_tol > 0.0) {
            return Err(Error::InvalidArgument("spline_p must lie in [0, 1] and delta_tol be positive".into()));
        }
        ActivationConfig {
            harmonics: self.harmonics,
            q: self.fdr_q,
        }
        .validate()?;
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("lambda grid entries must be non-negative".into()));
        }
        if self.lambda_grid.is_empty() && (self.lambda_count == 0 || !(self.lambda_ratio > 0.0 && self.lambda_ratio <= 1.0)) {
            return Err(Error::InvalidArgument("lambda_count must be >= 1 and lambda_ratio in (0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train_fraction must lie in (0, 1)".into()));
        }
        self.temporal_simplex.validate()?;
        self.search.simplex.validate()
    }

    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    /// Digest of every setting that can change results; paths, thread
    /// count, stage toggles and study settings are excluded.
    pub fn fit_hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.output = PathBuf::new();
        c.threads = 0;
        c.stages = StageToggles::default();
        c.study = StudyConfig::default();
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn shrinkage(&self) -> ShrinkageConfig {
        ShrinkageConfig {
            p: self.spline_p,
            delta_tol: self.delta_tol,
        }
    }

    fn activation(&self) -> ActivationConfig {
        ActivationConfig {
            harmonics: self.harmonics,
            q: self.fdr_q,
        }
    }
}

/// Runs `f` inside a pool of `threads` workers.
pub fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip enabled stages already persisted in the output directory.
    pub resume: bool,
    /// Stop after persisting this stage.
    pub stop_after: Option<Stage>,
}

struct Inputs {
    dataset: FmriDataset,
    x: DMatrix<f64>,
    layout: DesignLayout,
}

fn load_inputs(config: &PipelineConfig) -> Result<Inputs> {
    let dataset = load_dataset(&config.dataset)?;
    let x = design_matrix(
        &dataset.design,
        &canonical_hrf(dataset.design.tr_seconds, &HrfSpec::default()),
    )?;
    let layout = DesignLayout {
        n_sessions: dataset.design.sessions.len() - 1,
    };
    Ok(Inputs { dataset, x, layout })
}

/// Executes the enabled stages in order, persisting the state after each one,
/// and writes the reports of every stage present at the end.
pub fn run_pipeline(config: &PipelineConfig, options: RunOptions) -> Result<FitState> {
    config.validate()?;
    let inputs = load_inputs(config)?;
    let hash = config.fit_hash();
    let fresh = FitState {
        provenance: Provenance {
            seed: config.seed,
            config_hash: hash.clone(),
        },
        ..FitState::default()
    };
    // Persisted stages are reused as prerequisites when they were produced
    // with the same settings; `resume` additionally skips them.
    let mut state = if config.output.join("state.txt").exists() {
        let s = load_state(&config.output)?;
        let same = s.provenance.config_hash == hash && s.provenance.seed == config.seed;
        match (same, options.resume) {
            (true, _) => s,
            (false, true) => {
                return Err(Error::StateInvariant(
                    "persisted state was produced with different settings; rerun without resume".into(),
                ))
            }
            (false, false) => fresh,
        }
    } else {
        fresh
    };

    with_pool(config.effective_threads(), || -> Result<()> {
        let mut residuals: Option<DMatrix<f64>> = None;
        for stage in Stage::ALL {
            if !config.stages.enabled(stage) || (options.resume && state.has(stage)) {
                if options.stop_after == Some(stage) {
                    break;
                }
                continue;
            }
            if let Some(pre) = stage.prerequisite() {
                if !state.has(pre) {
                    return Err(Error::StateInvariant(format!(
                        "stage {} needs the {} stage to have run",
                        stage.name(),
                        pre.name()
                    )));
                }
            }
            state.clear_from(stage);
            if stage != Stage::Temporal && residuals.is_none() {
                let fits = state.voxel_fits.as_ref().expect("checked above");
                residuals = Some(standardized_residuals(&inputs.dataset, &inputs.x, fits)?);
            }
            match stage {
                Stage::Temporal => {
                    state.voxel_fits = Some(run_temporal(&inputs, config)?);
                }
                Stage::Local => {
                    let e = residuals.as_ref().expect("computed above");
                    state.roi_models = Some(run_local(&inputs, e, config)?);
                }
                Stage::Regional => {
                    let e = residuals.as_ref().expect("computed above");
                    state.regional = Some(run_regional(&inputs, e, config)?);
                }
                Stage::Activation => {
                    state.activation = Some(run_activation(&inputs, &state, config)?);
                }
            }
            save_state(&state, &config.output)?;
            if options.stop_after == Some(stage) {
                break;
            }
        }
        Ok(())
    })??;
    write_reports(&state, &inputs.dataset, &config.output.join(REPORT_DIR))?;
    Ok(state)
}

fn run_temporal(inputs: &Inputs, config: &PipelineConfig) -> Result<Vec<VoxelFit>> {
    let ds = &inputs.dataset;
    (0..ds.n_voxels())
        .into_par_iter()
        .map(|v| {
            let y: Vec<f64> = ds.series.row(v).iter().copied().collect();
            fit_voxel_with(&y, &inputs.x, &config.temporal_simplex)
                .map_err(|e| e.in_stage("fit-temporal", format!("voxel {}", ds.parcellation.voxels()[v].id)))
        })
        .collect()
}

fn run_local(inputs: &Inputs, e: &DMatrix<f64>, config: &PipelineConfig) -> Result<Vec<RoiRecord>> {
    let parc = &inputs.dataset.parcellation;
    (1..=parc.n_rois())
        .into_par_iter()
        .map(|r| {
            let fit = || -> Result<RoiRecord> {
                let coords = parc.roi_coords(r);
                let e_r = e.select_rows(parc.roi_members(r));
                let geometry = RoiGeometry::new(&coords);
                let sel = bic_search(&geometry, &e_r, sub_seed(config.seed, "select", r as u64), &config.search)?;
                let emp = sample_cov(&e_r);
                let shrinkage = select_delta(&emp, &sel.model.error_cov(), &coords, &config.shrinkage())?;
                Ok(RoiRecord {
                    config: sel.config,
                    bic: sel.bic,
                    visited: sel.visited,
                    model: sel.model,
                    shrinkage,
                })
            };
            fit().map_err(|err| err.in_stage("fit-local", format!("roi {r}")))
        })
        .collect()
}

fn run_regional(inputs: &Inputs, e: &DMatrix<f64>, config: &PipelineConfig) -> Result<RegionalRecord> {
    let wrap = |err: Error| err.in_stage("fit-regional", "all rois");
    let mut ebar = roi_means(e, &inputs.dataset.parcellation).map_err(wrap)?;
    if config.correlation_scale {
        for mut row in ebar.row_iter_mut() {
            let sd = (row.norm_squared() / row.len() as f64).sqrt();
            if sd > 0.0 {
                row /= sd;
            }
        }
    }
    let a = sample_cov(&ebar);
    let grid = if config.lambda_grid.is_empty() {
        default_lambda_grid(&a, config.lambda_count, config.lambda_ratio)
    } else {
        config.lambda_grid.clone()
    };
    let cv = cv_lambda(
        &ebar,
        &CvConfig {
            lambda_grid: grid,
            train_fraction: config.train_fraction,
            seed: sub_seed(config.seed, "cv", 0),
        },
    )
    .map_err(wrap)?;
    let fit = glasso(&a, cv.lambda).map_err(wrap)?;
    Ok(RegionalRecord { a, glasso: fit, cv })
}

fn run_activation(inputs: &Inputs, state: &FitState, config: &PipelineConfig) -> Result<ActivationRecord> {
    let ds = &inputs.dataset;
    let parc = &ds.parcellation;
    let fits = state.voxel_fits.as_ref().expect("prerequisite checked");
    let models = state.roi_models.as_ref().expect("prerequisite checked");
    let act_cfg = config.activation();
    let per_roi: Vec<_> = (1..=parc.n_rois())
        .into_par_iter()
        .map(|r| {
            let run = || -> Result<_> {
                let members = parc.roi_members(r);
                let coords = parc.roi_coords(r);
                let series = ds.series.select_rows(members);
                let roi_fits: Vec<VoxelFit> = members.iter().map(|&v| fits[v].clone()).collect();
                let fit = fit_activation(
                    &RoiInputs {
                        coords: &coords,
                        series: &series,
                        fits: &roi_fits,
                        spatial_cov: &models[r - 1].shrinkage.shrunk,
                    },
                    &inputs.x,
                    inputs.layout,
                    &act_cfg,
                )?;
                let tests = voxel_tests(&fit)?;
                Ok((fit, tests))
            };
            run().map_err(|err| err.in_stage("test-activation", format!("roi {r}")))
        })
        .collect::<Result<_>>()?;
    let mut tests = vec![None; ds.n_voxels()];
    let mut rois = Vec::with_capacity(per_roi.len());
    for (r, (fit, t)) in per_roi.into_iter().enumerate() {
        for (&v, test) in parc.roi_members(r + 1).iter().zip(t) {
            tests[v] = Some(test);
        }
        rois.push(fit);
    }
    let tests: Vec<_> = tests.into_iter().map(|t| t.expect("every voxel belongs to a ROI")).collect();
    let p: Vec<f64> = tests.iter().map(|t| t.p).collect();
    let reject = bh_fdr(&p, config.fdr_q);
    Ok(ActivationRecord { rois, tests, reject })
}

// ---------------------------------------------------------------------------
// Reports

fn write_report(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("# schema={name} version=1\n{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// One CSV per stage record present in `state`.
pub fn write_reports(state: &FitState, dataset: &FmriDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let voxels = dataset.parcellation.voxels();
    if let Some(fits) = &state.voxel_fits {
        let p = fits.first().map_or(0, |f| f.beta.len());
        let betas: Vec<String> = (0..p).map(|j| format!("beta_{j}")).collect();
        let header = format!("voxel_id,roi,{},phi1,phi2,sigma2,loglik", betas.join(","));
        let rows: Vec<String> = fits
            .iter()
            .zip(voxels)
            .map(|(f, v)| {
                let b: Vec<String> = f.beta.iter().map(|x| x.to_string()).collect();
                format!(
                    "{},{},{},{},{},{},{}",
                    v.id,
                    v.roi,
                    b.join(","),
                    f.ar.phi1,
                    f.ar.phi2,
                    f.ar.sigma2,
                    f.loglik
                )
            })
            .collect();
        write_report(dir, "temporal", &header, &rows)?;
    }
    if let Some(models) = &state.roi_models {
        let mut summary = Vec::new();
        let mut regions = Vec::new();
        let mut visited = Vec::new();
        for (i, rec) in models.iter().enumerate() {
            let r = i + 1;
            let m = &rec.model;
            summary.push(format!(
                "{r},{},{},{},{},{},{},{},{}",
                m.partition.assignment.len(),
                rec.config,
                m.partition.n_regions(),
                m.mode.name(),
                m.omega,
                m.loglik,
                rec.bic,
                rec.shrinkage.delta
            ));
            for (l, (p, size)) in m.params.iter().zip(m.partition.sizes()).enumerate() {
                regions.push(format!(
                    "{r},{},{size},{},{},{},{},{},{}",
                    l + 1,
                    p.nu,
                    p.lengths[0],
                    p.lengths[1],
                    p.lengths[2],
                    p.xi1,
                    p.xi2
                ));
            }
            for (cfg, bic) in &rec.visited {
                visited.push(format!("{r},{cfg},{bic}"));
            }
        }
        write_report(
            dir,
            "local",
            "roi,n_voxels,config,n_regions,mode,omega,loglik,bic,delta",
            &summary,
        )?;
        write_report(dir, "local_regions", "roi,region,n_voxels,nu,l1,l2,l3,xi1,xi2", &regions)?;
        write_report(dir, "local_search", "roi,config,bic", &visited)?;
    }
    if let Some(reg) = &state.regional {
        let rows: Vec<String> = edges(&reg.glasso.precision, 0.0)
            .into_iter()
            .map(|(a, b, w)| format!("{a},{b},{w}"))
            .collect();
        write_report(dir, "regional_edges", "roi_a,roi_b,precision", &rows)?;
        let rows: Vec<String> = reg
            .cv
            .sse_curve
            .iter()
            .map(|(l, s)| format!("{l},{s},{}", u8::from(*l == reg.cv.lambda)))
            .collect();
        write_report(dir, "regional_cv", "lambda,sse,selected", &rows)?;
    }
    if let Some(act) = &state.activation {
        let rows: Vec<String> = act
            .tests
            .iter()
            .zip(&act.reject)
            .zip(voxels)
            .map(|((t, rej), v)| {
                format!("{},{},{},{},{},{},{}", v.id, v.roi, t.contrast, t.se, t.z, t.p, u8::from(*rej))
            })
            .collect();
        write_report(dir, "activation", "voxel_id,roi,contrast,se,z,p,reject", &rows)?;
    }
    Ok(())
}

/// Regenerates reports from persisted state.
pub fn report(config: &PipelineConfig) -> Result<FitState> {
    let state = load_state(&config.output)?;
    let dataset = load_dataset(&config.dataset)?;
    write_reports(&state, &dataset, &config.output.join(REPORT_DIR))?;
    Ok(state)
}

/// Leave-out kriging check for one ROI: `n_holdout` seeded voxels are
/// predicted from the others under the shrunk stage-2 covariance. Returns
/// the CSV report (`voxel_id,rmse,prior_sd`).
pub fn krige_holdout(config: &PipelineConfig, roi: usize, n_holdout: usize) -> Result<String> {
    let inputs = load_inputs(config)?;
    let state = load_state(&config.output)?;
    let (Some(fits), Some(models)) = (&state.voxel_fits, &state.roi_models) else {
        return Err(Error::StateInvariant("kriging needs the temporal and local stages".into()));
    };
    let parc = &inputs.dataset.parcellation;
    if roi == 0 || roi > parc.n_rois() {
        return Err(Error::InvalidArgument(format!("ROI {roi} does not exist")));
    }
    let members = parc.roi_members(roi);
    let n = members.len();
    if n_holdout == 0 || n_holdout >= n {
        return Err(Error::InvalidArgument(format!("cannot hold out {n_holdout} of {n} voxels")));
    }
    let e = standardized_residuals(&inputs.dataset, &inputs.x, fits)?.select_rows(members);
    let mut rng = stream(config.seed, "krige", roi as u64);
    let mut held = rand::seq::index::sample(&mut rng, n, n_holdout).into_vec();
    held.sort_unstable();
    let observed: Vec<usize> = (0..n).filter(|i| held.binary_search(i).is_err()).collect();
    let cov = &models[roi - 1].shrinkage.shrunk;
    let pred = krige(cov, &observed, &e.select_rows(&observed), &held)?;
    let m = e.ncols() as f64;
    let mut text = String::from("# schema=krige version=1\nvoxel_id,rmse,prior_sd\n");
    for (k, &i) in held.iter().enumerate() {
        let sse: f64 = (0..e.ncols()).map(|t| (pred[(k, t)] - e[(i, t)]).powi(2)).sum();
        let id = parc.voxels()[members[i]].id;
        text.push_str(&format!("{id},{},{}\n", (sse / m).sqrt(), cov[(i, i)].sqrt()));
    }
    Ok(text)
}
