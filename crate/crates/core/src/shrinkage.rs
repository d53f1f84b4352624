//! Shrinkage of the model covariance toward the empirical one, with the
//! mixing weight chosen by matching smoothed directional contrasts.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::dataset::Coord;
use crate::error::{Error, Result};
use crate::numerics::smoothing_spline;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageConfig {
    /// Spline penalty; 1 interpolates, 0 fits a straight line.
    pub p: f64,
    pub delta_tol: f64,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        Self { p: 0.3, delta_tol: 1e-3 }
    }
}

/// Mean second difference `S_vv + S_v'v' - 2 S_vv'` over adjacent pairs
/// `(v, v + e_axis)`, one entry per slice coordinate along the axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastCurve {
    pub axis: usize,
    pub slices: Vec<i64>,
    pub values: Vec<f64>,
}

/// Contrast curves along x, y and z. A curve is empty when no voxel has a
/// neighbour along that axis.
pub fn directional_contrasts(cov: &DMatrix<f64>, coords: &[Coord]) -> Result<[ContrastCurve; 3]> {
    if cov.nrows() != coords.len() || cov.ncols() != coords.len() {
        return Err(Error::SizeMismatch(format!(
            "{}x{} matrix for {} voxels",
            cov.nrows(),
            cov.ncols(),
            coords.len()
        )));
    }
    let index: HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let curve = |axis: usize| {
        let mut acc: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
        for (i, c) in coords.iter().enumerate() {
            let mut nb = *c;
            nb[axis] += 1;
            if let Some(&j) = index.get(&nb) {
                let v = cov[(i, i)] + cov[(j, j)] - 2.0 * cov[(i, j)];
                let e = acc.entry(c[axis]).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        ContrastCurve {
            axis,
            slices: acc.keys().copied().collect(),
            values: acc.values().map(|(s, n)| s / *n as f64).collect(),
        }
    };
    Ok([curve(0), curve(1), curve(2)])
}

/// Empirical, smoothed and model contrasts along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastFit {
    pub axis: usize,
    pub slices: Vec<i64>,
    pub empirical: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub model: Vec<f64>,
}

impl ContrastFit {
    pub fn at(&self, delta: f64) -> Vec<f64> {
        self.empirical
            .iter()
            .zip(&self.model)
            .map(|(e, m)| (1.0 - delta) * e + delta * m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageResult {
    pub delta: f64,
    pub shrunk: DMatrix<f64>,
    /// Axes with at least four slices; shorter curves cannot be smoothed.
    pub curves: Vec<ContrastFit>,
    pub objective: f64,
}

/// `(1 - delta) emp + delta model`.
pub fn shrink(emp: &DMatrix<f64>, model: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    emp * (1.0 - delta) + model * delta
}

fn golden_section<F: Fn(f64) -> f64>(f: F, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Chooses `delta` in `[0, 1]` so the contrasts of the mixture best match the
/// spline-smoothed empirical contrasts.
pub fn select_delta(
    emp: &DMatrix<f64>,
    model: &DMatrix<f64>,
    coords: &[Coord],
    config: &ShrinkageConfig,
) -> Result<ShrinkageResult> {
    if emp.shape() != model.shape() {
        return Err(Error::SizeMismatch("empirical and model covariances differ in size".into()));
    }
    if !(0.0..=1.0).contains(&config.p) || !(config.delta_tol > 0.0) {
        return Err(Error::InvalidArgument("spline penalty must lie in [0, 1]".into()));
    }
    let ce = directional_contrasts(emp, coords)?;
    let cm = directional_contrasts(model, coords)?;
    let mut curves = Vec::new();
    for (e, m) in ce.into_iter().zip(cm) {
        if e.values.len() < 4 {
            continue;
        }
        let xs: Vec<f64> = e.slices.iter().map(|&s| s as f64).collect();
        let smoothed = smoothing_spline(&xs, &e.values, config.p)?;
        curves.push(ContrastFit {
            axis: e.axis,
            slices: e.slices,
            empirical: e.values,
            smoothed,
            model: m.values,
        });
    }
    if curves.is_empty() {
        return Err(Error::InvalidArgument(
            "no axis has four or more slices of adjacent voxel pairs".into(),
        ));
    }
    // Mismatch is |r - delta u|^2 with r = smooth - emp and u = model - emp.
    let (mut ru, mut uu) = (0.0, 0.0);
    for c in &curves {
        for i in 0..c.empirical.len() {
            let r = c.smoothed[i] - c.empirical[i];
            let u = c.model[i] - c.empirical[i];
            ru += r * u;
            uu += u * u;
        }
    }
    let objective = |delta: f64| {
        curves
            .iter()
            .flat_map(|c| {
                c.at(delta)
                    .into_iter()
                    .zip(&c.smoothed)
                    .map(|(a, s)| (s - a).powi(2))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
    };
    let closed = if uu > 0.0 { (ru / uu).clamp(0.0, 1.0) } else { 0.0 };
    let golden = golden_section(objective, config.delta_tol);
    let mut candidates = [0.0, closed, golden, 1.0];
    candidates.sort_by(f64::total_cmp);
    let values: Vec<f64> = candidates.iter().map(|&d| objective(d)).collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * (1.0 + best.abs());
    let pick = values.iter().position(|&v| v <= best + slack).expect("finite objective");
    let delta = candidates[pick];
    Ok(ShrinkageResult {
        delta,
        shrunk: shrink(emp, model, delta),
        curves,
        objective: values[pick],
    })
}
