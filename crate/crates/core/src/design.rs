//! Canonical double-gamma HRF, BOLD regressors and the temporal design matrix.

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use crate::dataset::BlockDesign;
use crate::error::{Error, Result};

/// Double-gamma haemodynamic response parameters (seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrfSpec {
    pub peak_shape: f64,
    pub undershoot_shape: f64,
    pub peak_scale: f64,
    pub undershoot_scale: f64,
    pub undershoot_ratio: f64,
    pub support_seconds: f64,
}

impl Default for HrfSpec {
    fn default() -> Self {
        Self {
            peak_shape: 6.0,
            undershoot_shape: 16.0,
            peak_scale: 1.0,
            undershoot_scale: 1.0,
            undershoot_ratio: 1.0 / 6.0,
            support_seconds: 32.0,
        }
    }
}

fn gamma_density(t: f64, shape: f64, scale: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1.0) * t.ln() - t / scale - ln_gamma(shape) - shape * scale.ln()).exp()
}

/// HRF sampled at `0, tr, 2 tr, ...` up to the support, scaled to unit maximum.
pub fn canonical_hrf(tr_seconds: f64, spec: &HrfSpec) -> Vec<f64> {
    assert!(tr_seconds > 0.0, "tr_seconds must be positive");
    let n = (spec.support_seconds / tr_seconds).floor() as usize + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * tr_seconds;
            gamma_density(t, spec.peak_shape, spec.peak_scale)
                - spec.undershoot_ratio * gamma_density(t, spec.undershoot_shape, spec.undershoot_scale)
        })
        .collect();
    let peak = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        h.iter_mut().for_each(|v| *v /= peak);
    }
    h
}

/// Causal convolution `x(t) = sum_{k=0}^{t-1} h(k) s(t-k)` truncated to `T` samples.
pub fn bold_regressor(h: &[f64], s: &[f64]) -> Vec<f64> {
    (0..s.len())
        .map(|t| {
            h.iter()
                .take(t + 1)
                .enumerate()
                .map(|(k, hk)| hk * s[t - k])
                .sum()
        })
        .collect()
}

/// Column roles of the design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignLayout {
    pub n_sessions: usize,
}

impl DesignLayout {
    pub fn n_cols(&self) -> usize {
        self.n_sessions + 4
    }
    /// Columns held fixed when re-estimating the stimulus effects.
    pub fn n_fixed(&self) -> usize {
        self.n_sessions + 2
    }
    pub fn time_col(&self) -> usize {
        self.n_sessions + 1
    }
    pub fn task_col(&self) -> usize {
        self.n_sessions + 2
    }
    pub fn rest_col(&self) -> usize {
        self.n_sessions + 3
    }
}

/// `T x (J+4)` design: intercept, `J` session indicators (last session is
/// the baseline), within-session time in `[0, 1)`, task and rest BOLD regressors.
pub fn design_matrix(design: &BlockDesign, hrf: &[f64]) -> Result<DMatrix<f64>> {
    design.validate()?;
    let t_len = design.n_scans;
    let j = design.sessions.len() - 1;
    let layout = DesignLayout { n_sessions: j };
    let task: Vec<f64> = design.task.iter().map(|&s| s as f64).collect();
    let rest: Vec<f64> = design.rest().iter().map(|&s| s as f64).collect();
    let x1 = bold_regressor(hrf, &task);
    let x2 = bold_regressor(hrf, &rest);

    let mut x = DMatrix::zeros(t_len, layout.n_cols());
    for (s, &(a, b)) in design.sessions.iter().enumerate() {
        let len = (b - a + 1) as f64;
        for t in a..=b {
            let row = t - 1;
            x[(row, 0)] = 1.0;
            if s < j {
                x[(row, 1 + s)] = 1.0;
            }
            x[(row, layout.time_col())] = (t - a) as f64 / len;
        }
    }
    for t in 0..t_len {
        x[(t, layout.task_col())] = x1[t];
        x[(t, layout.rest_col())] = x2[t];
    }

    let rank = numerical_rank(&x);
    if rank < x.ncols() {
        return Err(Error::RankDeficient {
            rank,
            cols: x.ncols(),
        });
    }
    Ok(x)
}

pub(crate) fn numerical_rank(x: &DMatrix<f64>) -> usize {
    // Column-normalise so the tolerance is scale free.
    let mut xn = x.clone();
    for mut c in xn.column_iter_mut() {
        let norm = c.norm();
        if norm > 0.0 {
            c /= norm;
        }
    }
    let sv = xn.svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > smax * 1e-10).count()
}
