//! Nelder–Mead simplex minimisation with restarts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopping rules for [`nelder_mead`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplexConfig {
    /// Convergence when every vertex lies within `x_tol` of the best one (max norm).
    pub x_tol: f64,
    /// ... and every vertex value lies within `f_tol` of the best value.
    pub f_tol: f64,
    /// Iteration budget for each run (the initial run and each restart).
    pub max_iter: usize,
    /// Number of fresh-simplex restarts from the incumbent minimum.
    pub restart_count: usize,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            x_tol: 1e-6,
            f_tol: 1e-8,
            max_iter: 2000,
            restart_count: 2,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_tol > 0.0 && self.f_tol > 0.0 && self.max_iter > 0) {
            return Err(Error::InvalidArgument(
                "simplex tolerances and iteration budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of a minimisation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub x_min: Vec<f64>,
    pub f_min: f64,
    pub evaluations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

fn initial_simplex(x0: &[f64]) -> Vec<Vec<f64>> {
    let mut simplex = Vec::with_capacity(x0.len() + 1);
    simplex.push(x0.to_vec());
    for i in 0..x0.len() {
        let mut v = x0.to_vec();
        v[i] = if x0[i] == 0.0 { 0.05 } else { 1.05 * x0[i] };
        simplex.push(v);
    }
    simplex
}

struct Run {
    x: Vec<f64>,
    f: f64,
    evaluations: usize,
    converged: bool,
}

fn run_once<F>(objective: &mut F, x0: &[f64], f0: f64, config: &SimplexConfig) -> Run
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = objective(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evaluations = 0;
    let mut simplex = initial_simplex(x0);
    let mut values = Vec::with_capacity(n + 1);
    values.push(f0);
    for v in simplex.iter().skip(1) {
        values.push(eval(v, &mut evaluations));
    }
    let mut order: Vec<usize> = (0..=n).collect();
    let mut converged = false;

    for _ in 0..config.max_iter {
        // Stable sort keeps the earliest vertex first among ties.
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n.saturating_sub(1)];

        let x_spread = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[best]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        let f_spread = values
            .iter()
            .map(|v| (v - values[best]).abs())
            .fold(0.0_f64, f64::max);
        if x_spread <= config.x_tol && f_spread <= config.f_tol {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for &idx in order.iter().take(n) {
            for (c, v) in centroid.iter_mut().zip(&simplex[idx]) {
                *c += v / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let xr = along(REFLECT);
        let fr = eval(&xr, &mut evaluations);
        if fr < values[best] {
            let xe = along(REFLECT * EXPAND);
            let fe = eval(&xe, &mut evaluations);
            if fe < fr {
                simplex[worst] = xe;
                values[worst] = fe;
            } else {
                simplex[worst] = xr;
                values[worst] = fr;
            }
            continue;
        }
        if fr < values[second_worst] {
            simplex[worst] = xr;
            values[worst] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[worst] {
            let xc = along(REFLECT * CONTRACT);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        } else {
            let xc = along(-CONTRACT);
            let fc = eval(&xc, &mut evaluations);
            (xc, fc)
        };
        if fc < values[worst].min(fr) {
            simplex[worst] = xc;
            values[worst] = fc;
            continue;
        }
        let anchor = simplex[best].clone();
        for &idx in order.iter().skip(1) {
            let shrunk: Vec<f64> = anchor
                .iter()
                .zip(&simplex[idx])
                .map(|(a, v)| a + SHRINK * (v - a))
                .collect();
            values[idx] = eval(&shrunk, &mut evaluations);
            simplex[idx] = shrunk;
        }
    }

    let best = (0..=n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    Run {
        x: simplex.swap_remove(best),
        f: values[best],
        evaluations,
        converged,
    }
}

/// Minimise `objective` starting from `x0`.
///
/// Non-finite objective values away from `x0` are treated as `+inf`, so the
/// objective may encode infeasible regions that way. After the first run
/// converges (or exhausts its budget) the search restarts `restart_count`
/// times from the incumbent with a fresh simplex.
pub fn nelder_mead<F>(mut objective: F, x0: &[f64], config: &SimplexConfig) -> Result<SimplexResult>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if x0.is_empty() {
        return Err(Error::InvalidArgument("empty starting point".into()));
    }
    let f0 = objective(x0);
    if !f0.is_finite() {
        return Err(Error::Optimizer(format!(
            "objective is not finite at the starting point ({f0})"
        )));
    }
    let mut x = x0.to_vec();
    let mut f = f0;
    let mut evaluations = 1;
    let mut converged = false;
    for _ in 0..=config.restart_count {
        let run = run_once(&mut objective, &x, f, config);
        evaluations += run.evaluations;
        converged = run.converged;
        if run.f <= f {
            x = run.x;
            f = run.f;
        }
    }
    Ok(SimplexResult {
        x_min: x,
        f_min: f,
        evaluations,
        converged,
    })
}
