//! Curves over noise levels and 2-D field dumps.
//!
//! Grid point `k` of every curve draws from `indexed_stream(seed, purpose, k)`,
//! so two fields evaluated with the same seed see the same `(x0, z, probes)`
//! draws (common random numbers) and a curve does not change when other grid
//! points are added or removed.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::objective::{self, Estimate, Estimator, FpOptions, Probes};
use crate::rng;
use crate::sde::SdeSchedule;
use crate::target::{marginal_at, GaussianMixture};

pub const DEFAULT_N_MC: usize = 256;
pub const DEFAULT_GRID_POINTS: usize = 40;

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(n >= 1 && lo > 0.0 && hi >= lo, "log grid needs 0 < lo <= hi");
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == n - 1 {
                hi
            } else {
                (a + (b - a) * k as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// The default 40-point grid on `[1e-4, 1]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(DEFAULT_GRID_POINTS, 1e-4, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_mc: usize,
}

impl CurvePoint {
    fn new(t: f64, e: Estimate) -> Self {
        CurvePoint {
            t,
            value: e.mean,
            stderr: e.stderr,
            n_mc: e.n,
        }
    }
}

fn point_seed(seed: u64, purpose: &str, k: usize) -> u64 {
    rng::indexed_stream(seed, purpose, k as u64).next_u64()
}

fn check_grid(sched: &SdeSchedule, grid: &[f64]) -> Result<()> {
    for &t in grid {
        if !(t >= sched.t_min && t <= sched.t_max) {
            return Err(Error::TimeRange {
                t,
                lo: sched.t_min,
                hi: sched.t_max,
            });
        }
    }
    Ok(())
}

fn curve<G>(sched: &SdeSchedule, grid: &[f64], seed: u64, purpose: &str, eval: G) -> Result<Vec<CurvePoint>>
where
    G: Fn(f64, u64) -> Estimate + Sync,
{
    check_grid(sched, grid)?;
    Ok(grid
        .par_iter()
        .enumerate()
        .map(|(k, &t)| CurvePoint::new(t, eval(t, point_seed(seed, purpose, k))))
        .collect())
}

/// `r_FP(t)` on a grid.
pub fn curve_rfp<F: ScoreField + ?Sized>(
    field: &F,
    target: &GaussianMixture,
    sched: &SdeSchedule,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
    opts: &FpOptions,
) -> Result<Vec<CurvePoint>> {
    curve(sched, grid, seed, "curve-rfp", |t, s| {
        objective::residual_rfp(field, target, sched, t, n_mc, s, opts)
    })
}

/// Conditional DSM loss `E‖σ(t) s(x_t, t) + z‖²` at each fixed `t`.
pub fn curve_dsm<F: ScoreField + ?Sized>(
    field: &F,
    target: &GaussianMixture,
    sched: &SdeSchedule,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    curve(sched, grid, seed, "curve-dsm", |t, s| {
        let mut r = rng::stream(s, "dsm");
        let sigma = sched.sigma(t);
        let draws = objective::draws_at(target, sched, t, n_mc, &mut r);
        let values: Vec<f64> = draws
            .iter()
            .map(|(xt, z)| {
                let sc = field.score(xt, t);
                sc.iter().zip(z).map(|(a, b)| (sigma * a + b).powi(2)).sum()
            })
            .collect();
        Estimate::from_values(&values)
    })
}

/// Mean Frobenius-norm estimate `c Σ_k ‖v_kᵀ J‖²` at each `t`.
#[allow(clippy::too_many_arguments)]
pub fn curve_frobenius<F: ScoreField + ?Sized>(
    field: &F,
    target: &GaussianMixture,
    sched: &SdeSchedule,
    grid: &[f64],
    n_mc: usize,
    estimator: Estimator,
    probes: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let d = target.dim();
    curve(sched, grid, seed, "curve-frob", |t, s| {
        let mut r = rng::stream(s, "frob");
        let draws = objective::draws_at(target, sched, t, n_mc, &mut r);
        let values: Vec<f64> = draws
            .iter()
            .map(|(xt, _)| {
                let p = Probes::draw(estimator, probes, d, &mut r);
                objective::hutchinson_frob(field, xt, t, &p)
            })
            .collect();
        Estimate::from_values(&values)
    })
}

/// RMS of `‖s − ∇log p_t‖ / √D` against the exact mixture score.
pub fn score_error<F: ScoreField + ?Sized>(
    field: &F,
    target: &GaussianMixture,
    sched: &SdeSchedule,
    grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let d = target.dim() as f64;
    curve(sched, grid, seed, "curve-score-error", |t, s| {
        let mut r = rng::stream(s, "score-error");
        let marginal = marginal_at(target, sched, t).expect("t checked against the schedule");
        let draws = objective::draws_at(target, sched, t, n_mc, &mut r);
        let sq: Vec<f64> = draws
            .iter()
            .map(|(xt, _)| {
                let a = field.score(xt, t);
                let b = marginal.exact_score(xt);
                a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / d
            })
            .collect();
        let ms = Estimate::from_values(&sq);
        let rmse = ms.mean.sqrt();
        // delta method for the square root
        let stderr = if rmse > 0.0 { ms.stderr / (2.0 * rmse) } else { 0.0 };
        Estimate {
            mean: rmse,
            stderr,
            n: ms.n,
        }
    })
}

/// Rectangular grid `nx × ny` over `[x_min, x_max] × [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_min: -4.0,
            x_max: 4.0,
            y_min: -4.0,
            y_max: 4.0,
            nx: 41,
            ny: 41,
        }
    }
}

impl GridSpec {
    pub fn points(&self) -> Vec<[f64; 2]> {
        let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            if n == 1 {
                return vec![lo];
            }
            (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
        };
        let xs = axis(self.x_min, self.x_max, self.nx);
        let ys = axis(self.y_min, self.y_max, self.ny);
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::invalid("grid", "nx and ny must be >= 1"));
        }
        if !(self.x_max >= self.x_min && self.y_max >= self.y_min) {
            return Err(Error::invalid("grid", "need x_min <= x_max and y_min <= y_max"));
        }
        Ok(())
    }
}

/// One field-dump row. `d_i = ∂s_i/∂x_i`; scaled columns are `σ s_i` and `σ² d_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub x1: f64,
    pub x2: f64,
    pub t: f64,
    pub s1: f64,
    pub s2: f64,
    pub d1: f64,
    pub d2: f64,
    pub s1_scaled: f64,
    pub s2_scaled: f64,
    pub d1_scaled: f64,
    pub d2_scaled: f64,
}

impl FieldRow {
    pub const HEADER: [&'static str; 11] = [
        "x1", "x2", "t", "s1", "s2", "d1", "d2", "s1_scaled", "s2_scaled", "d1_scaled", "d2_scaled",
    ];

    pub fn values(&self) -> [f64; 11] {
        [
            self.x1,
            self.x2,
            self.t,
            self.s1,
            self.s2,
            self.d1,
            self.d2,
            self.s1_scaled,
            self.s2_scaled,
            self.d1_scaled,
            self.d2_scaled,
        ]
    }
}

/// Score vectors and per-coordinate divergence contributions on a 2-D grid.
pub fn score_field_dump<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    times: &[f64],
    grid: &GridSpec,
) -> Result<Vec<FieldRow>> {
    if field.dim() != 2 {
        return Err(Error::UnsupportedDim(field.dim()));
    }
    grid.validate()?;
    check_grid(sched, times)?;
    let points = grid.points();
    let mut rows = Vec::with_capacity(times.len() * points.len());
    for &t in times {
        let sigma = sched.sigma(t);
        let block: Vec<FieldRow> = points
            .par_iter()
            .map(|p| {
                let s = field.score(p, t);
                let d1 = field.jvp_x(p, t, &[1.0, 0.0])[0];
                let d2 = field.jvp_x(p, t, &[0.0, 1.0])[1];
                FieldRow {
                    x1: p[0],
                    x2: p[1],
                    t,
                    s1: s[0],
                    s2: s[1],
                    d1,
                    d2,
                    s1_scaled: sigma * s[0],
                    s2_scaled: sigma * s[1],
                    d1_scaled: sigma * sigma * d1,
                    d2_scaled: sigma * sigma * d2,
                }
            })
            .collect();
        rows.extend(block);
    }
    Ok(rows)
}
