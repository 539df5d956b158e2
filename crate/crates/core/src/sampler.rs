//! Reverse-time Euler–Maruyama sampling.
//!
//! Sample `i` owns the stream `indexed_stream(seed, "sampler", i)`: its first
//! `D` normals give the prior draw, then `D` normals per step give the
//! noise. Samples are therefore independent of how they are batched or
//! scheduled across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::rng::{self, Stream};
use crate::sde::SdeSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Defaults to `t_max`.
    pub t_start: Option<f64>,
    /// Defaults to `t_min`.
    pub t_end: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Times at which states are recorded; each snaps to the nearest grid time.
    #[serde(default)]
    pub record_times: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 1000,
            t_start: None,
            t_end: None,
            n_samples: 10_000,
            seed: 0,
            record_times: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn time_span(&self, sched: &SdeSchedule) -> (f64, f64) {
        (
            self.t_start.unwrap_or(sched.t_max),
            self.t_end.unwrap_or(sched.t_min),
        )
    }

    pub fn validate(&self, sched: &SdeSchedule) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("sampler.n_steps", "must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("sampler.n_samples", "must be >= 1"));
        }
        let (start, end) = self.time_span(sched);
        if !(start > end && end >= sched.t_min && start <= sched.t_max) {
            return Err(Error::invalid(
                "sampler.t_start",
                format!("need t_max >= t_start > t_end >= t_min, got {start} and {end}"),
            ));
        }
        Ok(())
    }

    /// `t_k = t_start − k (t_start − t_end) / n_steps`, `k = 0..=n_steps`.
    pub fn grid(&self, sched: &SdeSchedule) -> Vec<f64> {
        let (start, end) = self.time_span(sched);
        let h = (start - end) / self.n_steps as f64;
        (0..=self.n_steps)
            .map(|k| if k == self.n_steps { end } else { start - k as f64 * h })
            .collect()
    }
}

fn sample_stream(seed: u64, index: usize) -> Stream {
    rng::indexed_stream(seed, "sampler", index as u64)
}

/// Prior draws: `N(0, I)` for VP, `N(0, σ_max² I)` for VE.
pub fn prior_sample(sched: &SdeSchedule, dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let std = sched.prior_std();
    (0..n)
        .map(|i| {
            let mut r = sample_stream(seed, i);
            rng::normal_vec(&mut r, dim).into_iter().map(|z| std * z).collect()
        })
        .collect()
}

/// `x' = x − [f(x, t) − g(t)² s] dt + g(t) √dt · noise`.
pub fn reverse_step(x: &[f64], t: f64, dt: f64, score: &[f64], sched: &SdeSchedule, noise: &[f64]) -> Vec<f64> {
    let c = sched.drift_coeff(t);
    let g = sched.diffusion_unchecked(t);
    let g2 = g * g;
    let sd = g * dt.sqrt();
    x.iter()
        .zip(score)
        .zip(noise)
        .map(|((&xi, &si), &ni)| xi - (c * xi - g2 * si) * dt + sd * ni)
        .collect()
}

/// One recorded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub sample: usize,
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub samples: Vec<Vec<f64>>,
    /// Ordered by sample, then by decreasing time.
    pub trajectories: Vec<TrajectoryPoint>,
}

/// Samples integrated in lock step per chunk; the chunking only affects speed.
const CHUNK: usize = 256;

/// Integrates the reverse SDE from the prior at `t_start` down to `t_end`.
pub fn generate<F: ScoreField + ?Sized>(field: &F, sched: &SdeSchedule, cfg: &SamplerConfig) -> Result<Generated> {
    cfg.validate(sched)?;
    let d = field.dim();
    let grid = cfg.grid(sched);
    let record: Vec<usize> = {
        let mut steps: Vec<usize> = cfg
            .record_times
            .iter()
            .map(|&t| {
                (0..grid.len())
                    .min_by(|&a, &b| (grid[a] - t).abs().total_cmp(&(grid[b] - t).abs()))
                    .unwrap()
            })
            .collect();
        steps.sort_unstable();
        steps.dedup();
        steps
    };
    let starts: Vec<usize> = (0..cfg.n_samples).step_by(CHUNK).collect();
    let chunks: Vec<Result<(Vec<Vec<f64>>, Vec<TrajectoryPoint>)>> = starts
        .par_iter()
        .map(|&first| {
            let n = CHUNK.min(cfg.n_samples - first);
            run_chunk(field, sched, cfg.seed, first, n, d, &grid, &record)
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut trajectories = Vec::new();
    for c in chunks {
        let (s, tr) = c?;
        samples.extend(s);
        trajectories.extend(tr);
    }
    trajectories.sort_by_key(|p| p.sample);
    Ok(Generated { samples, trajectories })
}

#[allow(clippy::too_many_arguments)]
fn run_chunk<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    seed: u64,
    first: usize,
    n: usize,
    d: usize,
    grid: &[f64],
    record: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<TrajectoryPoint>)> {
    let std = sched.prior_std();
    let mut streams: Vec<Stream> = (0..n).map(|i| sample_stream(seed, first + i)).collect();
    let mut xs: Vec<f64> = streams
        .iter_mut()
        .flat_map(|r| rng::normal_vec(r, d).into_iter().map(|z| std * z))
        .collect();
    let mut traj = Vec::new();
    let mut keep = |k: usize, xs: &[f64]| {
        if record.binary_search(&k).is_ok() {
            for i in 0..n {
                traj.push(TrajectoryPoint {
                    sample: first + i,
                    t: grid[k],
                    x: xs[i * d..(i + 1) * d].to_vec(),
                });
            }
        }
    };
    keep(0, &xs);
    let mut ts = vec![0.0; n];
    for k in 0..grid.len() - 1 {
        let t = grid[k];
        let dt = t - grid[k + 1];
        ts.fill(t);
        let scores = field.score_batch(&xs, &ts);
        for i in 0..n {
            let noise = rng::normal_vec(&mut streams[i], d);
            let next = reverse_step(&xs[i * d..(i + 1) * d], t, dt, &scores[i * d..(i + 1) * d], sched, &noise);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState(k));
            }
            xs[i * d..(i + 1) * d].copy_from_slice(&next);
        }
        keep(k + 1, &xs);
    }
    Ok((xs.chunks(d).map(|c| c.to_vec()).collect(), traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ZeroField;
    use crate::objective::Estimate;

    #[test]
    fn prior_moments_and_determinism() {
        let vp = SdeSchedule::default();
        let xs = prior_sample(&vp, 2, 100_000, 3);
        for j in 0..2 {
            let sq: Vec<f64> = xs.iter().map(|x| x[j] * x[j]).collect();
            let e = Estimate::from_values(&sq);
            assert!((e.mean - 1.0).abs() < 4.0 * e.stderr, "{e:?}");
        }
        assert_eq!(xs[..10], prior_sample(&vp, 2, 10, 3)[..]);
        let ve = SdeSchedule::ve(0.01, 50.0);
        let ys = prior_sample(&ve, 1, 20_000, 3);
        let var = ys.iter().map(|y| y[0] * y[0]).sum::<f64>() / ys.len() as f64;
        assert!((var / 2500.0 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn reverse_step_examples() {
        let ve = SdeSchedule::ve(0.01, 50.0);
        // f = 0 for VE; with zero score and noise the state is frozen
        assert_eq!(reverse_step(&[1.0, 2.0], 0.3, 0.01, &[0.0, 0.0], &ve, &[0.0, 0.0]), vec![1.0, 2.0]);
        let vp = SdeSchedule::default();
        let (t, dt) = (0.4, 0.001);
        let x = [1.5, -0.5];
        let beta = vp.beta(t);
        let got = reverse_step(&x, t, dt, &[0.0, 0.0], &vp, &[0.0, 0.0]);
        for i in 0..2 {
            assert!((got[i] - (x[i] + 0.5 * beta * x[i] * dt)).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_shape() {
        let vp = SdeSchedule::default();
        let cfg = SamplerConfig {
            n_steps: 1,
            n_samples: 7,
            record_times: vec![1.0, 0.0],
            ..Default::default()
        };
        let out = generate(&ZeroField(3), &vp, &cfg).unwrap();
        assert_eq!(out.samples.len(), 7);
        assert!(out.samples.iter().all(|s| s.len() == 3));
        assert_eq!(out.trajectories.len(), 14);
        assert_eq!(out.trajectories[0].t, 1.0);
        assert_eq!(out.trajectories[1].t, vp.t_min);
    }

    #[test]
    fn generation_is_independent_of_chunking() {
        let vp = SdeSchedule::default();
        let cfg = SamplerConfig {
            n_steps: 5,
            n_samples: 300,
            seed: 9,
            ..Default::default()
        };
        let all = generate(&ZeroField(2), &vp, &cfg).unwrap();
        let few = generate(
            &ZeroField(2),
            &vp,
            &SamplerConfig {
                n_samples: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(all.samples[..3], few.samples[..]);
        assert_eq!(all, generate(&ZeroField(2), &vp, &cfg).unwrap());
    }

    #[test]
    fn invalid_span_is_rejected() {
        let vp = SdeSchedule::default();
        let cfg = SamplerConfig {
            t_start: Some(0.1),
            t_end: Some(0.2),
            ..Default::default()
        };
        assert!(generate(&ZeroField(2), &vp, &cfg).is_err());
    }
}
