//! Training objective and Fokker–Planck quantities.
//!
//! For a score field `s` under `dx = f dt + g dw` with `f = c(t)·x`:
//!
//! ```text
//! L_DSM      = E ‖σ(t) s(x_t, t) + z‖²
//! L[s](x,t)  = ½g² div s + ½g² ‖s‖² − ⟨f, s⟩ − div f
//! ε[s](x,t)  = ∂_t s − ∇_x L[s]
//! r_FP(t)    = (1/D) E ‖ε‖²
//! P_FP       = (1/D) E ‖ε‖        P_SN  = (1/D) E ‖s‖²
//! P_JAC      = (1/D) E ‖∇_x s‖²_F  P_DIV = (1/D) E (div s)²
//! ```
//!
//! Divergences and Frobenius norms are estimated from probe vectors:
//! `div ≈ c Σ_k v_kᵀ J v_k` and `‖J‖²_F ≈ c Σ_k ‖v_kᵀ J‖²`, with Gaussian
//! probes and `c = 1/K` (Hutchinson), or unit vectors and `c = 1` (exact).
//! In exact gradient mode
//!
//! ```text
//! ∇_x L = ½g² c Σ_k ∇_x(v_kᵀ J v_k) + g² Jᵀ s − c(t) (s + Jᵀ x).
//! ```

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::net::{Jet, JetLayout, ScoreNet, Tangent};
use crate::rng;
use crate::sde::SdeSchedule;
use crate::target::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    None,
    Fp,
    Sn,
    Jac,
    Div,
}

impl Penalty {
    pub const ALL: [Penalty; 4] = [Penalty::Fp, Penalty::Sn, Penalty::Jac, Penalty::Div];

    pub fn name(&self) -> &'static str {
        match self {
            Penalty::None => "none",
            Penalty::Fp => "fp",
            Penalty::Sn => "sn",
            Penalty::Jac => "jac",
            Penalty::Div => "div",
        }
    }
}

/// How `∇_x L` is obtained inside the FP error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    Exact,
    FiniteDifference,
}

/// Probe family for divergence and Frobenius estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Hutchinson,
    Exact,
}

/// Norm used by the FP penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpNorm {
    /// `‖ε‖₂`
    Unsquared,
    /// `‖ε‖₂²`
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub penalty: Penalty,
    pub lambda: f64,
    pub probes: usize,
    pub estimator: Estimator,
    pub grad_mode: GradMode,
    pub fd_step_x: f64,
    pub fp_norm: FpNorm,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self::baseline()
    }
}

impl ObjectiveSpec {
    pub fn baseline() -> Self {
        ObjectiveSpec {
            penalty: Penalty::None,
            lambda: 0.0,
            probes: 1,
            estimator: Estimator::Hutchinson,
            grad_mode: GradMode::Exact,
            fd_step_x: 1e-4,
            fp_norm: FpNorm::Unsquared,
        }
    }

    pub fn with_penalty(penalty: Penalty, lambda: f64) -> Self {
        let lambda = if penalty == Penalty::None { 0.0 } else { lambda };
        ObjectiveSpec {
            penalty,
            lambda,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("objective.lambda", "must be finite and >= 0"));
        }
        if self.penalty == Penalty::None && self.lambda != 0.0 {
            return Err(Error::invalid(
                "objective.lambda",
                "must be 0 when penalty is none",
            ));
        }
        if self.probes == 0 {
            return Err(Error::invalid("objective.probes", "must be >= 1"));
        }
        if !(self.fd_step_x > 0.0) {
            return Err(Error::invalid("objective.fd_step_x", "must be > 0"));
        }
        Ok(())
    }
}

/// Probe vectors with their estimator scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Probes {
    pub vectors: Vec<Vec<f64>>,
    pub scale: f64,
}

impl Probes {
    pub fn hutchinson(vectors: Vec<Vec<f64>>) -> Self {
        assert!(!vectors.is_empty(), "at least one probe");
        let scale = 1.0 / vectors.len() as f64;
        Probes { vectors, scale }
    }

    /// Unit vectors: the estimates become exact traces.
    pub fn exact(dim: usize) -> Self {
        let vectors = (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Probes { vectors, scale: 1.0 }
    }

    pub fn draw<R: Rng + ?Sized>(estimator: Estimator, k: usize, dim: usize, rng: &mut R) -> Self {
        match estimator {
            Estimator::Hutchinson => {
                Self::hutchinson((0..k).map(|_| rng::normal_vec(rng, dim)).collect())
            }
            Estimator::Exact => Self::exact(dim),
        }
    }
}

/// One `(x0, t, z)` draw with its perturbed point and probes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSample {
    pub x0: Vec<f64>,
    pub t: f64,
    pub z: Vec<f64>,
    pub xt: Vec<f64>,
    pub sigma: f64,
    pub probes: Probes,
}

impl BatchSample {
    pub fn new(sched: &SdeSchedule, x0: Vec<f64>, t: f64, z: Vec<f64>, probes: Probes) -> Result<Self> {
        let xt = sched.perturb(&x0, t, &z)?;
        let sigma = sched.kernel_params(t)?.1;
        Ok(BatchSample {
            x0,
            t,
            z,
            xt,
            sigma,
            probes,
        })
    }
}

/// Draws a training batch: `x0` from the target, `t ~ U[t_min, t_max]`,
/// `z ~ N(0, I)`, fresh probes per element.
pub fn draw_batch<R: Rng + ?Sized>(
    target: &GaussianMixture,
    sched: &SdeSchedule,
    spec: &ObjectiveSpec,
    n: usize,
    rng: &mut R,
) -> Vec<BatchSample> {
    let d = target.dim();
    let x0s = target.sample(n, rng);
    x0s.into_iter()
        .map(|x0| {
            let t = sched.t_min + (sched.t_max - sched.t_min) * rng.random::<f64>();
            let z = rng::normal_vec(rng, d);
            let probes = Probes::draw(spec.estimator, spec.probes, d, rng);
            BatchSample::new(sched, x0, t, z, probes).expect("t drawn inside the schedule range")
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Mean of `‖σ(t) s(x_t, t) + z‖²` over the batch.
pub fn loss_dsm<F: ScoreField + ?Sized>(field: &F, batch: &[BatchSample]) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let sum: f64 = batch
        .iter()
        .map(|b| {
            let s = field.score(&b.xt, b.t);
            s.iter()
                .zip(&b.z)
                .map(|(si, zi)| (b.sigma * si + zi).powi(2))
                .sum::<f64>()
        })
        .sum();
    sum / batch.len() as f64
}

/// `c Σ_k v_kᵀ J v_k`.
pub fn hutchinson_div<F: ScoreField + ?Sized>(field: &F, x: &[f64], t: f64, probes: &Probes) -> f64 {
    probes.scale
        * probes
            .vectors
            .iter()
            .map(|v| dot(v, &field.jvp_x(x, t, v)))
            .sum::<f64>()
}

/// `c Σ_k ‖v_kᵀ J‖²`, each row product by a reverse pass.
pub fn hutchinson_frob<F: ScoreField + ?Sized>(field: &F, x: &[f64], t: f64, probes: &Probes) -> f64 {
    probes.scale
        * probes
            .vectors
            .iter()
            .map(|v| norm_sq(&field.vjp_x(x, t, v)))
            .sum::<f64>()
}

/// `L[s](x, t)` with the divergence estimated from `probes`.
pub fn operator_l<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    x: &[f64],
    t: f64,
    probes: &Probes,
) -> f64 {
    let g2 = sched.diffusion_unchecked(t).powi(2);
    let c = sched.drift_coeff(t);
    let s = field.score(x, t);
    let div = hutchinson_div(field, x, t, probes);
    0.5 * g2 * div + 0.5 * g2 * norm_sq(&s) - c * dot(x, &s) - sched.drift_divergence(x.len(), t)
}

/// `∇_x L[s]` from closed-form derivative rules.
pub fn grad_operator_l<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    x: &[f64],
    t: f64,
    probes: &Probes,
) -> Vec<f64> {
    let d = x.len();
    let g2 = sched.diffusion_unchecked(t).powi(2);
    let c = sched.drift_coeff(t);
    let s = field.score(x, t);
    let jac = field.jacobian(x, t);
    let mut out = vec![0.0; d];
    for v in &probes.vectors {
        for (o, q) in out.iter_mut().zip(field.grad_quadratic(x, t, v)) {
            *o += 0.5 * g2 * probes.scale * q;
        }
    }
    for j in 0..d {
        // (Jᵀ w)_j = Σ_i J_ij w_i
        let (mut jts, mut jtx) = (0.0, 0.0);
        for i in 0..d {
            jts += jac[i * d + j] * s[i];
            jtx += jac[i * d + j] * x[i];
        }
        out[j] += g2 * jts - c * (s[j] + jtx);
    }
    out
}

/// `∇_x L[s]` by central differences of [`operator_l`] with fixed probes.
pub fn grad_operator_l_fd<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    x: &[f64],
    t: f64,
    probes: &Probes,
    step: f64,
) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += step;
            lo[i] -= step;
            (operator_l(field, sched, &hi, t, probes) - operator_l(field, sched, &lo, t, probes))
                / (2.0 * step)
        })
        .collect()
}

/// Largest dimension for which finite-difference `∇_x L` runs without a cost warning.
pub const FD_DIM_WARN: usize = 32;

/// `ε = ∂_t s − ∇_x L[s]`.
pub fn fp_error<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    x: &[f64],
    t: f64,
    probes: &Probes,
    mode: GradMode,
    fd_step: f64,
) -> Vec<f64> {
    let dt = field.dt_score(x, t);
    let grad = match mode {
        GradMode::Exact => grad_operator_l(field, sched, x, t, probes),
        GradMode::FiniteDifference => {
            if x.len() > FD_DIM_WARN {
                log::warn!(
                    "finite-difference FP error in D = {} costs {} operator evaluations per point",
                    x.len(),
                    2 * x.len()
                );
            }
            grad_operator_l_fd(field, sched, x, t, probes, fd_step)
        }
    };
    dt.iter().zip(&grad).map(|(a, b)| a - b).collect()
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr, n }
    }
}

/// Options shared by the FP residual estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpOptions {
    pub estimator: Estimator,
    pub probes: usize,
    pub grad_mode: GradMode,
    pub fd_step_x: f64,
}

impl Default for FpOptions {
    fn default() -> Self {
        FpOptions {
            estimator: Estimator::Exact,
            probes: 1,
            grad_mode: GradMode::Exact,
            fd_step_x: 1e-4,
        }
    }
}

/// Draws `(x0, z)` pairs at a fixed `t` and returns the perturbed points.
pub(crate) fn draws_at<R: Rng + ?Sized>(
    target: &GaussianMixture,
    sched: &SdeSchedule,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (alpha, sigma) = sched.kernel_unchecked(t);
    let d = target.dim();
    target
        .sample(n, rng)
        .into_iter()
        .map(|x0| {
            let z = rng::normal_vec(rng, d);
            let xt = x0.iter().zip(&z).map(|(a, b)| alpha * a + sigma * b).collect();
            (xt, z)
        })
        .collect()
}

/// `r_FP(t) = (1/D) E‖ε‖²` over `n_mc` draws `x0 ~ target`, `x_t ~ kernel`.
pub fn residual_rfp<F: ScoreField + ?Sized>(
    field: &F,
    target: &GaussianMixture,
    sched: &SdeSchedule,
    t: f64,
    n_mc: usize,
    seed: u64,
    opts: &FpOptions,
) -> Estimate {
    assert!(n_mc >= 1, "n_mc must be >= 1");
    let d = target.dim();
    let mut r = rng::stream(seed, "rfp");
    let draws = draws_at(target, sched, t, n_mc, &mut r);
    let probes: Vec<Probes> = (0..n_mc)
        .map(|_| Probes::draw(opts.estimator, opts.probes, d, &mut r))
        .collect();
    let values: Vec<f64> = draws
        .par_iter()
        .zip(probes.par_iter())
        .map(|((xt, _), p)| {
            let eps = fp_error(field, sched, xt, t, p, opts.grad_mode, opts.fd_step_x);
            norm_sq(&eps) / d as f64
        })
        .collect();
    Estimate::from_values(&values)
}

/// Penalty value on a batch (without `λ`).
pub fn penalty<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    batch: &[BatchSample],
    spec: &ObjectiveSpec,
) -> f64 {
    assert!(!batch.is_empty(), "empty batch");
    let d = field.dim() as f64;
    let per: Vec<f64> = batch
        .iter()
        .map(|b| match spec.penalty {
            Penalty::None => 0.0,
            Penalty::Sn => norm_sq(&field.score(&b.xt, b.t)),
            Penalty::Div => hutchinson_div(field, &b.xt, b.t, &b.probes).powi(2),
            Penalty::Jac => hutchinson_frob(field, &b.xt, b.t, &b.probes),
            Penalty::Fp => {
                let eps = fp_error(field, sched, &b.xt, b.t, &b.probes, spec.grad_mode, spec.fd_step_x);
                match spec.fp_norm {
                    FpNorm::Unsquared => norm_sq(&eps).sqrt(),
                    FpNorm::Squared => norm_sq(&eps),
                }
            }
        })
        .collect();
    per.iter().sum::<f64>() / (d * batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub dsm: f64,
    pub penalty: f64,
    pub total: f64,
}

/// `L_DSM + λ P`.
pub fn total_loss<F: ScoreField + ?Sized>(
    field: &F,
    sched: &SdeSchedule,
    batch: &[BatchSample],
    spec: &ObjectiveSpec,
) -> LossParts {
    let dsm = loss_dsm(field, batch);
    if spec.penalty == Penalty::None {
        return LossParts {
            dsm,
            penalty: 0.0,
            total: dsm,
        };
    }
    let p = penalty(field, sched, batch, spec);
    LossParts {
        dsm,
        penalty: p,
        total: dsm + spec.lambda * p,
    }
}

/// Fixed chunking of a batch for parallel gradient evaluation; the partition
/// does not depend on the thread count, so reductions are reproducible.
pub const GRAD_CHUNK: usize = 16;

/// Loss parts and `∂(L_DSM + λP)/∂θ` for the network, by reverse-over-forward
/// differentiation of the per-sample jets.
pub fn loss_and_grad(
    net: &ScoreNet,
    sched: &SdeSchedule,
    batch: &[BatchSample],
    spec: &ObjectiveSpec,
) -> Result<(LossParts, Vec<f64>)> {
    if spec.penalty == Penalty::Fp && spec.grad_mode == GradMode::FiniteDifference {
        return Err(Error::invalid(
            "objective.grad_mode",
            "finite_difference is a diagnostic cross-check and cannot be trained",
        ));
    }
    assert!(!batch.is_empty(), "empty batch");
    let n = batch.len() as f64;
    let parts: Vec<(f64, f64, Vec<f64>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| chunk_loss_and_grad(net, sched, chunk, spec, n))
        .collect();
    let mut grad = vec![0.0; net.params().len()];
    let (mut dsm, mut pen) = (0.0, 0.0);
    for (d, p, g) in parts {
        dsm += d;
        pen += p;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let dsm = dsm / n;
    let pen = pen / n;
    let total = if spec.penalty == Penalty::None {
        dsm
    } else {
        dsm + spec.lambda * pen
    };
    Ok((
        LossParts {
            dsm,
            penalty: pen,
            total,
        },
        grad,
    ))
}

/// Returns the chunk's summed DSM and penalty values and the gradient of
/// `(Σ DSM + λ Σ P) / n_total`.
fn chunk_loss_and_grad(
    net: &ScoreNet,
    sched: &SdeSchedule,
    chunk: &[BatchSample],
    spec: &ObjectiveSpec,
    n_total: f64,
) -> (f64, f64, Vec<f64>) {
    let d = net.data_dim();
    let bsz = chunk.len();
    let n_probe = chunk[0].probes.vectors.len();
    let xs: Vec<f64> = chunk.iter().flat_map(|b| b.xt.iter().copied()).collect();
    let ts: Vec<f64> = chunk.iter().map(|b| b.t).collect();

    let unit_x = |i: usize| -> Tangent {
        let mut x = vec![0.0; bsz * d];
        for b in 0..bsz {
            x[b * d + i] = 1.0;
        }
        Tangent { x, t: Vec::new() }
    };
    let probe_x = |k: usize| -> Tangent {
        Tangent {
            x: chunk.iter().flat_map(|b| b.probes.vectors[k].iter().copied()).collect(),
            t: Vec::new(),
        }
    };

    // component layout per penalty
    let (layout, tangents) = match spec.penalty {
        Penalty::None | Penalty::Sn => (JetLayout::value_only(), Vec::new()),
        Penalty::Div => (
            JetLayout::first_order(n_probe),
            (0..n_probe).map(probe_x).collect(),
        ),
        Penalty::Jac => (JetLayout::first_order(d), (0..d).map(unit_x).collect()),
        Penalty::Fp => {
            // dirs: t, probes 1..=K, units K+1..=K+D; pairs (probe k, unit i)
            let mut tangents = vec![Tangent {
                x: Vec::new(),
                t: vec![1.0; bsz],
            }];
            tangents.extend((0..n_probe).map(probe_x));
            tangents.extend((0..d).map(unit_x));
            let mut pairs = Vec::with_capacity(n_probe * d);
            for k in 0..n_probe {
                for i in 0..d {
                    pairs.push((1 + k, 1 + n_probe + i));
                }
            }
            (
                JetLayout {
                    n_dirs: 1 + n_probe + d,
                    pairs,
                },
                tangents,
            )
        }
    };

    let input = net.input_jet(&xs, &ts, layout, &tangents);
    let lambda = spec.lambda;
    let mut dsm_sum = 0.0;
    let mut pen_sum = 0.0;
    let (_, grad) = net.grad_params(input, |out| {
        let mut bar = Jet::zeros_like(out);
        let df = d as f64;
        let w_pen = lambda / (df * n_total);
        for (b, smp) in chunk.iter().enumerate() {
            let s = out.row(0, b).to_vec();
            let mut s_bar = vec![0.0; d];
            for i in 0..d {
                let r = smp.sigma * s[i] + smp.z[i];
                dsm_sum += r * r;
                s_bar[i] += 2.0 * smp.sigma * r / n_total;
            }
            let scale = smp.probes.scale;
            match spec.penalty {
                Penalty::None => {}
                Penalty::Sn => {
                    pen_sum += norm_sq(&s);
                    for i in 0..d {
                        s_bar[i] += w_pen * 2.0 * s[i];
                    }
                }
                Penalty::Div => {
                    let div: f64 = scale
                        * (0..n_probe)
                            .map(|k| dot(&smp.probes.vectors[k], out.row(1 + k, b)))
                            .sum::<f64>();
                    pen_sum += div * div;
                    for k in 0..n_probe {
                        let c = w_pen * 2.0 * div * scale;
                        for (o, v) in bar.row_mut(1 + k, b).iter_mut().zip(&smp.probes.vectors[k]) {
                            *o += c * v;
                        }
                    }
                }
                Penalty::Jac => {
                    // ‖v_kᵀ J‖² = Σ_i ⟨v_k, J e_i⟩²
                    for i in 0..d {
                        let col = out.row(1 + i, b).to_vec();
                        let row = bar.row_mut(1 + i, b);
                        for v in &smp.probes.vectors {
                            let q = dot(v, &col);
                            pen_sum += scale * q * q;
                            for (o, vj) in row.iter_mut().zip(v) {
                                *o += w_pen * scale * 2.0 * q * vj;
                            }
                        }
                    }
                }
                Penalty::Fp => {
                    let t = smp.t;
                    let g2 = sched.diffusion_unchecked(t).powi(2);
                    let c = sched.drift_coeff(t);
                    let unit = |i: usize| out.layout.dir(1 + n_probe + i);
                    let pair = |k: usize, i: usize| out.layout.pair(k * d + i);
                    let x = &smp.xt;
                    let dt = out.row(out.layout.dir(0), b);
                    let mut eps = vec![0.0; d];
                    for i in 0..d {
                        let col = out.row(unit(i), b);
                        let mut quad = 0.0;
                        for (k, v) in smp.probes.vectors.iter().enumerate() {
                            quad += dot(v, out.row(pair(k, i), b));
                        }
                        let grad_l = 0.5 * g2 * scale * quad + g2 * dot(&s, col)
                            - c * (s[i] + dot(x, col));
                        eps[i] = dt[i] - grad_l;
                    }
                    let nrm2 = norm_sq(&eps);
                    let (value, weight) = match spec.fp_norm {
                        FpNorm::Unsquared => {
                            let nrm = nrm2.sqrt();
                            (nrm, if nrm > 0.0 { 1.0 / nrm } else { 0.0 })
                        }
                        FpNorm::Squared => (nrm2, 2.0),
                    };
                    pen_sum += value;
                    let eps_bar: Vec<f64> = eps.iter().map(|e| w_pen * weight * e).collect();
                    for (o, e) in bar.row_mut(bar.layout.dir(0), b).iter_mut().zip(&eps_bar) {
                        *o += e;
                    }
                    // ∂/∂(∇L) = −ε̄
                    for i in 0..d {
                        let gl = -eps_bar[i];
                        if gl == 0.0 {
                            continue;
                        }
                        for (k, v) in smp.probes.vectors.iter().enumerate() {
                            let p = pair(k, i);
                            for (o, vj) in bar.row_mut(p, b).iter_mut().zip(v) {
                                *o += 0.5 * g2 * scale * gl * vj;
                            }
                        }
                        let col = out.row(unit(i), b).to_vec();
                        for (j, o) in bar.row_mut(unit(i), b).iter_mut().enumerate() {
                            *o += gl * (g2 * s[j] - c * x[j]);
                        }
                        for j in 0..d {
                            s_bar[j] += gl * g2 * col[j];
                        }
                        s_bar[i] -= gl * c;
                    }
                }
            }
            for (o, v) in bar.row_mut(0, b).iter_mut().zip(&s_bar) {
                *o += v;
            }
        }
        (0.0, bar)
    });
    (dsm_sum, pen_sum / d as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{LinearField, ZeroField};
    use crate::net::{Activation, Architecture, TimeEmbedding};
    use crate::target::MixtureScore;
    use approx::assert_relative_eq;

    /// `s(x_t, t) = −z/σ(t)` for the batch it was built from.
    struct NoiseOracle<'a> {
        batch: &'a [BatchSample],
    }

    impl ScoreField for NoiseOracle<'_> {
        fn dim(&self) -> usize {
            self.batch[0].z.len()
        }
        fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
            let b = self
                .batch
                .iter()
                .find(|b| b.xt == x && b.t == t)
                .expect("point from the batch");
            b.z.iter().map(|z| -z / b.sigma).collect()
        }
        fn jvp_x(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
            unimplemented!()
        }
        fn vjp_x(&self, _x: &[f64], _t: f64, _u: &[f64]) -> Vec<f64> {
            unimplemented!()
        }
        fn dt_score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
            unimplemented!()
        }
        fn grad_quadratic(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
            unimplemented!()
        }
    }

    /// Constant field `s ≡ c`.
    struct Constant(Vec<f64>);

    impl ScoreField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
            self.0.clone()
        }
        fn jvp_x(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
        fn vjp_x(&self, _x: &[f64], _t: f64, _u: &[f64]) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
        fn dt_score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
        fn grad_quadratic(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
    }

    fn sample(sched: &SdeSchedule, x0: Vec<f64>, t: f64, z: Vec<f64>) -> BatchSample {
        let d = x0.len();
        BatchSample::new(sched, x0, t, z, Probes::exact(d)).unwrap()
    }

    fn batch_with_sigma(sigma: f64, z: Vec<f64>) -> BatchSample {
        // bypass the schedule to pin σ by hand
        let d = z.len();
        BatchSample {
            x0: vec![0.0; d],
            t: 0.5,
            xt: z.iter().map(|v| sigma * v).collect(),
            z,
            sigma,
            probes: Probes::exact(d),
        }
    }

    #[test]
    fn dsm_examples() {
        let sched = SdeSchedule::default();
        let mut r = rng::stream(1, "t");
        let batch = draw_batch(&GaussianMixture::symmetric_pair(), &sched, &ObjectiveSpec::baseline(), 64, &mut r);
        assert!(loss_dsm(&NoiseOracle { batch: &batch }, &batch) < 1e-28);

        let b = batch_with_sigma(0.5, vec![1.0]);
        assert_eq!(loss_dsm(&Constant(vec![4.0]), &[b]), 9.0);

        let batch = draw_batch(&GaussianMixture::standard_normal(2), &sched, &ObjectiveSpec::baseline(), 10_000, &mut r);
        let per: Vec<f64> = batch.iter().map(|b| norm_sq(&b.z)).collect();
        let est = Estimate::from_values(&per);
        let zero = loss_dsm(&ZeroField(2), &batch);
        assert_relative_eq!(zero, est.mean, max_relative = 1e-12);
        assert!((zero - 2.0).abs() < 4.0 * est.stderr);
    }

    fn probe_stats(f: impl Fn(&Probes) -> f64, n: usize) -> Estimate {
        let mut r = rng::stream(2, "probes");
        let vals: Vec<f64> = (0..n)
            .map(|_| f(&Probes::draw(Estimator::Hutchinson, 1, 2, &mut r)))
            .collect();
        Estimate::from_values(&vals)
    }

    #[test]
    fn hutchinson_examples() {
        let a = LinearField::new(2, vec![-1.0, 2.0, 0.0, -3.0]);
        let x = [0.3, 0.2];
        let div = probe_stats(|p| hutchinson_div(&a, &x, 0.5, p), 100_000);
        assert!((div.mean + 4.0).abs() < 4.0 * div.stderr, "{div:?}");
        let frob = probe_stats(|p| hutchinson_frob(&a, &x, 0.5, p), 100_000);
        assert!((frob.mean - 14.0).abs() < 4.0 * frob.stderr, "{frob:?}");

        let v = vec![vec![0.7, -1.2]];
        let p = Probes::hutchinson(v.clone());
        let id = LinearField::scaled_identity(2, 1.0);
        assert_relative_eq!(hutchinson_div(&id, &x, 0.5, &p), norm_sq(&v[0]));
        let c3 = LinearField::scaled_identity(2, 3.0);
        assert_relative_eq!(hutchinson_frob(&c3, &x, 0.5, &p), 9.0 * norm_sq(&v[0]));
        assert_eq!(hutchinson_div(&ZeroField(2), &x, 0.5, &p), 0.0);
        assert_eq!(hutchinson_frob(&ZeroField(2), &x, 0.5, &p), 0.0);
        assert_eq!(hutchinson_div(&a, &x, 0.5, &Probes::exact(2)), -4.0);
        assert_eq!(hutchinson_frob(&a, &x, 0.5, &Probes::exact(2)), 14.0);
    }

    #[test]
    fn hutchinson_error_shrinks_with_probe_count() {
        let a = LinearField::new(2, vec![-1.0, 2.0, 0.0, -3.0]);
        let mut r = rng::stream(3, "shrink");
        let mut rms = Vec::new();
        for &k in &[4usize, 64, 1024] {
            let errs: Vec<f64> = (0..200)
                .map(|_| {
                    let p = Probes::draw(Estimator::Hutchinson, k, 2, &mut r);
                    (hutchinson_div(&a, &[0.0, 0.0], 0.1, &p) + 4.0).powi(2)
                })
                .collect();
            rms.push((errs.iter().sum::<f64>() / errs.len() as f64).sqrt());
        }
        assert!(rms[0] > rms[1] && rms[1] > rms[2], "{rms:?}");
        // O(1/√K): 16× more probes gives ≈ 4× less error
        assert!(rms[0] / rms[1] > 2.5 && rms[1] / rms[2] > 2.5, "{rms:?}");
    }

    #[test]
    fn operator_l_examples() {
        let vp = SdeSchedule::vp(0.1, 20.0);
        let unit = LinearField::scaled_identity(2, -1.0);
        for &(x, t) in &[([0.5, -1.0], 0.3), ([2.0, 0.1], 0.9)] {
            let l = operator_l(&unit, &vp, &x, t, &Probes::exact(2));
            assert!(l.abs() < 1e-12, "{l}");
        }
        let ve = SdeSchedule::ve(0.01, 50.0);
        assert_eq!(operator_l(&ZeroField(2), &ve, &[1.0, 2.0], 0.5, &Probes::exact(2)), 0.0);
        assert_relative_eq!(
            operator_l(&ZeroField(2), &vp, &[1.0, 2.0], 0.0, &Probes::exact(2)),
            0.1,
            epsilon = 1e-15
        );
    }

    #[test]
    fn fp_error_of_exact_scores() {
        let vp = SdeSchedule::vp(0.1, 20.0);
        let unit = LinearField::scaled_identity(2, -1.0);
        let e = fp_error(&unit, &vp, &[0.4, 1.1], 0.2, &Probes::exact(2), GradMode::Exact, 1e-4);
        assert!(e.iter().all(|v| v.abs() < 1e-6));

        let mut r = rng::stream(8, "fp");
        for (_, gm) in GaussianMixture::test_corpus() {
            let field = MixtureScore::new(gm.clone(), vp);
            for _ in 0..10 {
                let t = 10f64.powf(-3.0 * r.random::<f64>());
                let x = gm.sample(1, &mut r).remove(0);
                let e = fp_error(&field, &vp, &x, t, &Probes::exact(2), GradMode::Exact, 1e-4);
                assert!(norm_sq(&e).sqrt() / 2f64.sqrt() < 1e-3, "t={t} e={e:?}");
            }
        }
    }

    #[test]
    fn residual_of_zero_network_on_unit_gaussian_vanishes() {
        let vp = SdeSchedule::vp(0.1, 20.0);
        let r = residual_rfp(&ZeroField(2), &GaussianMixture::standard_normal(2), &vp, 0.3, 32, 1, &FpOptions::default());
        assert!(r.mean < 1e-20);
    }

    #[test]
    fn penalty_examples() {
        let sched = SdeSchedule::default();
        let mut r = rng::stream(4, "pen");
        let spec = |p| ObjectiveSpec::with_penalty(p, 1.0);
        let batch = draw_batch(&GaussianMixture::symmetric_pair(), &sched, &spec(Penalty::Jac), 8, &mut r);
        assert_eq!(penalty(&ZeroField(2), &sched, &batch, &spec(Penalty::Sn)), 0.0);
        assert_eq!(penalty(&ZeroField(2), &sched, &batch, &spec(Penalty::Jac)), 0.0);

        let b = batch_with_sigma(0.5, vec![1.0]);
        assert_eq!(penalty(&Constant(vec![-2.0]), &sched, &[b.clone()], &spec(Penalty::Sn)), 4.0);

        let unit = LinearField::scaled_identity(2, -1.0);
        let b2 = sample(&sched, vec![0.3, 0.1], 0.4, vec![0.2, -0.5]);
        assert_eq!(penalty(&unit, &sched, &[b2], &spec(Penalty::Div)), 2.0);

        let parts = total_loss(&ZeroField(1), &sched, &[b.clone()], &ObjectiveSpec::with_penalty(Penalty::Sn, 1.0));
        assert_eq!(parts.total, 1.0);
        let base = total_loss(&Constant(vec![4.0]), &sched, &[b.clone()], &ObjectiveSpec::with_penalty(Penalty::Sn, 0.0));
        assert_eq!(base.total, base.dsm);
        let one = total_loss(&Constant(vec![4.0]), &sched, &[b.clone()], &ObjectiveSpec::with_penalty(Penalty::Sn, 1.0));
        let two = total_loss(&Constant(vec![4.0]), &sched, &[b], &ObjectiveSpec::with_penalty(Penalty::Sn, 2.0));
        assert_eq!(two.total - one.total, one.penalty);
    }

    #[test]
    fn fp_penalty_and_residual_norms() {
        // for a constant ε across the batch, D·P_FP² equals r_FP-style (1/D)E‖ε‖²·D
        let sched = SdeSchedule::ve(0.01, 50.0);
        let field = LinearField::scaled_identity(2, -1.0);
        let x0 = vec![1.0, -0.5];
        let batch: Vec<BatchSample> = (0..5)
            .map(|_| sample(&sched, x0.clone(), 0.5, vec![0.0, 0.0]))
            .collect();
        let spec = ObjectiveSpec::with_penalty(Penalty::Fp, 1.0);
        let p = penalty(&field, &sched, &batch, &spec);
        let eps = fp_error(&field, &sched, &batch[0].xt, 0.5, &batch[0].probes, GradMode::Exact, 1e-4);
        let r = norm_sq(&eps) / 2.0;
        assert!(r > 0.0);
        assert_relative_eq!(p * p * 2.0, r, max_relative = 1e-12);
    }

    #[test]
    fn penalties_are_nonnegative() {
        let sched = SdeSchedule::default();
        let net = ScoreNet::init(Architecture::default_for(2), 2).unwrap();
        let mut r = rng::stream(6, "nn");
        for p in Penalty::ALL {
            let spec = ObjectiveSpec::with_penalty(p, 0.1);
            let batch = draw_batch(&GaussianMixture::ring(5, 3.0, 0.09), &sched, &spec, 4, &mut r);
            assert!(penalty(&net, &sched, &batch, &spec) >= 0.0);
        }
    }

    fn small_net(act: Activation) -> ScoreNet {
        let arch = Architecture {
            data_dim: 2,
            hidden: vec![8],
            activation: act,
            embedding: TimeEmbedding {
                width: 1,
                min_freq: 1.0,
                max_freq: 1.0,
            },
        };
        let mut net = ScoreNet::init(arch, 9).unwrap();
        let mut r = rng::stream(10, "b");
        net.update_params(|p| {
            for v in p.iter_mut() {
                *v += 0.2 * rng::normal_vec(&mut r, 1)[0];
            }
        });
        net
    }

    #[test]
    fn jet_gradient_values_match_field_values() {
        let sched = SdeSchedule::default();
        let net = small_net(Activation::Silu);
        let mut r = rng::stream(12, "v");
        for est in [Estimator::Hutchinson, Estimator::Exact] {
            for p in [Penalty::None, Penalty::Sn, Penalty::Div, Penalty::Jac, Penalty::Fp] {
                let mut spec = ObjectiveSpec::with_penalty(p, 0.3);
                spec.estimator = est;
                spec.probes = 2;
                let batch = draw_batch(&GaussianMixture::symmetric_pair(), &sched, &spec, 37, &mut r);
                let (parts, _) = loss_and_grad(&net, &sched, &batch, &spec).unwrap();
                let want = total_loss(&net, &sched, &batch, &spec);
                assert_relative_eq!(parts.dsm, want.dsm, max_relative = 1e-11);
                assert_relative_eq!(parts.penalty, want.penalty, max_relative = 1e-9, epsilon = 1e-14);
                assert_relative_eq!(parts.total, want.total, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn tiny_net_gradients_match_finite_differences() {
        let sched = SdeSchedule::default();
        let mut r = rng::stream(13, "fdgrad");
        for act in [Activation::Tanh, Activation::Silu] {
            let net = small_net(act);
            assert_eq!(net.architecture().widths(), vec![3, 8, 2]);
            for norm in [FpNorm::Unsquared, FpNorm::Squared] {
                for p in [Penalty::None, Penalty::Sn, Penalty::Div, Penalty::Jac, Penalty::Fp] {
                    if norm == FpNorm::Squared && p != Penalty::Fp {
                        continue;
                    }
                    let mut spec = ObjectiveSpec::with_penalty(p, 0.7);
                    spec.fp_norm = norm;
                    let batch = draw_batch(&GaussianMixture::symmetric_pair(), &sched, &spec, 5, &mut r);
                    let (_, grad) = loss_and_grad(&net, &sched, &batch, &spec).unwrap();
                    let h = 1e-4;
                    let n = net.params().len();
                    for _ in 0..25 {
                        let j = r.random_range(0..n);
                        let shifted = |delta: f64| {
                            let mut m = net.clone();
                            m.update_params(|q| q[j] += delta);
                            total_loss(&m, &sched, &batch, &spec).total
                        };
                        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                        let tol = 1e-4 * grad[j].abs().max(fd.abs()) + 1e-8;
                        assert!(
                            (grad[j] - fd).abs() <= tol,
                            "{act:?} {p:?} {norm:?} θ[{j}]: {} vs {fd}",
                            grad[j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fd_training_mode_is_rejected() {
        let sched = SdeSchedule::default();
        let net = small_net(Activation::Tanh);
        let mut spec = ObjectiveSpec::with_penalty(Penalty::Fp, 0.1);
        spec.grad_mode = GradMode::FiniteDifference;
        let mut r = rng::stream(1, "x");
        let batch = draw_batch(&GaussianMixture::symmetric_pair(), &sched, &spec, 2, &mut r);
        assert!(loss_and_grad(&net, &sched, &batch, &spec).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ObjectiveSpec::baseline().validate().is_ok());
        let mut s = ObjectiveSpec::baseline();
        s.lambda = 0.5;
        assert!(s.validate().is_err());
        let mut s = ObjectiveSpec::with_penalty(Penalty::Sn, -1.0);
        assert!(s.validate().is_err());
        s.lambda = 1.0;
        s.probes = 0;
        assert!(s.validate().is_err());
        assert_eq!(ObjectiveSpec::with_penalty(Penalty::None, 3.0).lambda, 0.0);
    }
}
