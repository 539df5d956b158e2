//! JSON experiment configuration.
//!
//! Parsing goes through a permissive raw form (optional fields, presets) and
//! resolves to [`ExperimentConfig`], whose JSON serialization is itself a valid
//! config that parses back to an identical value. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "run_name": "reference",
//!   "seed": 1,
//!   "target": { "preset": "symmetric_pair" },
//!   "schedule": { "kind": "vp", "beta_min": 0.1, "beta_max": 20.0 },
//!   "network": { "hidden": [64, 64], "activation": "silu" },
//!   "train": { "epochs": 20, "batch_size": 128, "dataset_size": 2000 },
//!   "objective": { "penalty": "sn", "lambda": 0.1 }
//! }
//! ```
//!
//! Target presets: `standard_normal` (`dim`), `symmetric_pair`, `ring`
//! (`n`, `radius`, `variance`), `anisotropic_pair`; or an explicit mixture
//! with `weights`, `means`, `covariances`. When `penalty` is not `none`,
//! `objective.lambda` must be given.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diagnostics::GridSpec;
use crate::error::{Error, Result};
use crate::net::{Activation, Architecture, TimeEmbedding};
use crate::objective::{Estimator, FpNorm, FpOptions, GradMode, ObjectiveSpec, Penalty};
use crate::rng;
use crate::sampler::SamplerConfig;
use crate::sde::{SdeKind, SdeSchedule};
use crate::target::GaussianMixture;
use crate::train::{default_lr, TrainConfig};

/// Where scores come from in `sample` and `diagnose`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Network,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks the per-penalty default.
    pub lr: Option<f64>,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub dataset_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 200,
            batch_size: 128,
            lr: None,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            dataset_size: 10_000,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_steps: usize,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    pub n_samples: usize,
    pub record_times: Vec<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            n_steps: 1000,
            t_start: None,
            t_end: None,
            n_samples: 10_000,
            record_times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSettings {
    pub grid_points: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub n_mc: usize,
    /// Divergence probes inside `r_FP`.
    pub rfp_estimator: Estimator,
    pub frob_estimator: Estimator,
    pub probes: usize,
    pub fd_step_x: f64,
    /// Curves are summarised over `t < small_t`.
    pub small_t: f64,
    pub field_times: Vec<f64>,
    pub field_grid: GridSpec,
}

impl Default for DiagnosticsSettings {
    fn default() -> Self {
        DiagnosticsSettings {
            grid_points: 40,
            t_lo: 1e-4,
            t_hi: 1.0,
            n_mc: 256,
            rfp_estimator: Estimator::Exact,
            frob_estimator: Estimator::Hutchinson,
            probes: 1,
            fd_step_x: 1e-4,
            small_t: 1e-2,
            field_times: vec![1e-3, 1e-2, 1e-1, 0.5],
            field_grid: GridSpec::default(),
        }
    }
}

impl DiagnosticsSettings {
    pub fn grid(&self) -> Vec<f64> {
        crate::diagnostics::log_grid(self.grid_points, self.t_lo, self.t_hi)
    }

    pub fn fp_options(&self, grad_mode: GradMode) -> FpOptions {
        FpOptions {
            estimator: self.rfp_estimator,
            probes: self.probes,
            grad_mode,
            fd_step_x: self.fd_step_x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub k: usize,
    pub n_real: usize,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        MetricsSettings {
            k: crate::metrics::DEFAULT_K,
            n_real: 10_000,
        }
    }
}

/// Grid of training cells: every penalty × every λ × every seed. The
/// `none` penalty ignores the λ grid and contributes one cell per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub penalties: Vec<Penalty>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            penalties: vec![Penalty::None, Penalty::Fp, Penalty::Sn, Penalty::Jac, Penalty::Div],
            lambdas: vec![0.01, 0.1, 1.0],
            seeds: vec![1, 2, 3],
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub seed: u64,
    pub score_source: ScoreSource,
    pub target: GaussianMixture,
    pub schedule: SdeSchedule,
    pub network: Architecture,
    pub train: TrainSettings,
    pub objective: ObjectiveSpec,
    pub sampler: SamplerSettings,
    pub diagnostics: DiagnosticsSettings,
    pub metrics: MetricsSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    run_name: Option<String>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    score_source: ScoreSource,
    target: Value,
    #[serde(default)]
    schedule: RawSchedule,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    train: TrainSettings,
    #[serde(default)]
    objective: RawObjective,
    #[serde(default)]
    sampler: SamplerSettings,
    #[serde(default)]
    diagnostics: DiagnosticsSettings,
    #[serde(default)]
    metrics: MetricsSettings,
    #[serde(default)]
    sweep: Option<SweepSettings>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: Option<String>,
    beta_min: Option<f64>,
    beta_max: Option<f64>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
    t_min: Option<f64>,
    t_max: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    data_dim: Option<usize>,
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
    embedding: Option<TimeEmbedding>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    #[serde(default)]
    penalty: Option<Penalty>,
    lambda: Option<f64>,
    probes: Option<usize>,
    estimator: Option<Estimator>,
    grad_mode: Option<GradMode>,
    fd_step_x: Option<f64>,
    fp_norm: Option<FpNorm>,
}

#[derive(Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
enum Preset {
    StandardNormal {
        #[serde(default = "two")]
        dim: usize,
    },
    SymmetricPair,
    Ring {
        #[serde(default = "five")]
        n: usize,
        #[serde(default = "three")]
        radius: f64,
        #[serde(default = "ring_variance")]
        variance: f64,
    },
    AnisotropicPair,
}

fn two() -> usize {
    2
}
fn five() -> usize {
    5
}
fn three() -> f64 {
    3.0
}
fn ring_variance() -> f64 {
    0.09
}

fn field_error(field: &str, e: impl std::fmt::Display) -> Error {
    Error::invalid(field, e.to_string())
}

fn parse_target(v: Value) -> Result<GaussianMixture> {
    let gm = if v.get("preset").is_some() {
        match serde_json::from_value::<Preset>(v).map_err(|e| field_error("target", e))? {
            Preset::StandardNormal { dim } => {
                if dim == 0 {
                    return Err(Error::invalid("target.dim", "must be >= 1"));
                }
                GaussianMixture::standard_normal(dim)
            }
            Preset::SymmetricPair => GaussianMixture::symmetric_pair(),
            Preset::Ring { n, radius, variance } => {
                if n == 0 {
                    return Err(Error::invalid("target.n", "must be >= 1"));
                }
                GaussianMixture::ring(n, radius, variance)
            }
            Preset::AnisotropicPair => GaussianMixture::anisotropic_pair(),
        }
    } else {
        serde_json::from_value::<GaussianMixture>(v).map_err(|e| field_error("target", e))?
    };
    gm.validate().map_err(|e| field_error("target", e))?;
    Ok(gm)
}

fn resolve_schedule(raw: RawSchedule) -> Result<SdeSchedule> {
    let kind = raw.kind.as_deref().unwrap_or("vp");
    let mut s = match kind {
        "vp" => {
            if raw.sigma_min.is_some() || raw.sigma_max.is_some() {
                return Err(Error::invalid("schedule.sigma_min", "only valid for kind = ve"));
            }
            SdeSchedule::vp(raw.beta_min.unwrap_or(0.1), raw.beta_max.unwrap_or(20.0))
        }
        "ve" => {
            if raw.beta_min.is_some() || raw.beta_max.is_some() {
                return Err(Error::invalid("schedule.beta_min", "only valid for kind = vp"));
            }
            SdeSchedule::ve(raw.sigma_min.unwrap_or(0.01), raw.sigma_max.unwrap_or(50.0))
        }
        other => {
            return Err(Error::invalid(
                "schedule.kind",
                format!("unknown kind `{other}`, expected vp or ve"),
            ))
        }
    };
    if let Some(t) = raw.t_min {
        s.t_min = t;
    }
    if let Some(t) = raw.t_max {
        s.t_max = t;
    }
    s.validate()?;
    Ok(s)
}

fn resolve_objective(raw: RawObjective) -> Result<ObjectiveSpec> {
    let base = ObjectiveSpec::baseline();
    let penalty = raw.penalty.unwrap_or(Penalty::None);
    let lambda = match (penalty, raw.lambda) {
        (Penalty::None, Some(l)) if l != 0.0 => {
            return Err(Error::invalid("objective.lambda", "must be 0 or absent when penalty is none"))
        }
        (Penalty::None, _) => 0.0,
        (p, None) => {
            return Err(Error::invalid(
                "objective.lambda",
                format!("required when penalty is {}", p.name()),
            ))
        }
        (_, Some(l)) => l,
    };
    let spec = ObjectiveSpec {
        penalty,
        lambda,
        probes: raw.probes.unwrap_or(base.probes),
        estimator: raw.estimator.unwrap_or(base.estimator),
        grad_mode: raw.grad_mode.unwrap_or(base.grad_mode),
        fd_step_x: raw.fd_step_x.unwrap_or(base.fd_step_x),
        fp_norm: raw.fp_norm.unwrap_or(base.fp_norm),
    };
    spec.validate()?;
    if spec.penalty == Penalty::Fp && spec.grad_mode == GradMode::FiniteDifference {
        return Err(Error::invalid(
            "objective.grad_mode",
            "finite_difference is only available to diagnostics",
        ));
    }
    Ok(spec)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| field_error("config", e))?;
        let target = parse_target(raw.target)?;
        let d = target.dim();
        let schedule = resolve_schedule(raw.schedule)?;
        let defaults = Architecture::default_for(d);
        if let Some(dd) = raw.network.data_dim {
            if dd != d {
                return Err(Error::invalid(
                    "network.data_dim",
                    format!("is {dd} but the target has dimension {d}"),
                ));
            }
        }
        let network = Architecture {
            data_dim: d,
            hidden: raw.network.hidden.unwrap_or(defaults.hidden),
            activation: raw.network.activation.unwrap_or(defaults.activation),
            embedding: raw.network.embedding.unwrap_or(defaults.embedding),
        };
        let cfg = ExperimentConfig {
            run_name: raw.run_name.unwrap_or_else(|| "run".into()),
            seed: raw.seed,
            score_source: raw.score_source,
            target,
            schedule,
            network,
            train: raw.train,
            objective: resolve_objective(raw.objective)?,
            sampler: raw.sampler,
            diagnostics: raw.diagnostics,
            metrics: raw.metrics,
            sweep: raw.sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_name.is_empty()
            || self
                .run_name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return Err(Error::invalid("run_name", "use ASCII letters, digits, '-', '_' or '.'"));
        }
        self.train_config().validate()?;
        self.sampler_config().validate(&self.schedule)?;
        let dg = &self.diagnostics;
        if dg.grid_points == 0 || dg.n_mc == 0 || dg.probes == 0 {
            return Err(Error::invalid(
                "diagnostics",
                "grid_points, n_mc and probes must be >= 1",
            ));
        }
        if !(dg.t_lo >= self.schedule.t_min && dg.t_hi <= self.schedule.t_max && dg.t_lo <= dg.t_hi) {
            return Err(Error::invalid(
                "diagnostics.t_lo",
                "need t_min <= t_lo <= t_hi <= t_max",
            ));
        }
        if dg.field_times.iter().any(|&t| !(t >= self.schedule.t_min && t <= self.schedule.t_max)) {
            return Err(Error::invalid("diagnostics.field_times", "must lie in [t_min, t_max]"));
        }
        dg.field_grid.validate()?;
        if self.metrics.k == 0 || self.metrics.n_real <= self.metrics.k {
            return Err(Error::invalid("metrics.k", "need 1 <= k < n_real"));
        }
        if let Some(sw) = &self.sweep {
            if sw.penalties.is_empty() || sw.seeds.is_empty() {
                return Err(Error::invalid("sweep", "penalties and seeds must be nonempty"));
            }
            if sw.penalties.iter().any(|&p| p != Penalty::None) && sw.lambdas.is_empty() {
                return Err(Error::invalid("sweep.lambdas", "must be nonempty"));
            }
            if sw.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::invalid("sweep.lambdas", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr.unwrap_or_else(|| default_lr(self.objective.penalty)),
            adam_betas: self.train.adam_betas,
            adam_eps: self.train.adam_eps,
            dataset_size: self.train.dataset_size,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            objective: self.objective.clone(),
            schedule: self.schedule,
            target: self.target.clone(),
            network: self.network.clone(),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sampler.n_steps,
            t_start: self.sampler.t_start,
            t_end: self.sampler.t_end,
            n_samples: self.sampler.n_samples,
            seed: self.stream_seed("sampler"),
            record_times: self.sampler.record_times.clone(),
        }
    }

    /// Seed of a named stream derived from the root seed.
    pub fn stream_seed(&self, purpose: &str) -> u64 {
        rng::derive_seed(self.seed, purpose)
    }

    /// Copy with a different penalty, λ and root seed; the learning rate is
    /// re-derived unless set explicitly.
    pub fn with_cell(&self, penalty: Penalty, lambda: f64, seed: u64) -> Self {
        let mut c = self.clone();
        c.objective.penalty = penalty;
        c.objective.lambda = if penalty == Penalty::None { 0.0 } else { lambda };
        c.seed = seed;
        c.sweep = None;
        c
    }

    pub fn is_vp(&self) -> bool {
        matches!(self.schedule.kind, SdeKind::Vp { .. })
    }
}
