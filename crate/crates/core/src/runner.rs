//! Run directories for the command-line verbs.
//!
//! Every verb writes into `<out_root>/<run_name>/`:
//!
//! ```text
//! config.json                 resolved configuration echo
//! losses.csv                  epoch, dsm, penalty, total          (train)
//! checkpoints/epoch_N.ckpt                                         (train)
//! samples.csv, trajectories.csv                                    (sample)
//! curves/{rfp,dsm,frob,score_err}.csv, curves/field.csv           (diagnose)
//! curves/rfp_fd.csv                                                (diagnose --fd)
//! report.json                                                      (metrics)
//! target_samples.csv, target_field.csv                             (target-dump)
//! cells/<cell>/..., cells.csv, summary.csv                         (sweep)
//! record_<verb>.json          status, seeds, artifacts, timings
//! ```
//!
//! Everything except the timing fields of the records is a deterministic
//! function of the configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{ExperimentConfig, ScoreSource};
use crate::diagnostics::{self, CurvePoint, FieldRow};
use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::metrics::{self, MetricReport};
use crate::net::checkpoint::{load_matching, Checkpoint};
use crate::objective::{GradMode, Penalty};
use crate::sampler::{self, Generated};
use crate::table::{self, fmt_f64};
use crate::target::MixtureScore;
use crate::train::{self, EpochLoss};

/// Environment variable naming the output root.
pub const OUT_ENV: &str = "FPLAB_OUT";

/// `$FPLAB_OUT`, or `runs` when unset.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Root seed plus the named streams and derived seeds a run consumed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedLedger {
    pub root: u64,
    /// Streams keyed directly by `(root, purpose)`.
    pub streams: Vec<String>,
    /// Seeds derived as `derive_seed(root, purpose)`.
    pub derived: BTreeMap<String, u64>,
}

impl SeedLedger {
    fn new(cfg: &ExperimentConfig, streams: &[&str], derived: &[&str]) -> Self {
        SeedLedger {
            root: cfg.seed,
            streams: streams.iter().map(|s| s.to_string()).collect(),
            derived: derived
                .iter()
                .map(|p| (p.to_string(), cfg.stream_seed(p)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Timings {
    pub total_seconds: f64,
    pub epoch_seconds: Vec<f64>,
    pub median_epoch_seconds: Option<f64>,
    /// Fastest epoch. Interference from other processes only adds time, so
    /// this is the stablest per-epoch cost on a shared machine.
    pub min_epoch_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub verb: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub seeds: SeedLedger,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub timings: Timings,
    pub config: ExperimentConfig,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
}

impl RunDir {
    fn create(out_root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let root = out_root.join(&cfg.run_name);
        std::fs::create_dir_all(&root)?;
        Ok(RunDir {
            root,
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.artifacts.push(rel.to_string());
        Ok(p)
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(p, text)?;
        Ok(())
    }

    fn finish(
        self,
        cfg: &ExperimentConfig,
        verb: &str,
        result: Result<()>,
        seeds: SeedLedger,
        start: Instant,
        epoch_seconds: Vec<f64>,
    ) -> Result<RunRecord> {
        let (status, error) = match result {
            Ok(()) => (RunStatus::Ok, None),
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteState(_))) => {
                (RunStatus::Failed, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        self.write_record(cfg, verb, status, error, seeds, start, epoch_seconds)
    }

    #[allow(clippy::too_many_arguments)]
    fn write_record(
        mut self,
        cfg: &ExperimentConfig,
        verb: &str,
        status: RunStatus,
        error: Option<String>,
        seeds: SeedLedger,
        start: Instant,
        epoch_seconds: Vec<f64>,
    ) -> Result<RunRecord> {
        let record_name = format!("record_{verb}.json");
        self.artifacts.push(record_name.clone());
        let record = RunRecord {
            run_id: cfg.run_name.clone(),
            verb: verb.to_string(),
            status,
            error,
            seeds,
            artifacts: self.artifacts.clone(),
            timings: Timings {
                total_seconds: start.elapsed().as_secs_f64(),
                median_epoch_seconds: median(&epoch_seconds),
                min_epoch_seconds: epoch_seconds.iter().copied().reduce(f64::min),
                epoch_seconds,
            },
            config: cfg.clone(),
        };
        std::fs::write(
            self.root.join(record_name),
            serde_json::to_string_pretty(&record)?,
        )?;
        Ok(record)
    }
}

pub fn losses_rows(losses: &[EpochLoss]) -> Vec<Vec<String>> {
    losses
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                fmt_f64(l.dsm),
                fmt_f64(l.penalty),
                fmt_f64(l.total),
            ]
        })
        .collect()
}

pub const LOSSES_HEADER: [&str; 4] = ["epoch", "dsm", "penalty", "total"];

/// `train`: fits a network and writes losses, checkpoints and the record.
pub fn run_train(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut dir = RunDir::create(out_root, cfg)?;
    let mut echo = cfg.clone();
    echo.train.lr = Some(cfg.train_config().lr);
    dir.write_text("config.json", &echo.to_json())?;
    let tc = cfg.train_config();
    let mut losses = Vec::new();
    let mut seconds = Vec::new();
    let mut last = Instant::now();
    let mut ckpts = Vec::new();
    let result = train::train_observed(&tc, |loss, net| {
        losses.push(*loss);
        seconds.push(last.elapsed().as_secs_f64());
        if loss.epoch % tc.checkpoint_every == 0 || loss.epoch == tc.epochs {
            let rel = format!("checkpoints/epoch_{}.ckpt", loss.epoch);
            Checkpoint::from_net(net, tc.seed, Some(loss.epoch)).save(&dir.root.join(&rel).tap_dir()?)?;
            ckpts.push(rel);
        }
        last = Instant::now();
        Ok(())
    });
    dir.artifacts.extend(ckpts);
    let lp = dir.path("losses.csv")?;
    table::write_rows(&lp, &LOSSES_HEADER, losses_rows(&losses))?;
    let seeds = SeedLedger::new(cfg, &["net-init", "train-batch"], &[]);
    dir.finish(cfg, "train", result.map(|_| ()), seeds, start, seconds)
}

trait TapDir {
    fn tap_dir(self) -> Result<PathBuf>;
}

impl TapDir for PathBuf {
    /// Creates the parent directory and returns the path.
    fn tap_dir(self) -> Result<PathBuf> {
        if let Some(p) = self.parent() {
            std::fs::create_dir_all(p)?;
        }
        Ok(self)
    }
}

/// Resolves the score source: a checkpoint wins; otherwise the config must
/// ask for the oracle.
pub fn load_field(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> Result<Box<dyn ScoreField>> {
    match (ckpt, cfg.score_source) {
        (Some(p), _) => Ok(Box::new(load_matching(p, &cfg.network)?)),
        (None, ScoreSource::Oracle) => Ok(Box::new(MixtureScore::new(cfg.target.clone(), cfg.schedule))),
        (None, ScoreSource::Network) => Err(Error::invalid(
            "score_source",
            "network scores need a checkpoint; pass one or set score_source to oracle",
        )),
    }
}

fn write_points(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let d = points.first().map_or(0, Vec::len);
    let header = table::coord_header(d);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    table::write_numeric(path, &header, points)
}

/// `sample`: reverse-SDE generation with the configured sampler.
pub fn run_sample(cfg: &ExperimentConfig, ckpt: Option<&Path>, out_root: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let field = load_field(cfg, ckpt)?;
    let mut dir = RunDir::create(out_root, cfg)?;
    let result = sampler::generate(&*field, &cfg.schedule, &cfg.sampler_config()).and_then(|g| {
        write_generated(&mut dir, cfg.target.dim(), &g)
    });
    let seeds = SeedLedger::new(cfg, &[], &["sampler"]);
    dir.finish(cfg, "sample", result, seeds, start, Vec::new())
}

fn write_generated(dir: &mut RunDir, d: usize, g: &Generated) -> Result<()> {
    write_points(&dir.path("samples.csv")?, &g.samples)?;
    if !g.trajectories.is_empty() {
        let mut header = vec!["sample_id".to_string(), "t".to_string()];
        header.extend(table::coord_header(d));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = g.trajectories.iter().map(|p| {
            let mut r = vec![p.sample.to_string(), fmt_f64(p.t)];
            r.extend(p.x.iter().map(|&v| fmt_f64(v)));
            r
        });
        table::write_rows(&dir.path("trajectories.csv")?, &header, rows)?;
    }
    Ok(())
}

pub const CURVE_HEADER: [&str; 4] = ["t", "value", "stderr", "n_mc"];

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let rows = points.iter().map(|p| {
        vec![
            fmt_f64(p.t),
            fmt_f64(p.value),
            fmt_f64(p.stderr),
            p.n_mc.to_string(),
        ]
    });
    table::write_rows(path, &CURVE_HEADER, rows)
}

pub fn write_field(path: &Path, rows: &[FieldRow]) -> Result<()> {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.values().to_vec()).collect();
    table::write_numeric(path, &FieldRow::HEADER, &rows)
}

/// All diagnostic curves of one field on the configured grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub rfp: Vec<CurvePoint>,
    pub dsm: Vec<CurvePoint>,
    pub frob: Vec<CurvePoint>,
    pub score_err: Vec<CurvePoint>,
    pub rfp_fd: Option<Vec<CurvePoint>>,
}

/// Curves with the diagnostics seed of `seed_cfg`, so that fields compared
/// under one configuration share their Monte Carlo draws.
pub fn compute_curves<F: ScoreField + ?Sized>(
    field: &F,
    cfg: &ExperimentConfig,
    seed_cfg: &ExperimentConfig,
    fd: bool,
) -> Result<Curves> {
    let dg = &cfg.diagnostics;
    let grid = dg.grid();
    let seed = seed_cfg.stream_seed("diagnostics");
    let (gm, sch) = (&cfg.target, &cfg.schedule);
    Ok(Curves {
        rfp: diagnostics::curve_rfp(field, gm, sch, &grid, dg.n_mc, seed, &dg.fp_options(GradMode::Exact))?,
        dsm: diagnostics::curve_dsm(field, gm, sch, &grid, dg.n_mc, seed)?,
        frob: diagnostics::curve_frobenius(field, gm, sch, &grid, dg.n_mc, dg.frob_estimator, dg.probes, seed)?,
        score_err: diagnostics::score_error(field, gm, sch, &grid, dg.n_mc, seed)?,
        rfp_fd: if fd {
            Some(diagnostics::curve_rfp(
                field,
                gm,
                sch,
                &grid,
                dg.n_mc,
                seed,
                &dg.fp_options(GradMode::FiniteDifference),
            )?)
        } else {
            None
        },
    })
}

fn write_curves(dir: &mut RunDir, c: &Curves) -> Result<()> {
    write_curve(&dir.path("curves/rfp.csv")?, &c.rfp)?;
    write_curve(&dir.path("curves/dsm.csv")?, &c.dsm)?;
    write_curve(&dir.path("curves/frob.csv")?, &c.frob)?;
    write_curve(&dir.path("curves/score_err.csv")?, &c.score_err)?;
    if let Some(fd) = &c.rfp_fd {
        write_curve(&dir.path("curves/rfp_fd.csv")?, fd)?;
    }
    Ok(())
}

/// `diagnose`: residual, DSM, Frobenius and score-error curves, plus field
/// dumps in 2-D.
pub fn run_diagnose(cfg: &ExperimentConfig, ckpt: Option<&Path>, fd: bool, out_root: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let field = load_field(cfg, ckpt)?;
    let mut dir = RunDir::create(out_root, cfg)?;
    let curves = compute_curves(&*field, cfg, cfg, fd)?;
    write_curves(&mut dir, &curves)?;
    if cfg.target.dim() == 2 && !cfg.diagnostics.field_times.is_empty() {
        let rows = diagnostics::score_field_dump(
            &*field,
            &cfg.schedule,
            &cfg.diagnostics.field_times,
            &cfg.diagnostics.field_grid,
        )?;
        write_field(&dir.path("curves/field.csv")?, &rows)?;
    }
    let seeds = SeedLedger::new(cfg, &[], &["diagnostics"]);
    dir.finish(cfg, "diagnose", Ok(()), seeds, start, Vec::new())
}

/// Reference draws from the target used by `metrics` and `sweep`.
pub fn real_samples(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    cfg.target.sample_seeded(cfg.metrics.n_real, cfg.stream_seed("metrics-real"))
}

/// `metrics`: compares two sample files.
pub fn run_metrics(cfg: &ExperimentConfig, real: &Path, fake: &Path, out_root: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let real = table::read_numeric(real)?;
    let fake = table::read_numeric(fake)?;
    let d = cfg.target.dim();
    if let Some(p) = real.iter().chain(&fake).find(|p| p.len() != d) {
        return Err(Error::Shape {
            expected: d,
            got: p.len(),
        });
    }
    let report = metrics::evaluate(&real, &fake, &cfg.target, cfg.metrics.k)?;
    let mut dir = RunDir::create(out_root, cfg)?;
    dir.write_text("report.json", &serde_json::to_string_pretty(&report)?)?;
    let seeds = SeedLedger::new(cfg, &[], &[]);
    dir.finish(cfg, "metrics", Ok(()), seeds, start, Vec::new())
}

/// `target-dump`: reference samples and, in 2-D, the exact score field.
pub fn run_target_dump(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut dir = RunDir::create(out_root, cfg)?;
    write_points(&dir.path("target_samples.csv")?, &real_samples(cfg))?;
    dir.write_text("target.json", &serde_json::to_string_pretty(&cfg.target)?)?;
    if cfg.target.dim() == 2 && !cfg.diagnostics.field_times.is_empty() {
        let oracle = MixtureScore::new(cfg.target.clone(), cfg.schedule);
        let rows = diagnostics::score_field_dump(
            &oracle,
            &cfg.schedule,
            &cfg.diagnostics.field_times,
            &cfg.diagnostics.field_grid,
        )?;
        write_field(&dir.path("target_field.csv")?, &rows)?;
    }
    let seeds = SeedLedger::new(cfg, &[], &["metrics-real"]);
    dir.finish(cfg, "target-dump", Ok(()), seeds, start, Vec::new())
}

/// Per-cell results of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub penalty: Penalty,
    pub lambda: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub final_dsm: f64,
    /// Mean of `log10 r_FP` over grid points with `t < small_t`.
    pub log_rfp_small_t: f64,
    /// Mean Frobenius estimate over `t < small_t`.
    pub frob_small_t: f64,
    /// Conditional DSM at the smallest grid time.
    pub dsm_at_t_lo: f64,
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub entropy: f64,
    pub median_epoch_seconds: f64,
    pub min_epoch_seconds: f64,
}

impl CellResult {
    pub const METRICS: [&'static str; 10] = [
        "final_dsm",
        "log_rfp_small_t",
        "frob_small_t",
        "dsm_at_t_lo",
        "frechet",
        "density",
        "coverage",
        "entropy",
        "median_epoch_seconds",
        "min_epoch_seconds",
    ];

    pub fn metric_values(&self) -> [f64; 10] {
        [
            self.final_dsm,
            self.log_rfp_small_t,
            self.frob_small_t,
            self.dsm_at_t_lo,
            self.frechet,
            self.density,
            self.coverage,
            self.entropy,
            self.median_epoch_seconds,
            self.min_epoch_seconds,
        ]
    }

    fn failed(penalty: Penalty, lambda: f64, seed: u64, error: String) -> Self {
        CellResult {
            penalty,
            lambda,
            seed,
            status: RunStatus::Failed,
            error: Some(error),
            final_dsm: f64::NAN,
            log_rfp_small_t: f64::NAN,
            frob_small_t: f64::NAN,
            dsm_at_t_lo: f64::NAN,
            frechet: f64::NAN,
            density: f64::NAN,
            coverage: f64::NAN,
            entropy: f64::NAN,
            median_epoch_seconds: f64::NAN,
            min_epoch_seconds: f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub result: CellResult,
    pub curves: Option<Curves>,
    pub metrics: Option<MetricReport>,
}

/// Cells in sweep order: penalties outermost, then λ, then seeds.
pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<(Penalty, f64, u64)> {
    let sw = cfg.sweep.clone().unwrap_or_default();
    let mut cells = Vec::new();
    for &p in &sw.penalties {
        let lambdas = if p == Penalty::None { vec![0.0] } else { sw.lambdas.clone() };
        for &l in &lambdas {
            for &s in &sw.seeds {
                cells.push((p, l, s));
            }
        }
    }
    cells
}

pub fn cell_name(p: Penalty, lambda: f64, seed: u64) -> String {
    format!("{}_lam{}_seed{}", p.name(), lambda, seed)
}

fn mean_where(points: &[CurvePoint], keep: impl Fn(&CurvePoint) -> bool, f: impl Fn(f64) -> f64) -> f64 {
    let v: Vec<f64> = points.iter().filter(|p| keep(p)).map(|p| f(p.value)).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains one cell in `<out_root>/<sweep>/cells/<cell>/` and evaluates it
/// with the sweep's shared diagnostics and reference-sample seeds.
pub fn run_cell(
    sweep_cfg: &ExperimentConfig,
    penalty: Penalty,
    lambda: f64,
    seed: u64,
    real: &[Vec<f64>],
    out_root: &Path,
) -> Result<CellOutcome> {
    let start = Instant::now();
    let mut cfg = sweep_cfg.with_cell(penalty, lambda, seed);
    cfg.run_name = cell_name(penalty, lambda, seed);
    let cells_root = out_root.join(&sweep_cfg.run_name).join("cells");
    let record = run_train(&cfg, &cells_root)?;
    if !record.ok() {
        let err = record.error.clone().unwrap_or_default();
        return Ok(CellOutcome {
            result: CellResult::failed(penalty, lambda, seed, err),
            curves: None,
            metrics: None,
        });
    }
    let ckpt = cells_root
        .join(&cfg.run_name)
        .join(format!("checkpoints/epoch_{}.ckpt", cfg.train.epochs));
    let net = load_matching(&ckpt, &cfg.network)?;
    let mut dir = RunDir::create(&cells_root, &cfg)?;
    let curves = compute_curves(&net, &cfg, sweep_cfg, false)?;
    write_curves(&mut dir, &curves)?;
    let mut scfg = cfg.sampler_config();
    scfg.seed = sweep_cfg.stream_seed("sampler");
    let generated = match sampler::generate(&net, &cfg.schedule, &scfg) {
        Ok(g) => g,
        Err(e @ Error::NonFiniteState(_)) => {
            return Ok(CellOutcome {
                result: CellResult::failed(penalty, lambda, seed, e.to_string()),
                curves: Some(curves),
                metrics: None,
            })
        }
        Err(e) => return Err(e),
    };
    write_generated(&mut dir, cfg.target.dim(), &generated)?;
    let report = metrics::evaluate(real, &generated.samples, &cfg.target, cfg.metrics.k)?;
    dir.write_text("report.json", &serde_json::to_string_pretty(&report)?)?;
    let small = cfg.diagnostics.small_t;
    let losses = record_losses(&cells_root.join(&cfg.run_name))?;
    let result = CellResult {
        penalty,
        lambda,
        seed,
        status: RunStatus::Ok,
        error: None,
        final_dsm: losses.last().map_or(f64::NAN, |l| l.dsm),
        log_rfp_small_t: mean_where(&curves.rfp, |p| p.t < small, |v| v.max(f64::MIN_POSITIVE).log10()),
        frob_small_t: mean_where(&curves.frob, |p| p.t < small, |v| v),
        dsm_at_t_lo: curves.dsm.first().map_or(f64::NAN, |p| p.value),
        frechet: report.frechet,
        density: report.density,
        coverage: report.coverage,
        entropy: report.entropy,
        median_epoch_seconds: record.timings.median_epoch_seconds.unwrap_or(f64::NAN),
        min_epoch_seconds: record.timings.min_epoch_seconds.unwrap_or(f64::NAN),
    };
    // Evaluation draws come from the sweep's root seed, shared by all cells.
    let seeds = SeedLedger::new(sweep_cfg, &[], &["diagnostics", "sampler", "metrics-real"]);
    dir.finish(&cfg, "eval", Ok(()), seeds, start, Vec::new())?;
    Ok(CellOutcome {
        result,
        curves: Some(curves),
        metrics: Some(report),
    })
}

/// Reads a run directory's `losses.csv`.
pub fn record_losses(run_dir: &Path) -> Result<Vec<EpochLoss>> {
    Ok(table::read_numeric(&run_dir.join("losses.csv"))?
        .into_iter()
        .map(|r| EpochLoss {
            epoch: r[0] as usize,
            dsm: r[1],
            penalty: r[2],
            total: r[3],
        })
        .collect())
}

/// One summary row: mean and sample standard deviation over the seeds that
/// succeeded (std is 0 for a single seed).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub penalty: Penalty,
    pub lambda: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut keys: Vec<(Penalty, f64)> = Vec::new();
    for c in cells {
        if !keys.iter().any(|&(p, l)| p == c.penalty && l == c.lambda) {
            keys.push((c.penalty, c.lambda));
        }
    }
    for (p, l) in keys {
        let group: Vec<&CellResult> = cells.iter().filter(|c| c.penalty == p && c.lambda == l).collect();
        let ok: Vec<&CellResult> = group.iter().copied().filter(|c| c.status == RunStatus::Ok).collect();
        let m = CellResult::METRICS.len();
        let mut mean = vec![f64::NAN; m];
        let mut std = vec![f64::NAN; m];
        if !ok.is_empty() {
            for j in 0..m {
                let v: Vec<f64> = ok.iter().map(|c| c.metric_values()[j]).collect();
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                mean[j] = mu;
                std[j] = if v.len() > 1 {
                    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
            }
        }
        rows.push(SummaryRow {
            penalty: p,
            lambda: l,
            n_seeds: group.len(),
            n_failed: group.len() - ok.len(),
            mean,
            std,
        });
    }
    rows
}

/// One row per cell: penalty, λ, seed, status, then [`CellResult::METRICS`].
pub fn write_cells_csv(path: &Path, results: &[CellResult]) -> Result<()> {
    let mut header = vec!["penalty", "lambda", "seed", "status"];
    header.extend(CellResult::METRICS);
    let rows = results.iter().map(|c| {
        let mut r = vec![
            c.penalty.name().to_string(),
            fmt_f64(c.lambda),
            c.seed.to_string(),
            status_name(c.status).to_string(),
        ];
        r.extend(c.metric_values().iter().map(|&v| fmt_f64(v)));
        r
    });
    table::write_rows(path, &header, rows)
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Failed => "failed",
    }
}

/// One row per `(penalty, λ)` with `<metric>_mean` and `<metric>_std`
/// columns; `status` is `ok`, `partial` or `failed`.
pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut header: Vec<String> = ["penalty", "lambda", "n_seeds", "n_failed", "status"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in CellResult::METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = summary.iter().map(|s| {
        let status = match (s.n_failed, s.n_seeds) {
            (0, _) => "ok",
            (f, n) if f == n => "failed",
            _ => "partial",
        };
        let mut r = vec![
            s.penalty.name().to_string(),
            fmt_f64(s.lambda),
            s.n_seeds.to_string(),
            s.n_failed.to_string(),
            status.to_string(),
        ];
        for j in 0..s.mean.len() {
            r.push(fmt_f64(s.mean[j]));
            r.push(fmt_f64(s.std[j]));
        }
        r
    });
    table::write_rows(path, &header, rows)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
    pub record: RunRecord,
}

/// `sweep`: trains and evaluates every cell; failed cells are recorded and
/// the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, out_root: &Path) -> Result<SweepOutcome> {
    if cfg.sweep.is_none() {
        return Err(Error::invalid("sweep", "config has no sweep block"));
    }
    let start = Instant::now();
    let mut dir = RunDir::create(out_root, cfg)?;
    dir.write_text("config.json", &cfg.to_json())?;
    let real = real_samples(cfg);
    let mut cells = Vec::new();
    for (p, l, s) in sweep_cells(cfg) {
        let outcome = match run_cell(cfg, p, l, s, &real, out_root) {
            Ok(o) => o,
            Err(e) => {
                log::warn!("sweep cell {} failed: {e}", cell_name(p, l, s));
                CellOutcome {
                    result: CellResult::failed(p, l, s, e.to_string()),
                    curves: None,
                    metrics: None,
                }
            }
        };
        cells.push(outcome);
    }
    let results: Vec<CellResult> = cells.iter().map(|c| c.result.clone()).collect();
    let summary = summarize(&results);

    write_cells_csv(&dir.path("cells.csv")?, &results)?;
    write_summary_csv(&dir.path("summary.csv")?, &summary)?;
    for c in &cells {
        dir.artifacts.push(format!(
            "cells/{}",
            cell_name(c.result.penalty, c.result.lambda, c.result.seed)
        ));
    }
    let seeds = SeedLedger::new(cfg, &[], &["diagnostics", "sampler", "metrics-real"]);
    let n_failed = results.iter().filter(|c| c.status == RunStatus::Failed).count();
    let (status, error) = if n_failed == 0 {
        (RunStatus::Ok, None)
    } else {
        (RunStatus::Failed, Some(format!("{n_failed} cell(s) failed; see cells.csv")))
    };
    let record = dir.write_record(cfg, "sweep", status, error, seeds, start, Vec::new())?;
    Ok(SweepOutcome {
        cells,
        summary,
        record,
    })
}
