//! Minibatch Adam training.
//!
//! Each epoch draws `dataset_size` fresh samples from the target in batches of
//! `batch_size` (the last batch may be short). Every batch element gets its
//! own `t ~ U[t_min, t_max]`, noise `z` and probes. All randomness comes from
//! the `"train-batch"` stream of the root seed and the network is initialised
//! from `"net-init"`, so a configuration determines the parameter trajectory
//! bit for bit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Architecture, ScoreNet};
use crate::objective::{self, LossParts, ObjectiveSpec, Penalty};
use crate::rng;
use crate::sde::SdeSchedule;
use crate::target::GaussianMixture;

pub const DEFAULT_LR: f64 = 5e-4;
pub const DEFAULT_LR_FP: f64 = 1e-3;

/// Default learning rate for a penalty.
pub fn default_lr(penalty: Penalty) -> f64 {
    if penalty == Penalty::Fp {
        DEFAULT_LR_FP
    } else {
        DEFAULT_LR
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub dataset_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub objective: ObjectiveSpec,
    pub schedule: SdeSchedule,
    pub target: GaussianMixture,
    pub network: Architecture,
}

impl TrainConfig {
    /// 200 epochs of 10 000 samples, batch 128, Adam(0.9, 0.999, 1e-8).
    pub fn new(target: GaussianMixture, objective: ObjectiveSpec) -> Self {
        let d = target.dim();
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            lr: default_lr(objective.penalty),
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            dataset_size: 10_000,
            seed: 0,
            checkpoint_every: 50,
            objective,
            schedule: SdeSchedule::default(),
            target,
            network: Architecture::default_for(d),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size.div_ceil(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if self.dataset_size == 0 {
            return Err(Error::invalid("train.dataset_size", "must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("train.lr", "must be finite and > 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::invalid("train.adam_betas", "each beta must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("train.adam_eps", "must be > 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("train.checkpoint_every", "must be >= 1"));
        }
        self.objective.validate()?;
        self.schedule.validate()?;
        self.target.validate()?;
        self.network.validate()?;
        if self.network.data_dim != self.target.dim() {
            return Err(Error::invalid(
                "network.data_dim",
                format!("is {} but the target has dimension {}", self.network.data_dim, self.target.dim()),
            ));
        }
        Ok(())
    }
}

/// First and second moments plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) {
    assert_eq!(theta.len(), grad.len(), "parameter and gradient length");
    assert_eq!(theta.len(), state.m.len(), "parameter and state length");
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Sample-weighted epoch means of the loss parts seen during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub dsm: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: ScoreNet,
    pub losses: Vec<EpochLoss>,
    /// Wall-clock seconds per epoch; kept apart from the deterministic record.
    pub epoch_seconds: Vec<f64>,
}

/// Trains from scratch.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(cfg, |_, _| Ok(()))
}

/// Trains from scratch, calling `on_epoch(loss, net)` after each epoch with
/// that epoch's record and the updated parameters.
pub fn train_observed<F>(cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLoss, &ScoreNet) -> Result<()>,
{
    cfg.validate()?;
    let mut net = ScoreNet::init(cfg.network.clone(), cfg.seed)?;
    let mut state = AdamState::new(net.params().len());
    let mut batch_rng = rng::stream(cfg.seed, "train-batch");
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let lambda = cfg.objective.lambda;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut dsm, mut pen) = (0.0, 0.0);
        let mut remaining = cfg.dataset_size;
        let mut step = 0;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            remaining -= n;
            let batch = objective::draw_batch(&cfg.target, &cfg.schedule, &cfg.objective, n, &mut batch_rng);
            let (parts, grad): (LossParts, Vec<f64>) =
                objective::loss_and_grad(&net, &cfg.schedule, &batch, &cfg.objective)?;
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    dsm: parts.dsm,
                    penalty: parts.penalty,
                });
            }
            dsm += parts.dsm * n as f64;
            pen += parts.penalty * n as f64;
            net.update_params(|theta| {
                adam_step(theta, &grad, &mut state, cfg.lr, cfg.adam_betas, cfg.adam_eps)
            });
            step += 1;
        }
        let count = cfg.dataset_size as f64;
        let (dsm, penalty) = (dsm / count, pen / count);
        let record = EpochLoss {
            epoch,
            dsm,
            penalty,
            total: dsm + lambda * penalty,
        };
        epoch_seconds.push(start.elapsed().as_secs_f64());
        on_epoch(&record, &net)?;
        losses.push(record);
    }
    Ok(TrainOutcome {
        net,
        losses,
        epoch_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, TimeEmbedding};

    fn tiny(penalty: Penalty, lambda: f64) -> TrainConfig {
        let mut cfg = TrainConfig::new(GaussianMixture::symmetric_pair(), ObjectiveSpec::with_penalty(penalty, lambda));
        cfg.epochs = 3;
        cfg.dataset_size = 100;
        cfg.batch_size = 32;
        cfg.network = Architecture {
            data_dim: 2,
            hidden: vec![16, 16],
            activation: Activation::Silu,
            embedding: TimeEmbedding {
                width: 4,
                min_freq: 1.0,
                max_freq: 10.0,
            },
        };
        cfg
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut theta = vec![0.3];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[1.0], &mut st, 0.1, (0.9, 0.999), 1e-8);
        assert!((theta[0] - (0.3 - 0.1)).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut theta = vec![1.0, -2.0, 3.5];
        let mut st = AdamState::new(3);
        for _ in 0..10 {
            adam_step(&mut theta, &[0.0; 3], &mut st, 0.1, (0.9, 0.999), 1e-8);
        }
        assert_eq!(theta, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut theta = vec![0.1, 0.2];
            let mut st = AdamState::new(2);
            for k in 0..5 {
                let g = [k as f64 * 0.3 - 0.5, 1.0 / (1.0 + k as f64)];
                adam_step(&mut theta, &g, &mut st, 0.01, (0.9, 0.999), 1e-8);
            }
            (theta, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut cfg = tiny(Penalty::Sn, 0.1);
        cfg.lr = f64::MIN_POSITIVE;
        let init = ScoreNet::init(cfg.network.clone(), cfg.seed).unwrap();
        // lr must be > 0, so the smallest positive step stands in for zero
        let out = train(&cfg).unwrap();
        let max = out
            .net
            .params()
            .iter()
            .zip(init.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-300);
        let mut theta = init.params().to_vec();
        let mut st = AdamState::new(theta.len());
        let ones = vec![1.0; theta.len()];
        adam_step(&mut theta, &ones, &mut st, 0.0, (0.9, 0.999), 1e-8);
        assert_eq!(theta, init.params());
    }

    #[test]
    fn runs_are_bit_identical_and_decompose() {
        let cfg = tiny(Penalty::Fp, 0.1);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.net.params().iter().zip(b.net.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        for l in &a.losses {
            assert!((l.total - (l.dsm + 0.1 * l.penalty)).abs() <= 1e-12 * l.total.abs().max(1.0));
        }
    }

    #[test]
    fn baseline_records_zero_penalty() {
        let out = train(&tiny(Penalty::None, 0.0)).unwrap();
        assert!(out.losses.iter().all(|l| l.penalty == 0.0 && l.total == l.dsm));
        assert_eq!(out.epoch_seconds.len(), 3);
    }

    #[test]
    fn observer_sees_every_epoch() {
        let mut seen = Vec::new();
        train_observed(&tiny(Penalty::None, 0.0), |e, _| {
            seen.push(e.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
    }

    #[test]
    fn validation_names_fields() {
        let mut cfg = tiny(Penalty::None, 0.0);
        cfg.adam_betas = (0.9, 1.0);
        match cfg.validate() {
            Err(Error::Invalid { field, .. }) => assert_eq!(field, "train.adam_betas"),
            other => panic!("{other:?}"),
        }
        let mut cfg = tiny(Penalty::None, 0.0);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        assert_eq!(default_lr(Penalty::Fp), 1e-3);
        assert_eq!(default_lr(Penalty::Jac), 5e-4);
    }
}
