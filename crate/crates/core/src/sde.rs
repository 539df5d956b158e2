//! Forward noising SDEs `dx = f(x,t) dt + g(t) dw`.
//!
//! Two families are supported:
//!
//! * VP: `f = -½β(t)x`, `g = √β(t)` with the linear schedule
//!   `β(t) = β_min + t(β_max − β_min)`. The transition kernel has
//!   `α(t) = exp(−½∫₀ᵗβ)`, `σ(t)² = 1 − α(t)²`.
//! * VE: `f = 0`, `σ(t) = σ_min (σ_max/σ_min)ᵗ`, `g(t) = σ(t)√(2 ln(σ_max/σ_min))`, `α = 1`.
//!
//! In both cases `x(t) = α(t) x(0) + σ(t) z` with `z ~ N(0, I)`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SdeKind {
    Vp { beta_min: f64, beta_max: f64 },
    Ve { sigma_min: f64, sigma_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeSchedule {
    #[serde(flatten)]
    pub kind: SdeKind,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        Self::vp(0.1, 20.0)
    }
}

impl SdeSchedule {
    pub const DEFAULT_T_MIN: f64 = 1e-5;

    pub fn vp(beta_min: f64, beta_max: f64) -> Self {
        SdeSchedule {
            kind: SdeKind::Vp { beta_min, beta_max },
            t_min: Self::DEFAULT_T_MIN,
            t_max: 1.0,
        }
    }

    pub fn ve(sigma_min: f64, sigma_max: f64) -> Self {
        SdeSchedule {
            kind: SdeKind::Ve {
                sigma_min,
                sigma_max,
            },
            t_min: Self::DEFAULT_T_MIN,
            t_max: 1.0,
        }
    }

    pub fn with_t_min(mut self, t_min: f64) -> Self {
        self.t_min = t_min;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SdeKind::Vp { beta_min, beta_max } => {
                if !(beta_min > 0.0) {
                    return Err(Error::invalid("schedule.beta_min", "must be > 0"));
                }
                if !(beta_max > beta_min) {
                    return Err(Error::invalid("schedule.beta_max", "must exceed beta_min"));
                }
            }
            SdeKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                if !(sigma_min > 0.0) {
                    return Err(Error::invalid("schedule.sigma_min", "must be > 0"));
                }
                if !(sigma_max > sigma_min) {
                    return Err(Error::invalid(
                        "schedule.sigma_max",
                        "must exceed sigma_min",
                    ));
                }
            }
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max) {
            return Err(Error::invalid("schedule.t_min", "must lie in (0, t_max)"));
        }
        if !(self.t_max <= 1.0) {
            return Err(Error::invalid("schedule.t_max", "must be <= 1"));
        }
        Ok(())
    }

    pub fn is_vp(&self) -> bool {
        matches!(self.kind, SdeKind::Vp { .. })
    }

    fn check_t(&self, t: f64, lo: f64) -> Result<()> {
        if !(t >= lo && t <= self.t_max) {
            return Err(Error::TimeRange {
                t,
                lo,
                hi: self.t_max,
            });
        }
        Ok(())
    }

    /// `β(t)` for VP; zero for VE.
    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Vp { beta_min, beta_max } => beta_min + t * (beta_max - beta_min),
            SdeKind::Ve { .. } => 0.0,
        }
    }

    /// Scalar `c(t)` with `f(x, t) = c(t)·x`.
    pub fn drift_coeff(&self, t: f64) -> f64 {
        -0.5 * self.beta(t)
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_t(t, self.t_min)?;
        Ok(self.drift_unchecked(x, t))
    }

    pub(crate) fn drift_unchecked(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = self.drift_coeff(t);
        x.iter().map(|&xi| c * xi).collect()
    }

    /// `div_x f(x, t)`, closed form: `−½β(t)D` for VP, zero for VE.
    pub fn drift_divergence(&self, dim: usize, t: f64) -> f64 {
        self.drift_coeff(t) * dim as f64
    }

    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_t(t, self.t_min)?;
        Ok(self.diffusion_unchecked(t))
    }

    pub(crate) fn diffusion_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::Vp { .. } => self.beta(t).sqrt(),
            SdeKind::Ve {
                sigma_min,
                sigma_max,
            } => {
                let (_, sigma) = self.kernel_unchecked(t);
                sigma * (2.0 * (sigma_max / sigma_min).ln()).sqrt()
            }
        }
    }

    /// `(α(t), σ(t))` of the Gaussian transition kernel; valid for `t ∈ [0, t_max]`.
    pub fn kernel_params(&self, t: f64) -> Result<(f64, f64)> {
        self.check_t(t, 0.0)?;
        Ok(self.kernel_unchecked(t))
    }

    /// Closed-form kernel parameters without the range check. Finite-difference
    /// stencils step slightly past `t_max`, where the formulas remain valid.
    pub(crate) fn kernel_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            SdeKind::Vp { beta_min, beta_max } => {
                let half_integral = 0.5 * (beta_min * t + 0.5 * (beta_max - beta_min) * t * t);
                let alpha = (-half_integral).exp();
                // 1 − α² = −expm1(−∫β), accurate at small t
                let sigma = (-(-2.0 * half_integral).exp_m1()).max(0.0).sqrt();
                (alpha, sigma)
            }
            SdeKind::Ve {
                sigma_min,
                sigma_max,
            } => (1.0, sigma_min * (sigma_max / sigma_min).powf(t)),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.kernel_unchecked(t).1
    }

    /// `x(t) = α(t)·x0 + σ(t)·z`.
    pub fn perturb(&self, x0: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
        check_len(x0.len(), z.len())?;
        let (alpha, sigma) = self.kernel_params(t)?;
        Ok(x0
            .iter()
            .zip(z)
            .map(|(&x, &zi)| alpha * x + sigma * zi)
            .collect())
    }

    /// Standard deviation of the reference distribution at `t_max`.
    pub fn prior_std(&self) -> f64 {
        match self.kind {
            SdeKind::Vp { .. } => 1.0,
            SdeKind::Ve { sigma_max, .. } => sigma_max,
        }
    }
}
