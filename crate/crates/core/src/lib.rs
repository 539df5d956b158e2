//! Score-based diffusion laboratory.
//!
//! Small MLP score networks are trained by denoising score matching on
//! analytic Gaussian-mixture targets, optionally with one of four penalties
//! (Fokker–Planck error, score norm, Jacobian Frobenius norm, divergence).
//! The targets have closed-form time marginals, so every quantity a trained
//! network produces can be compared against an exact oracle.
//!
//! Module map:
//!
//! - [`sde`]: VP and VE forward processes and their Gaussian kernels.
//! - [`target`]: Gaussian mixtures, marginal scores and derivative oracles.
//! - [`net`]: the score MLP with its jet-based differentiation engine.
//! - [`objective`]: DSM loss, operator `L`, FP error, penalties.
//! - [`train`]: Adam training loop.
//! - [`sampler`]: reverse-time Euler–Maruyama generation.
//! - [`diagnostics`]: residual, loss and divergence curves and field dumps.
//! - [`metrics`]: Fréchet distance, density/coverage, assignment entropy.
//! - [`config`] and [`runner`]: JSON experiment configs and run directories.
//! - [`table`]: bit-exact CSV tables.
//! - [`rng`]: named, seed-derived random streams.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod sde;
pub mod table;
pub mod target;
pub mod train;

pub use error::{Error, Result};
pub use field::ScoreField;
pub use net::{Architecture, ScoreNet};
pub use objective::{ObjectiveSpec, Penalty};
pub use sde::SdeSchedule;
pub use target::GaussianMixture;

/// The guide's chapters, compiled so that their snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/forward.md")]
    struct Forward;
    #[doc = include_str!("../../../book/src/scores.md")]
    struct Scores;
    #[doc = include_str!("../../../book/src/residual.md")]
    struct Residual;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    struct Diagnostics;
    #[doc = include_str!("../../../book/src/runs.md")]
    struct Runs;
}
