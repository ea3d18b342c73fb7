//! Continuous-time diffusion models on top of `dmtk_nn`: the four noise
//! schedules, parameterization conversions, training losses, reverse-process
//! solvers, and the guidance/masking machinery around the sampling loop.
//!
//! The crate is organized around one contract: a [`DenoiseModel`] declares a
//! [`PredictionKind`] (noise, data, preconditioned denoiser, or velocity),
//! and every solver accepts any model whose kind can be converted to what
//! its update rule consumes. Schedules expose only (alpha, sigma) and
//! derived quantities, so new schedules slot in without touching solvers.

pub mod guide;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod prediction;
pub mod schedule;
pub mod solver;
pub mod train;

pub use guide::{
    apply_mask, best_candidate, cfg_combine, cg_adjust, diffusion_x, generate_candidates,
    guided_prediction, train_guidance_classifier, warm_start, ClassifierGuide, Guidance, MaskMode,
    QuadraticField, SampleMask, ScalarField, TrainedValueClassifier, XtraConfig,
};
pub use loss::{cfg_dropout, edm_loss, rf_loss, score_matching_loss, weighted_mse};
pub use model::{edm_denoise, CondBatch, Condition, DenoiseModel, Denoiser, DenoiserConfig};
pub use prediction::{data_to_noise, edm_coeffs, noise_to_data, EdmCoeffs, EdmPrecond, PredictionKind};
pub use schedule::{GridSpacing, NoiseSchedule, ScheduleKind, TimeGrid};
pub use solver::{
    ddim_step, ddpm_step, dpm_solver_1_step, edm_euler_step, edm_heun_step, ode_dpmpp_2m_step,
    rf_euler_step, run_chain, sample, sde_dpmpp_1_step, ChainOpts, SampleConfig, SolverKind,
};
pub use train::{eval_loss, train, TrainConfig, TrainSet, Trainer};

pub use dmtk_nn::Matrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("grid error: {0}")]
    Grid(String),
    #[error("numeric error{}: {what}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, what: String },
    #[error(transparent)]
    Nn(#[from] dmtk_nn::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attaches the failing step index to a numeric error that lacks one.
    pub(crate) fn with_step(self, k: usize) -> Self {
        match self {
            Error::Numeric { step: None, what } => Error::Numeric { step: Some(k), what },
            other => other,
        }
    }
}

pub(crate) fn numeric_err(what: impl Into<String>) -> Error {
    Error::Numeric { step: None, what: what.into() }
}
