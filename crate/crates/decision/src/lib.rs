//! Decision-making layer on top of `dmtk_diffusion`: toy point-mass control
//! environments with scripted data-collection policies, offline trajectory
//! datasets with normalization and horizon windowing, and the diffusion
//! planner/policy/synthesizer agents built from those pieces.

pub mod agent;
pub mod data;
pub mod env;

pub use agent::{
    evaluate, evaluate_episode, synther_upsample, AdaptConfig, Agent, AugmentedDataset, BcConfig,
    ChunkConfig, DdAgent, DdConfig, DiffuserAgent, DiffuserConfig, DiffusionBcAgent,
    DiffusionPolicyAgent, Discriminator, DqlAgent, DqlConfig, EvalReport, EvolveReport, IdqlAgent,
    IdqlConfig, PlannerConfig, RoundReport, SyntherConfig,
};
pub use data::{
    collect, load_dataset, normalized_score, save_dataset, subtask_score, window, FieldStats,
    MetricsRow, Normalizer, NormalizerKind, TrajectoryDataset, Transition, Window,
};
pub use env::{
    episode_seed, multi_step_wrapper, parallel_batch, scripted_policies, Env, EnvState,
    MultiGoalReach, MultiGoalReachSpec, ParallelBatch, PointMaze, PointMazeSpec, Policy,
    PolicyTier, ScriptedPolicy,
};

pub use dmtk_diffusion::Matrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error at byte {offset}: {what}")]
    Format { offset: u64, what: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diffusion(#[from] dmtk_diffusion::Error),
    #[error(transparent)]
    Nn(#[from] dmtk_nn::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
