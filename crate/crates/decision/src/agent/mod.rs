//! Decision-making agents built on the diffusion toolkit: three trajectory
//! planners, five action policies, and a transition synthesizer, plus the
//! shared evaluation harness. Every agent touches the diffusion machinery
//! only through its public interfaces (denoiser, solvers, guidance, masks).

mod parts;
mod planner;
mod policy;
mod qlearn;
mod synther;

pub use parts::{concat_rows, expectile_weight, InverseDynamics, QCritic, ValueNet};
pub use planner::{
    AdaptConfig, DdAgent, DdConfig, Discriminator, DiffuserAgent, DiffuserConfig, EvolveReport,
    RoundReport,
};
pub use policy::{BcConfig, ChunkConfig, DiffusionBcAgent, DiffusionPolicyAgent};
pub use qlearn::{edp_approx_action, DqlAgent, DqlConfig, IdqlAgent, IdqlConfig};
pub use synther::{synther_upsample, AugmentedDataset, SyntherConfig};

use rand::{Rng, RngCore};

use dmtk_diffusion::solver::{run_chain, ChainOpts};
use dmtk_diffusion::{
    CondBatch, Condition, DenoiseModel, Denoiser, Guidance, NoiseSchedule, SolverKind,
};
use dmtk_nn::{mat, Matrix};

use crate::data::Normalizer;
use crate::env::{Env, EnvState};
use crate::{Error, Result};

/// A trained decision-maker under evaluation. Unlike the scripted `Policy`,
/// acting can fail (sampling is fallible); all its randomness comes from the
/// rng handed in, so episodes replay exactly from their seed.
pub trait Agent: Send {
    fn name(&self) -> &'static str;
    fn begin_episode(&mut self, env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<()>;
    fn act(&mut self, env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
    fn clone_agent(&self) -> Box<dyn Agent>;
}

/// Outcome of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub succeeded: Vec<bool>,
}

impl EvalReport {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn success_rate(&self) -> f64 {
        if self.succeeded.is_empty() {
            return 0.0;
        }
        self.succeeded.iter().filter(|s| **s).count() as f64 / self.succeeded.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }
}

/// Runs `episodes` evaluation episodes. Episode e draws every bit of
/// randomness (reset, sampling) from a stream seeded with `base_seed + e`,
/// the same derivation data collection uses, so runs are reproducible and
/// episodes can be partitioned across workers without changing results.
pub fn evaluate(
    env: &dyn Env,
    agent: &mut dyn Agent,
    episodes: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    let mut returns = Vec::with_capacity(episodes);
    let mut succeeded = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let (ret, ok) = evaluate_episode(env, agent, crate::env::episode_seed(base_seed, e))?;
        returns.push(ret);
        succeeded.push(ok);
    }
    Ok(EvalReport { returns, succeeded })
}

/// One evaluation episode from an explicit seed; the unit workers execute.
pub fn evaluate_episode(env: &dyn Env, agent: &mut dyn Agent, seed: u64) -> Result<(f64, bool)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset(&mut rng);
    agent.begin_episode(env, &state, &mut rng)?;
    let mut total = 0.0;
    while !state.terminal {
        let a = agent.act(env, &state, &mut rng)?;
        state = env.step(&state, &a)?;
        total += state.reward;
    }
    Ok((total, env.succeeded(&state)))
}

/// Shared sampling knobs for the trajectory planners, as one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub n_candidates: usize,
    pub guidance_scale: f64,
    pub solver: SolverKind,
    pub n_steps: usize,
    pub temperature: f64,
    /// Conditioning return for DD, on the dataset's normalized [0, 1] scale.
    pub target_return: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 8,
            n_candidates: 64,
            guidance_scale: 1.0,
            solver: SolverKind::Ddpm,
            n_steps: 10,
            temperature: 1.0,
            target_return: 0.9,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::Config(format!("horizon {} must be at least 2", self.horizon)));
        }
        if self.n_candidates < 1 {
            return Err(Error::Config("candidate count must be at least 1".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance scale {} must be finite", self.guidance_scale)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.target_return.is_finite()) {
            return Err(Error::Config(format!("target return {} must be finite", self.target_return)));
        }
        Ok(())
    }
}

/// Samples a conditioned batch by running the reverse chain directly on the
/// caller's rng, so callers control determinism end to end. Initial states
/// are standard normal draws; the VP policy schedules need no sigma scaling.
pub(crate) fn sample_conditioned(
    model: &Denoiser,
    sched: &NoiseSchedule,
    solver: SolverKind,
    n_steps: usize,
    cond: &Condition,
    batch: usize,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    debug_assert!(sched.kind != dmtk_diffusion::ScheduleKind::Edm);
    let grid = sched.time_grid(n_steps, sched.default_spacing())?;
    let guidance = Guidance::Conditional(cond.clone());
    let opts = ChainOpts {
        solver,
        temperature,
        clip: Some((-1.0, 1.0)),
        guidance: &guidance,
        mask: None,
    };
    let x = mat::randn(batch, model.data_dim(), rng);
    Ok(run_chain(model, sched, &grid, &opts, x, rng)?)
}

/// A denoiser bound to a fixed per-row condition batch, so solvers (whose
/// guidance argument is shared across rows) can drive rows with different
/// conditions. The guidance passed at sampling time must be `None`.
pub(crate) struct RowCondModel<'a> {
    pub inner: &'a Denoiser,
    pub conds: CondBatch,
}

impl DenoiseModel for RowCondModel<'_> {
    fn kind(&self) -> dmtk_diffusion::PredictionKind {
        self.inner.kind()
    }
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }
    fn predict(&self, x: &Matrix, t: f64, _cond: &CondBatch) -> dmtk_diffusion::Result<Matrix> {
        self.inner.predict(x, t, &self.conds)
    }
}

/// Normalizes rows then clamps to the unit box, the input convention every
/// learned component here uses for actions.
pub(crate) fn clamp_unit(mut m: Matrix) -> Matrix {
    m.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    m
}

pub(crate) fn vec_to_row(v: &[f64]) -> Matrix {
    Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Denormalizes a normalized action row and clamps to the env bound.
pub(crate) fn denorm_action(row: &[f64], act_norm: &Normalizer, bound: f64) -> Vec<f64> {
    act_norm
        .inverse_row(row)
        .into_iter()
        .map(|v| v.clamp(-bound, bound))
        .collect()
}

/// Draws one index from unnormalized nonnegative weights.
pub(crate) fn categorical_draw(weights: &[f64], rng: &mut dyn RngCore) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numeric(format!("categorical weights sum to {total}")));
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w < 0.0 {
            return Err(Error::Numeric(format!("negative categorical weight {w}")));
        }
        u -= w;
        if u <= 0.0 {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}
