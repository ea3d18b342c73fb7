//! Trajectory planners. The gradient-guided planner models joint
//! state-action windows and reranks sampled candidates with a trained value
//! classifier, optionally improving itself on its own filtered generations.
//! The classifier-free planner models state windows conditioned on episode
//! return and recovers actions through inverse dynamics.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmtk_diffusion::{
    best_candidate, generate_candidates, sample, train, train_guidance_classifier,
    ClassifierGuide, Condition, Denoiser, DenoiserConfig, Guidance, NoiseSchedule,
    PredictionKind, SampleConfig, SampleMask, TrainConfig, TrainSet, TrainedValueClassifier,
};
use dmtk_nn::Matrix;

use super::{denorm_action, vec_to_row, Agent, InverseDynamics, PlannerConfig};
use crate::data::{window, Normalizer, NormalizerKind, TrajectoryDataset, Window};
use crate::env::{Env, EnvState};
use crate::{Error, Result};

/// One row per window: [s_0, a_0, s_1, a_1, ...] in normalized coordinates.
fn interleaved_rows(
    windows: &[Window],
    obs_norm: &Normalizer,
    act_norm: &Normalizer,
    obs_dim: usize,
    act_dim: usize,
) -> Matrix {
    let step = obs_dim + act_dim;
    let mut out = Matrix::zeros((windows.len(), windows[0].steps.len() * step));
    for (i, w) in windows.iter().enumerate() {
        for (k, t) in w.steps.iter().enumerate() {
            let s = obs_norm.forward_row(&t.s);
            let a = act_norm.forward_row(&t.a);
            for (j, v) in s.iter().enumerate() {
                out[[i, k * step + j]] = v.clamp(-1.0, 1.0);
            }
            for (j, v) in a.iter().enumerate() {
                out[[i, k * step + obs_dim + j]] = v.clamp(-1.0, 1.0);
            }
        }
    }
    out
}

/// One row per window: [s_0, s_1, ...] in normalized coordinates.
fn state_rows(windows: &[Window], obs_norm: &Normalizer, obs_dim: usize) -> Matrix {
    let mut out = Matrix::zeros((windows.len(), windows[0].steps.len() * obs_dim));
    for (i, w) in windows.iter().enumerate() {
        for (k, t) in w.steps.iter().enumerate() {
            let s = obs_norm.forward_row(&t.s);
            for (j, v) in s.iter().enumerate() {
                out[[i, k * obs_dim + j]] = v.clamp(-1.0, 1.0);
            }
        }
    }
    out
}

/// Undiscounted return from each window's start to the end of its episode.
fn window_returns(ds: &TrajectoryDataset, windows: &[Window]) -> Vec<f64> {
    windows
        .iter()
        .map(|w| ds.episodes()[w.episode][w.start..].iter().map(|t| t.r).sum())
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Value at quantile `q` of the (unsorted) input, by linear interpolation.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone)]
pub struct DiffuserConfig {
    pub planner: PlannerConfig,
    pub hidden: Vec<usize>,
    pub hidden_guide: Vec<usize>,
    pub train: TrainConfig,
    pub guide_train: TrainConfig,
}

impl Default for DiffuserConfig {
    fn default() -> Self {
        DiffuserConfig {
            planner: PlannerConfig::default(),
            hidden: vec![128, 128],
            hidden_guide: vec![64, 64],
            train: TrainConfig::default(),
            guide_train: TrainConfig { gradient_steps: 1000, ..TrainConfig::default() },
        }
    }
}

/// Plans whole state-action windows with an unconditional denoiser. The
/// current observation is frozen into the first state slot, candidates are
/// steered and then scored by a value classifier trained on returns-to-go,
/// and the first action of the best candidate is executed.
#[derive(Clone)]
pub struct DiffuserAgent {
    model: Denoiser,
    guide: TrainedValueClassifier,
    sched: NoiseSchedule,
    obs_norm: Normalizer,
    act_norm: Normalizer,
    bound: f64,
    obs_dim: usize,
    act_dim: usize,
    cfg: DiffuserConfig,
    trace: Vec<f64>,
}

impl DiffuserAgent {
    pub fn train(ds: &TrajectoryDataset, bound: f64, cfg: DiffuserConfig) -> Result<Self> {
        cfg.planner.validate()?;
        let obs_norm = Normalizer::from_stats(ds.obs_stats(), NormalizerKind::MinMax);
        let act_norm = Normalizer::from_stats(ds.act_stats(), NormalizerKind::MinMax);
        let windows = window(ds, cfg.planner.horizon)?;
        let x0 = interleaved_rows(&windows, &obs_norm, &act_norm, ds.obs_dim(), ds.act_dim());
        let rtg = window_returns(ds, &windows);
        let (mean, std) = mean_std(&rtg);
        let scale = if std > 0.0 { std } else { 1.0 };
        let targets: Vec<f64> = rtg.iter().map(|r| (r - mean) / scale).collect();

        let sched = NoiseSchedule::linear();
        let mut model = Denoiser::new(
            &DenoiserConfig::new(x0.ncols(), &cfg.hidden, PredictionKind::Noise, sched)
                .with_seed(cfg.train.seed),
        )?;
        let trace = train(&mut model, &TrainSet::unconditioned(x0.clone()), &cfg.train)?;
        let guide =
            train_guidance_classifier(&x0, &targets, &sched, &cfg.hidden_guide, &cfg.guide_train)?;
        Ok(DiffuserAgent {
            model,
            guide,
            sched,
            obs_norm,
            act_norm,
            bound,
            obs_dim: ds.obs_dim(),
            act_dim: ds.act_dim(),
            cfg,
            trace,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn set_guidance_scale(&mut self, w: f64) {
        self.cfg.planner.guidance_scale = w;
    }

    fn first_slot_mask(&self, obs: &[f64]) -> Result<SampleMask> {
        let width = self.model.data_dim();
        let mut mask = Matrix::zeros((1, width));
        let mut known = Matrix::zeros((1, width));
        let s = self.obs_norm.forward_row(obs);
        for (j, v) in s.iter().enumerate() {
            mask[[0, j]] = 1.0;
            known[[0, j]] = v.clamp(-1.0, 1.0);
        }
        Ok(SampleMask::new(mask, known)?)
    }

    /// Generates `n` candidate plans for the observation and scores them with
    /// the value classifier. Rows are normalized interleaved windows whose
    /// first state slot equals the normalized observation exactly.
    pub fn plan_candidates(
        &self,
        obs: &[f64],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(Matrix, Vec<f64>)> {
        let mask = self.first_slot_mask(obs)?;
        let guide = ClassifierGuide::new(Arc::new(self.guide.clone()), self.cfg.planner.guidance_scale)?;
        let sc = SampleConfig {
            solver: self.cfg.planner.solver,
            n_steps: self.cfg.planner.n_steps,
            batch: n,
            temperature: self.cfg.planner.temperature,
            clip: Some((-1.0, 1.0)),
            spacing: None,
            seed: rng.next_u64(),
        };
        let (cands, scores) =
            generate_candidates(&self.model, &self.sched, &sc, &Guidance::Cg(guide), Some(&mask), n)?;
        let scores = scores.ok_or_else(|| {
            Error::Numeric("gradient-guided sampling returned no candidate scores".into())
        })?;
        Ok((cands, scores))
    }

    /// Evolution loop: generate plans freely, keep the ones the discriminator
    /// accepts, fine-tune on them. Rounds where nothing passes are skipped
    /// with a warning and leave the weights untouched.
    pub fn evolve(&mut self, disc: &Discriminator, cfg: &AdaptConfig) -> Result<EvolveReport> {
        if cfg.rounds == 0 || cfg.per_round == 0 {
            return Err(Error::Config("evolution needs at least one round and one plan per round".into()));
        }
        if !(0.0..=1.0).contains(&disc.return_quantile) {
            return Err(Error::Config(format!(
                "return quantile {} outside [0, 1]",
                disc.return_quantile
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for round in 0..cfg.rounds {
            let guide =
                ClassifierGuide::new(Arc::new(self.guide.clone()), self.cfg.planner.guidance_scale)?;
            let sc = SampleConfig {
                solver: self.cfg.planner.solver,
                n_steps: self.cfg.planner.n_steps,
                batch: cfg.per_round,
                temperature: self.cfg.planner.temperature,
                clip: Some((-1.0, 1.0)),
                spacing: None,
                seed: rng.next_u64(),
            };
            let plans = sample(&self.model, &self.sched, &sc, &Guidance::Cg(guide), None, None)?;
            let mut residuals = Vec::with_capacity(cfg.per_round);
            let mut returns = Vec::with_capacity(cfg.per_round);
            for i in 0..plans.nrows() {
                let (res, ret) = self.plan_physics(&plans.row(i).to_vec(), disc);
                residuals.push(res);
                returns.push(ret);
            }
            let threshold = quantile(&returns, disc.return_quantile);
            let kept_idx: Vec<usize> = (0..plans.nrows())
                .filter(|&i| residuals[i] <= disc.residual_max && returns[i] >= threshold)
                .collect();
            let mean_residual_all = residuals.iter().sum::<f64>() / residuals.len() as f64;
            if kept_idx.is_empty() {
                eprintln!(
                    "evolution round {round}: discriminator rejected all {} plans, skipping fine-tune",
                    cfg.per_round
                );
                rounds.push(RoundReport {
                    round,
                    generated: cfg.per_round,
                    kept: 0,
                    skipped: true,
                    mean_residual_all,
                    mean_residual_kept: f64::NAN,
                    return_threshold: threshold,
                });
                continue;
            }
            let mut kept_rows = Matrix::zeros((kept_idx.len(), plans.ncols()));
            for (r, &i) in kept_idx.iter().enumerate() {
                kept_rows.row_mut(r).assign(&plans.row(i));
            }
            let mean_residual_kept =
                kept_idx.iter().map(|&i| residuals[i]).sum::<f64>() / kept_idx.len() as f64;
            train(&mut self.model, &TrainSet::unconditioned(kept_rows), &cfg.fine_tune)?;
            rounds.push(RoundReport {
                round,
                generated: cfg.per_round,
                kept: kept_idx.len(),
                skipped: false,
                mean_residual_all,
                mean_residual_kept,
                return_threshold: threshold,
            });
        }
        Ok(EvolveReport { rounds })
    }

    /// Mean one-step dynamics residual and surrogate return of one
    /// normalized plan row, evaluated in raw coordinates.
    fn plan_physics(&self, row: &[f64], disc: &Discriminator) -> (f64, f64) {
        let h = self.cfg.planner.horizon;
        let step = self.obs_dim + self.act_dim;
        let mut states = Vec::with_capacity(h);
        let mut acts = Vec::with_capacity(h);
        for k in 0..h {
            let s = self.obs_norm.inverse_row(&row[k * step..k * step + self.obs_dim]);
            let a: Vec<f64> = self
                .act_norm
                .inverse_row(&row[k * step + self.obs_dim..(k + 1) * step])
                .into_iter()
                .map(|v| v.clamp(-self.bound, self.bound))
                .collect();
            states.push(s);
            acts.push(a);
        }
        let mut residual = 0.0;
        let mut ret = 0.0;
        for k in 0..h {
            ret += (disc.reward)(&states[k], &acts[k]);
            if k + 1 < h {
                let pred = (disc.dynamics)(&states[k], &acts[k]);
                residual += pred
                    .iter()
                    .zip(&states[k + 1])
                    .map(|(p, s)| (p - s).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        (residual / (h - 1) as f64, ret)
    }
}

impl Agent for DiffuserAgent {
    fn name(&self) -> &'static str {
        "diffuser"
    }

    fn begin_episode(&mut self, _env: &dyn Env, _state: &EnvState, _rng: &mut dyn RngCore) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let (cands, scores) =
            self.plan_candidates(&state.observation, self.cfg.planner.n_candidates, rng)?;
        let best = best_candidate(&scores)?;
        let a_norm: Vec<f64> = (0..self.act_dim)
            .map(|j| cands[[best, self.obs_dim + j]])
            .collect();
        Ok(denorm_action(&a_norm, &self.act_norm, self.bound))
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(self.clone())
    }
}

/// Plan filter for the evolution loop: a plan passes when its mean dynamics
/// residual stays under `residual_max` and its surrogate return reaches the
/// batch quantile `return_quantile`.
#[derive(Clone)]
pub struct Discriminator {
    pub residual_max: f64,
    pub return_quantile: f64,
    /// Reward surrogate r(s, a) in raw coordinates.
    pub reward: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    /// One-step dynamics model s' = f(s, a) in raw coordinates.
    pub dynamics: Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub rounds: usize,
    pub per_round: usize,
    pub fine_tune: TrainConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub generated: usize,
    pub kept: usize,
    pub skipped: bool,
    pub mean_residual_all: f64,
    /// NaN when the round was skipped.
    pub mean_residual_kept: f64,
    pub return_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct EvolveReport {
    pub rounds: Vec<RoundReport>,
}

impl EvolveReport {
    pub fn total_kept(&self) -> usize {
        self.rounds.iter().map(|r| r.kept).sum()
    }
}

#[derive(Debug, Clone)]
pub struct DdConfig {
    /// `guidance_scale` is the classifier-free weight; `target_return` is the
    /// conditioning value on the dataset's normalized return scale.
    pub planner: PlannerConfig,
    pub hidden: Vec<usize>,
    pub hidden_inv: Vec<usize>,
    pub cond_dropout: f64,
    pub train: TrainConfig,
    pub inv_steps: usize,
    pub inv_batch: usize,
}

impl Default for DdConfig {
    fn default() -> Self {
        DdConfig {
            planner: PlannerConfig::default(),
            hidden: vec![128, 128],
            hidden_inv: vec![64, 64],
            cond_dropout: 0.2,
            train: TrainConfig::default(),
            inv_steps: 3000,
            inv_batch: 64,
        }
    }
}

/// Return-conditioned state planner: a denoiser over state windows trained
/// with condition dropout, sampled with classifier-free weighting toward a
/// target return, with actions recovered by inverse dynamics between the
/// first two planned states.
#[derive(Clone)]
pub struct DdAgent {
    model: Denoiser,
    inv: InverseDynamics,
    sched: NoiseSchedule,
    obs_norm: Normalizer,
    act_norm: Normalizer,
    /// Raw episode-return range behind the normalized conditioning scale.
    ret_lo: f64,
    ret_hi: f64,
    bound: f64,
    obs_dim: usize,
    cfg: DdConfig,
    trace: Vec<f64>,
}

impl DdAgent {
    pub fn train(ds: &TrajectoryDataset, bound: f64, cfg: DdConfig) -> Result<Self> {
        cfg.planner.validate()?;
        if !(0.0..1.0).contains(&cfg.cond_dropout) {
            return Err(Error::Config(format!(
                "condition dropout {} outside [0, 1)",
                cfg.cond_dropout
            )));
        }
        let obs_norm = Normalizer::from_stats(ds.obs_stats(), NormalizerKind::MinMax);
        let act_norm = Normalizer::from_stats(ds.act_stats(), NormalizerKind::MinMax);
        let windows = window(ds, cfg.planner.horizon)?;
        let x0 = state_rows(&windows, &obs_norm, ds.obs_dim());

        let returns = ds.returns();
        let ret_lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let ret_hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = ret_hi - ret_lo;
        let conds: Vec<Condition> = windows
            .iter()
            .map(|w| {
                let y = if span > 0.0 { (returns[w.episode] - ret_lo) / span } else { 0.5 };
                Condition::Value(vec![y])
            })
            .collect();

        let sched = NoiseSchedule::linear();
        let mut model = Denoiser::new(
            &DenoiserConfig::new(x0.ncols(), &cfg.hidden, PredictionKind::Noise, sched)
                .with_cond_dim(1)
                .with_seed(cfg.train.seed),
        )?;
        let train_cfg = TrainConfig { cond_dropout: cfg.cond_dropout, ..cfg.train.clone() };
        let trace = train(&mut model, &TrainSet::with_conds(x0, conds)?, &train_cfg)?;

        let s = obs_norm.forward(&ds.obs_matrix());
        let s2 = obs_norm.forward(&ds.next_obs_matrix());
        let a = super::clamp_unit(act_norm.forward(&ds.action_matrix()));
        let mut inv = InverseDynamics::new(
            ds.obs_dim(),
            ds.act_dim(),
            &cfg.hidden_inv,
            1.0,
            cfg.train.learning_rate,
            cfg.train.seed.wrapping_add(1),
        )?;
        let mut inv_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(3));
        inv.train(&s, &s2, &a, cfg.inv_steps, cfg.inv_batch, &mut inv_rng)?;

        Ok(DdAgent {
            model,
            inv,
            sched,
            obs_norm,
            act_norm,
            ret_lo,
            ret_hi,
            bound,
            obs_dim: ds.obs_dim(),
            cfg,
            trace,
        })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// Raw dataset return behind normalized conditioning value 1.
    pub fn return_range(&self) -> (f64, f64) {
        (self.ret_lo, self.ret_hi)
    }

    pub fn set_target_return(&mut self, y: f64) {
        self.cfg.planner.target_return = y;
    }

    /// One planned state window (normalized) for an observation, conditioned
    /// on `target_return` with classifier-free weight `weight`.
    pub fn plan_states(&self, obs: &[f64], target_return: f64, weight: f64, seed: u64) -> Result<Matrix> {
        let width = self.model.data_dim();
        let mut mask = Matrix::zeros((1, width));
        let mut known = Matrix::zeros((1, width));
        for (j, v) in self.obs_norm.forward_row(obs).iter().enumerate() {
            mask[[0, j]] = 1.0;
            known[[0, j]] = v.clamp(-1.0, 1.0);
        }
        let sm = SampleMask::new(mask, known)?;
        let guidance = Guidance::Cfg {
            cond: Condition::Value(vec![target_return]),
            weight,
        };
        let sc = SampleConfig {
            solver: self.cfg.planner.solver,
            n_steps: self.cfg.planner.n_steps,
            batch: 1,
            temperature: self.cfg.planner.temperature,
            clip: Some((-1.0, 1.0)),
            spacing: None,
            seed,
        };
        Ok(sample(&self.model, &self.sched, &sc, &guidance, Some(&sm), None)?)
    }
}

impl Agent for DdAgent {
    fn name(&self) -> &'static str {
        "dd"
    }

    fn begin_episode(&mut self, _env: &dyn Env, _state: &EnvState, _rng: &mut dyn RngCore) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let plan = self.plan_states(
            &state.observation,
            self.cfg.planner.target_return,
            self.cfg.planner.guidance_scale,
            rng.next_u64(),
        )?;
        let s_now: Vec<f64> = (0..self.obs_dim).map(|j| plan[[0, j]]).collect();
        let s_next: Vec<f64> = (0..self.obs_dim).map(|j| plan[[0, self.obs_dim + j]]).collect();
        let a_norm = self.inv.predict(&vec_to_row(&s_now), &vec_to_row(&s_next))?;
        Ok(denorm_action(&a_norm.row(0).to_vec(), &self.act_norm, self.bound))
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(self.clone())
    }
}
