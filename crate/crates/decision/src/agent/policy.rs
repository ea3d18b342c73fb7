//! Observation-conditioned action diffusion: single-action behavior cloning
//! with optional extra refinement passes, and chunked action sequences
//! executed open-loop between replans.

use std::collections::VecDeque;

use rand::RngCore;

use dmtk_diffusion::solver::ChainOpts;
use dmtk_diffusion::{
    diffusion_x, train, Condition, Denoiser, DenoiserConfig, Guidance, NoiseSchedule,
    PredictionKind, SolverKind, TrainConfig, TrainSet,
};
use dmtk_nn::{mat, Matrix};

use super::{clamp_unit, denorm_action, sample_conditioned, Agent};
use crate::data::{Normalizer, NormalizerKind, TrajectoryDataset, Transition};
use crate::env::{Env, EnvState};
use crate::{Error, Result};

/// Stacks the last `t_s` observations (oldest first) into one condition
/// payload, repeating the earliest observation when history is short.
pub(crate) fn stacked_condition(history: &[Vec<f64>], t_s: usize, norm: &Normalizer) -> Condition {
    assert!(!history.is_empty(), "condition requires at least one observation");
    let mut payload = Vec::with_capacity(t_s * history[0].len());
    for i in 0..t_s {
        let idx = (history.len() + i).saturating_sub(t_s);
        let row = &history[idx.min(history.len() - 1)];
        payload.extend(norm.forward_row(row));
    }
    Condition::Value(payload)
}

/// Per-transition conditions over a whole dataset, matching the layout
/// `stacked_condition` produces at decision time.
fn history_conditions(ds: &TrajectoryDataset, t_s: usize, norm: &Normalizer) -> Vec<Condition> {
    let mut conds = Vec::with_capacity(ds.transition_count());
    for ep in ds.episodes() {
        let mut history: Vec<Vec<f64>> = Vec::new();
        for t in ep {
            history.push(t.s.clone());
            conds.push(stacked_condition(&history, t_s, norm));
        }
    }
    conds
}

#[derive(Debug, Clone)]
pub struct BcConfig {
    /// Observations stacked into the condition.
    pub t_s: usize,
    /// Extra denoising refinements after the chain (0 disables).
    pub m: usize,
    pub stochastic_refine: bool,
    pub solver: SolverKind,
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            t_s: 2,
            m: 8,
            stochastic_refine: false,
            solver: SolverKind::Ddim,
            n_steps: 10,
            hidden: vec![128, 128],
            train: TrainConfig::default(),
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_s == 0 {
            return Err(Error::Config("observation history must cover at least 1 step".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("policy network needs at least one hidden layer".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Behavior cloning with an action diffusion model conditioned on the last
/// `t_s` observations; sampling can run extra refinement passes.
pub struct DiffusionBcAgent {
    model: Denoiser,
    sched: NoiseSchedule,
    obs_norm: Normalizer,
    act_norm: Normalizer,
    bound: f64,
    cfg: BcConfig,
    trace: Vec<f64>,
    history: Vec<Vec<f64>>,
}

impl DiffusionBcAgent {
    pub fn train(ds: &TrajectoryDataset, bound: f64, cfg: BcConfig) -> Result<Self> {
        Self::train_with_extra(ds, &[], bound, cfg)
    }

    /// Trains on the dataset plus extra standalone transitions (each treated
    /// as its own single-step episode), the path synthetic data takes in.
    pub fn train_with_extra(
        ds: &TrajectoryDataset,
        extra: &[Transition],
        bound: f64,
        cfg: BcConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if ds.transition_count() + extra.len() == 0 {
            return Err(Error::Config("cannot train behavior cloning on an empty dataset".into()));
        }
        let obs_norm = Normalizer::from_stats(ds.obs_stats(), NormalizerKind::MeanStd);
        let act_norm = Normalizer::from_stats(ds.act_stats(), NormalizerKind::MinMax);

        let n = ds.transition_count() + extra.len();
        let mut x0 = Matrix::zeros((n, ds.act_dim()));
        let mut conds = history_conditions(ds, cfg.t_s, &obs_norm);
        for (i, t) in ds.transitions().enumerate() {
            let a = clamp_unit(super::vec_to_row(&act_norm.forward_row(&t.a)));
            x0.row_mut(i).assign(&a.row(0));
        }
        for (k, t) in extra.iter().enumerate() {
            let i = ds.transition_count() + k;
            let a = clamp_unit(super::vec_to_row(&act_norm.forward_row(&t.a)));
            x0.row_mut(i).assign(&a.row(0));
            conds.push(stacked_condition(std::slice::from_ref(&t.s), cfg.t_s, &obs_norm));
        }

        let sched = NoiseSchedule::linear();
        let mut model = Denoiser::new(
            &DenoiserConfig::new(ds.act_dim(), &cfg.hidden, PredictionKind::Noise, sched)
                .with_cond_dim(cfg.t_s * ds.obs_dim())
                .with_seed(cfg.train.seed),
        )?;
        let data = TrainSet::with_conds(x0, conds)?;
        let trace = train(&mut model, &data, &cfg.train)?;
        Ok(DiffusionBcAgent {
            model,
            sched,
            obs_norm,
            act_norm,
            bound,
            cfg,
            trace,
            history: Vec::new(),
        })
    }

    /// Reassembles an agent around an already-trained model; lets tests and
    /// pipelines share one network between agent frontends.
    pub fn from_parts(
        model: Denoiser,
        obs_norm: Normalizer,
        act_norm: Normalizer,
        bound: f64,
        cfg: BcConfig,
    ) -> Self {
        let sched = *model.schedule();
        DiffusionBcAgent {
            model,
            sched,
            obs_norm,
            act_norm,
            bound,
            cfg,
            trace: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn normalizers(&self) -> (&Normalizer, &Normalizer) {
        (&self.obs_norm, &self.act_norm)
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// Draws `n` raw-space actions for an observation history in one batch.
    pub fn sample_actions_at(
        &self,
        history: &[Vec<f64>],
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Matrix> {
        let cond = stacked_condition(history, self.cfg.t_s, &self.obs_norm);
        let grid = self.sched.time_grid(self.cfg.n_steps, self.sched.default_spacing())?;
        let guidance = Guidance::Conditional(cond);
        let opts = ChainOpts {
            solver: self.cfg.solver,
            temperature: 1.0,
            clip: Some((-1.0, 1.0)),
            guidance: &guidance,
            mask: None,
        };
        let x = mat::randn(n, self.model.data_dim(), rng);
        let mut out = dmtk_diffusion::run_chain(&self.model, &self.sched, &grid, &opts, x, rng)?;
        if self.cfg.m > 0 {
            out = diffusion_x(
                &self.model,
                &self.sched,
                &grid,
                self.cfg.m,
                &opts,
                self.cfg.stochastic_refine,
                &out,
                rng,
            )?;
        }
        out = clamp_unit(out);
        let mut raw = Matrix::zeros(out.dim());
        for i in 0..out.nrows() {
            let row = denorm_action(&out.row(i).to_vec(), &self.act_norm, self.bound);
            for (j, v) in row.iter().enumerate() {
                raw[[i, j]] = *v;
            }
        }
        Ok(raw)
    }
}

impl Agent for DiffusionBcAgent {
    fn name(&self) -> &'static str {
        "diffbc"
    }

    fn begin_episode(&mut self, _env: &dyn Env, _state: &EnvState, _rng: &mut dyn RngCore) -> Result<()> {
        self.history.clear();
        Ok(())
    }

    fn act(&mut self, _env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.history.push(state.observation.clone());
        if self.history.len() > self.cfg.t_s {
            let drop = self.history.len() - self.cfg.t_s;
            self.history.drain(..drop);
        }
        let out = self.sample_actions_at(&self.history.clone(), 1, rng)?;
        Ok(out.row(0).to_vec())
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(DiffusionBcAgent {
            model: self.model.clone(),
            sched: self.sched,
            obs_norm: self.obs_norm.clone(),
            act_norm: self.act_norm.clone(),
            bound: self.bound,
            cfg: self.cfg.clone(),
            trace: self.trace.clone(),
            history: self.history.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChunkConfig {
    pub t_s: usize,
    /// Actions generated per plan.
    pub horizon: usize,
    /// Actions executed before replanning.
    pub t_a: usize,
    pub solver: SolverKind,
    pub n_steps: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            t_s: 2,
            horizon: 16,
            t_a: 8,
            solver: SolverKind::Ddim,
            n_steps: 10,
            hidden: vec![128, 128],
            train: TrainConfig::default(),
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_s == 0 {
            return Err(Error::Config("observation history must cover at least 1 step".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("chunk horizon must be at least 1".into()));
        }
        if self.t_a == 0 {
            return Err(Error::Config("execution window must be at least 1 action".into()));
        }
        if self.t_a > self.horizon {
            return Err(Error::Config(format!(
                "cannot execute {} actions from a {}-step chunk",
                self.t_a, self.horizon
            )));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Chunked action diffusion: generate a `horizon`-step action sequence
/// conditioned on recent observations, execute the first `t_a` actions
/// open-loop, then replan when the queue drains.
pub struct DiffusionPolicyAgent {
    model: Denoiser,
    sched: NoiseSchedule,
    obs_norm: Normalizer,
    act_norm: Normalizer,
    bound: f64,
    cfg: ChunkConfig,
    trace: Vec<f64>,
    history: Vec<Vec<f64>>,
    queue: VecDeque<Vec<f64>>,
    replans: u64,
}

impl DiffusionPolicyAgent {
    pub fn train(ds: &TrajectoryDataset, bound: f64, cfg: ChunkConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.transition_count() == 0 {
            return Err(Error::Config("cannot train a chunk policy on an empty dataset".into()));
        }
        let obs_norm = Normalizer::from_stats(ds.obs_stats(), NormalizerKind::MeanStd);
        let act_norm = Normalizer::from_stats(ds.act_stats(), NormalizerKind::MinMax);

        let windows = crate::data::window(ds, cfg.horizon)?;
        let dim = cfg.horizon * ds.act_dim();
        let mut x0 = Matrix::zeros((windows.len(), dim));
        let mut conds = Vec::with_capacity(windows.len());
        for (w_i, w) in windows.iter().enumerate() {
            for (k, step) in w.steps.iter().enumerate() {
                let a = act_norm.forward_row(&step.a);
                for (j, v) in a.iter().enumerate() {
                    x0[[w_i, k * ds.act_dim() + j]] = v.clamp(-1.0, 1.0);
                }
            }
            let ep = &ds.episodes()[w.episode];
            let mut history = Vec::with_capacity(2);
            if w.start > 0 {
                history.push(ep[w.start - 1].s.clone());
            }
            history.push(ep[w.start].s.clone());
            conds.push(stacked_condition(&history, cfg.t_s, &obs_norm));
        }

        let sched = NoiseSchedule::linear();
        let mut model = Denoiser::new(
            &DenoiserConfig::new(dim, &cfg.hidden, PredictionKind::Noise, sched)
                .with_cond_dim(cfg.t_s * ds.obs_dim())
                .with_seed(cfg.train.seed),
        )?;
        let data = TrainSet::with_conds(x0, conds)?;
        let trace = train(&mut model, &data, &cfg.train)?;
        Ok(DiffusionPolicyAgent {
            model,
            sched,
            obs_norm,
            act_norm,
            bound,
            cfg,
            trace,
            history: Vec::new(),
            queue: VecDeque::new(),
            replans: 0,
        })
    }

    pub fn from_parts(
        model: Denoiser,
        obs_norm: Normalizer,
        act_norm: Normalizer,
        bound: f64,
        cfg: ChunkConfig,
    ) -> Self {
        let sched = *model.schedule();
        DiffusionPolicyAgent {
            model,
            sched,
            obs_norm,
            act_norm,
            bound,
            cfg,
            trace: Vec::new(),
            history: Vec::new(),
            queue: VecDeque::new(),
            replans: 0,
        }
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// Plans generated since construction; one per queue refill.
    pub fn replans(&self) -> u64 {
        self.replans
    }
}

impl Agent for DiffusionPolicyAgent {
    fn name(&self) -> &'static str {
        "diffpolicy"
    }

    fn begin_episode(&mut self, _env: &dyn Env, _state: &EnvState, _rng: &mut dyn RngCore) -> Result<()> {
        self.history.clear();
        self.queue.clear();
        Ok(())
    }

    fn act(&mut self, _env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.history.push(state.observation.clone());
        if self.history.len() > self.cfg.t_s {
            let drop = self.history.len() - self.cfg.t_s;
            self.history.drain(..drop);
        }
        if self.queue.is_empty() {
            let cond = stacked_condition(&self.history, self.cfg.t_s, &self.obs_norm);
            let chunk = sample_conditioned(
                &self.model,
                &self.sched,
                self.cfg.solver,
                self.cfg.n_steps,
                &cond,
                1,
                1.0,
                rng,
            )?;
            let act_dim = chunk.ncols() / self.cfg.horizon;
            for k in 0..self.cfg.t_a {
                let row: Vec<f64> = (0..act_dim)
                    .map(|j| chunk[[0, k * act_dim + j]].clamp(-1.0, 1.0))
                    .collect();
                self.queue.push_back(row);
            }
            self.replans += 1;
        }
        let next = self.queue.pop_front().expect("queue was just refilled");
        Ok(denorm_action(&next, &self.act_norm, self.bound))
    }

    fn clone_agent(&self) -> Box<dyn Agent> {
        Box::new(DiffusionPolicyAgent {
            model: self.model.clone(),
            sched: self.sched,
            obs_norm: self.obs_norm.clone(),
            act_norm: self.act_norm.clone(),
            bound: self.bound,
            cfg: self.cfg.clone(),
            trace: self.trace.clone(),
            history: self.history.clone(),
            queue: self.queue.clone(),
            replans: self.replans,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::evaluate;
    use crate::data::collect;
    use crate::env::{MultiGoalReach, PointMaze, PolicyTier, ScriptedPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quick_train_cfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig { gradient_steps: steps, batch_size: 64, seed, ..TrainConfig::default() }
    }

    #[test]
    fn chunk_config_rejects_overlong_execution_window() {
        let cfg = ChunkConfig { t_a: 17, horizon: 16, ..ChunkConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = ChunkConfig { t_s: 2, horizon: 16, t_a: 8, ..ChunkConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn bc_actions_stay_inside_bounds_and_replay_deterministically() {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Medium);
        let ds = collect(&env, &mut policy, 30, 5).unwrap();
        let cfg = BcConfig { m: 2, hidden: vec![32, 32], train: quick_train_cfg(300, 1), ..BcConfig::default() };
        let agent = DiffusionBcAgent::train(&ds, env.action_bound(), cfg).unwrap();
        let hist = vec![vec![0.5, 0.5]];
        let a1 = agent.sample_actions_at(&hist, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a2 = agent.sample_actions_at(&hist, 16, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a1, a2);
        for v in a1.iter() {
            assert!(v.abs() <= env.action_bound() + 1e-12);
        }
    }

    #[test]
    fn bc_retains_the_eight_action_modes_of_multigoal_data() {
        let env = MultiGoalReach::k8();
        let mut policy = ScriptedPolicy::new(PolicyTier::Expert);
        let ds = collect(&env, &mut policy, 300, 17).unwrap();
        let cfg = BcConfig {
            m: 0,
            hidden: vec![64, 64],
            n_steps: 10,
            train: quick_train_cfg(2500, 3),
            ..BcConfig::default()
        };
        let agent = DiffusionBcAgent::train(&ds, env.action_bound(), cfg).unwrap();
        let hist = vec![vec![0.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let actions = agent.sample_actions_at(&hist, 2048, &mut rng).unwrap();
        let mut bins = vec![0usize; 8];
        for i in 0..actions.nrows() {
            let angle = actions[[i, 1]].atan2(actions[[i, 0]]);
            let sector = (angle / (2.0 * std::f64::consts::PI / 8.0)).round() as i64;
            bins[sector.rem_euclid(8) as usize] += 1;
        }
        let covered = bins.iter().filter(|c| **c as f64 >= 0.02 * 2048.0).count();
        assert!(covered >= 6, "mode histogram {bins:?}");
    }

    #[test]
    fn extra_refinement_passes_change_samples_but_not_determinism() {
        use rand_distr::{Distribution, StandardNormal};
        // Interior actions with a generous bound, so the bound clamp cannot
        // hide the refinement moves behind saturated corners.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let episodes: Vec<Vec<crate::data::Transition>> = (0..200)
            .map(|_| {
                let a: Vec<f64> = (0..2)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        0.25 * z
                    })
                    .collect();
                vec![crate::data::Transition {
                    s: vec![0.0, 0.0],
                    a,
                    r: 0.0,
                    s_next: vec![0.0, 0.0],
                    terminal: true,
                }]
            })
            .collect();
        let ds = crate::data::TrajectoryDataset::new(episodes, 2, 2).unwrap();
        let base = BcConfig { m: 0, hidden: vec![32, 32], train: quick_train_cfg(600, 2), ..BcConfig::default() };
        let refined = BcConfig { m: 8, ..base.clone() };
        // m only affects sampling, so both agents share identical weights.
        let a0 = DiffusionBcAgent::train(&ds, 1.0, base).unwrap();
        let a8 = DiffusionBcAgent::train(&ds, 1.0, refined).unwrap();
        let hist = vec![vec![0.0, 0.0]];
        let s0 = a0.sample_actions_at(&hist, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s8 = a8.sample_actions_at(&hist, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(s0, s8, "refinement passes should move the samples");
        let s8b = a8.sample_actions_at(&hist, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s8, s8b);
    }

    #[test]
    fn degenerate_chunk_matches_plain_bc_bitwise() {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Medium);
        let ds = collect(&env, &mut policy, 20, 7).unwrap();
        let bc_cfg = BcConfig {
            m: 0,
            t_s: 2,
            solver: SolverKind::Ddim,
            n_steps: 8,
            hidden: vec![32],
            train: quick_train_cfg(200, 11),
            ..BcConfig::default()
        };
        let bc = DiffusionBcAgent::train(&ds, env.action_bound(), bc_cfg.clone()).unwrap();
        let (obs_norm, act_norm) = bc.normalizers();
        let chunk_cfg = ChunkConfig {
            t_s: 2,
            horizon: 1,
            t_a: 1,
            solver: SolverKind::Ddim,
            n_steps: 8,
            hidden: vec![32],
            train: quick_train_cfg(200, 11),
        };
        let mut dp = DiffusionPolicyAgent::from_parts(
            bc.model().clone(),
            obs_norm.clone(),
            act_norm.clone(),
            env.action_bound(),
            chunk_cfg,
        );
        let mut bc2 = DiffusionBcAgent::from_parts(
            bc.model().clone(),
            obs_norm.clone(),
            act_norm.clone(),
            env.action_bound(),
            bc_cfg,
        );
        let mut rng_a = ChaCha8Rng::seed_from_u64(31);
        let mut rng_b = ChaCha8Rng::seed_from_u64(31);
        let mut state = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        bc2.begin_episode(&env, &state, &mut rng_a).unwrap();
        dp.begin_episode(&env, &state, &mut rng_b).unwrap();
        for _ in 0..5 {
            let a = bc2.act(&env, &state, &mut rng_a).unwrap();
            let b = dp.act(&env, &state, &mut rng_b).unwrap();
            assert_eq!(a, b);
            state = env.step(&state, &a).unwrap();
            if state.terminal {
                break;
            }
        }
    }

    #[test]
    fn replan_count_is_ceil_of_steps_over_execution_window() {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Medium);
        let ds = collect(&env, &mut policy, 10, 8).unwrap();
        for t_a in [1, 7, 8] {
            let cfg = ChunkConfig {
                horizon: 8,
                t_a,
                hidden: vec![16],
                n_steps: 2,
                train: quick_train_cfg(50, 13),
                ..ChunkConfig::default()
            };
            let mut agent = DiffusionPolicyAgent::train(&ds, env.action_bound(), cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let state = EnvState { observation: vec![1.0, 1.0], reward: 0.0, terminal: false, steps: 0 };
            agent.begin_episode(&env, &state, &mut rng).unwrap();
            for _ in 0..300 {
                agent.act(&env, &state, &mut rng).unwrap();
            }
            assert_eq!(agent.replans(), (300f64 / t_a as f64).ceil() as u64, "t_a = {t_a}");
        }
    }

    #[test]
    fn bc_agent_runs_through_the_eval_harness() {
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Expert);
        let ds = collect(&env, &mut policy, 60, 9).unwrap();
        let cfg = BcConfig { m: 0, hidden: vec![64, 64], train: quick_train_cfg(1500, 5), ..BcConfig::default() };
        let mut agent = DiffusionBcAgent::train(&ds, env.action_bound(), cfg).unwrap();
        let report = evaluate(&env, &mut agent, 20, 100).unwrap();
        assert_eq!(report.episodes(), 20);
        assert!(
            report.success_rate() >= 0.8,
            "cloning an expert on the open maze should mostly succeed, got {}",
            report.success_rate()
        );
        let replay = evaluate(&env, &mut agent, 20, 100).unwrap();
        assert_eq!(report, replay);
    }
}
