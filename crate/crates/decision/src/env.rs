//! Toy point-mass control environments: two fixed maze presets and a
//! multi-goal reaching task, plus the wrappers and scripted data-collection
//! policies the offline pipelines are built on. Dynamics are deterministic
//! given (state, action); all stochasticity lives in reset and the policies.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// One snapshot of an episode: observation after the step, the reward it
/// produced, and the bookkeeping flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub steps: usize,
}

/// Interaction interface shared by every environment.
pub trait Env {
    fn name(&self) -> &str;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric per-dimension action bound; actions are clamped to it.
    fn action_bound(&self) -> f64;
    fn max_steps(&self) -> usize;
    fn reset(&self, rng: &mut dyn RngCore) -> EnvState;
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState>;
    /// Whether this state satisfies the task's success condition.
    fn succeeded(&self, state: &EnvState) -> bool;
    /// Waypoint route for the scripted expert; multi-goal tasks draw the
    /// episode's target here.
    fn waypoints(&self, rng: &mut dyn RngCore) -> Vec<(f64, f64)>;
    /// Uniformly random point in the arena, used as a decoy target by the
    /// mediocre scripted tier.
    fn decoy(&self, rng: &mut dyn RngCore) -> (f64, f64);
}

impl Env for Box<dyn Env> {
    fn name(&self) -> &str {
        self.as_ref().name()
    }
    fn obs_dim(&self) -> usize {
        self.as_ref().obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.as_ref().action_dim()
    }
    fn action_bound(&self) -> f64 {
        self.as_ref().action_bound()
    }
    fn max_steps(&self) -> usize {
        self.as_ref().max_steps()
    }
    fn reset(&self, rng: &mut dyn RngCore) -> EnvState {
        self.as_ref().reset(rng)
    }
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        self.as_ref().step(state, action)
    }
    fn succeeded(&self, state: &EnvState) -> bool {
        self.as_ref().succeeded(state)
    }
    fn waypoints(&self, rng: &mut dyn RngCore) -> Vec<(f64, f64)> {
        self.as_ref().waypoints(rng)
    }
    fn decoy(&self, rng: &mut dyn RngCore) -> (f64, f64) {
        self.as_ref().decoy(rng)
    }
}

/// Axis-aligned solid rectangle the agent cannot enter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Wall {
    fn blocks_y(&self, y: f64) -> bool {
        (self.y_lo..=self.y_hi).contains(&y)
    }
    fn blocks_x(&self, x: f64) -> bool {
        (self.x_lo..=self.x_hi).contains(&x)
    }
    fn strictly_inside(&self, x: f64, y: f64) -> bool {
        x > self.x_lo && x < self.x_hi && y > self.y_lo && y < self.y_hi
    }
}

/// Geometry and task parameters for a point-mass maze. Construction via
/// [`PointMaze::new`] validates that the goal is reachable from the start
/// region by breadth-first search over a discretized grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMazeSpec {
    pub width: f64,
    pub height: f64,
    pub walls: Vec<Wall>,
    /// Start region as (x_lo, y_lo, x_hi, y_hi).
    pub start: (f64, f64, f64, f64),
    pub goal: (f64, f64),
    pub goal_radius: f64,
    pub dense: bool,
    pub max_steps: usize,
    pub action_bound: f64,
}

#[derive(Debug, Clone)]
pub struct PointMaze {
    spec: PointMazeSpec,
    name: String,
    route: Vec<(f64, f64)>,
}

const BFS_CELL: f64 = 0.1;

impl PointMaze {
    /// Validates the geometry: positive extents, start and goal outside the
    /// walls, and goal reachable from the start-region center.
    pub fn new(spec: PointMazeSpec, name: &str, route: Vec<(f64, f64)>) -> Result<Self> {
        if !(spec.width > 0.0) || !(spec.height > 0.0) {
            return Err(Error::Config("arena extents must be positive".into()));
        }
        if spec.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(spec.action_bound > 0.0) || !(spec.goal_radius > 0.0) {
            return Err(Error::Config("action bound and goal radius must be positive".into()));
        }
        let (sx, sy) = ((spec.start.0 + spec.start.2) / 2.0, (spec.start.1 + spec.start.3) / 2.0);
        for w in &spec.walls {
            if w.strictly_inside(sx, sy) || w.strictly_inside(spec.goal.0, spec.goal.1) {
                return Err(Error::Config("start or goal lies inside a wall".into()));
            }
        }
        let maze = PointMaze { spec, name: name.to_string(), route };
        if !maze.goal_reachable() {
            return Err(Error::Config(format!(
                "goal is not reachable from the start region in maze '{name}'"
            )));
        }
        Ok(maze)
    }

    /// 4x4 arena with no interior walls; goal in the far corner.
    pub fn open() -> Self {
        let spec = PointMazeSpec {
            width: 4.0,
            height: 4.0,
            walls: vec![],
            start: (0.3, 0.3, 0.7, 0.7),
            goal: (3.5, 3.5),
            goal_radius: 0.3,
            dense: true,
            max_steps: 40,
            action_bound: 0.5,
        };
        PointMaze::new(spec, "pointmaze-open", vec![(3.5, 3.5)]).expect("preset is valid")
    }

    /// 4x4 arena with a vertical wall from the bottom edge; the route goes
    /// over its top.
    pub fn u_wall() -> Self {
        let spec = PointMazeSpec {
            width: 4.0,
            height: 4.0,
            walls: vec![Wall { x_lo: 1.9, x_hi: 2.1, y_lo: 0.0, y_hi: 3.0 }],
            start: (0.3, 0.3, 0.7, 0.7),
            goal: (3.5, 0.5),
            goal_radius: 0.3,
            dense: true,
            max_steps: 60,
            action_bound: 0.5,
        };
        let route = vec![(0.7, 3.5), (3.3, 3.5), (3.5, 0.5)];
        PointMaze::new(spec, "pointmaze-uwall", route).expect("preset is valid")
    }

    /// Same geometry with the sparse 0/1 reward instead of the dense one.
    pub fn with_sparse(mut self) -> Self {
        self.spec.dense = false;
        self
    }

    pub fn spec(&self) -> &PointMazeSpec {
        &self.spec
    }

    pub fn distance_to_goal(&self, obs: &[f64]) -> f64 {
        let dx = obs[0] - self.spec.goal.0;
        let dy = obs[1] - self.spec.goal.1;
        (dx * dx + dy * dy).sqrt()
    }

    fn strictly_inside_any_wall(&self, x: f64, y: f64) -> bool {
        self.spec.walls.iter().any(|w| w.strictly_inside(x, y))
    }

    fn project_x(&self, x0: f64, y: f64, dx: f64) -> f64 {
        let mut nx = (x0 + dx).clamp(0.0, self.spec.width);
        for w in &self.spec.walls {
            if !w.blocks_y(y) {
                continue;
            }
            if dx > 0.0 && x0 <= w.x_lo && nx > w.x_lo {
                nx = w.x_lo;
            } else if dx < 0.0 && x0 >= w.x_hi && nx < w.x_hi {
                nx = w.x_hi;
            }
        }
        nx
    }

    fn project_y(&self, x: f64, y0: f64, dy: f64) -> f64 {
        let mut ny = (y0 + dy).clamp(0.0, self.spec.height);
        for w in &self.spec.walls {
            if !w.blocks_x(x) {
                continue;
            }
            if dy > 0.0 && y0 <= w.y_lo && ny > w.y_lo {
                ny = w.y_lo;
            } else if dy < 0.0 && y0 >= w.y_hi && ny < w.y_hi {
                ny = w.y_hi;
            }
        }
        ny
    }

    fn goal_reachable(&self) -> bool {
        let nx = (self.spec.width / BFS_CELL).ceil() as usize;
        let ny = (self.spec.height / BFS_CELL).ceil() as usize;
        let center = |i: usize, j: usize| ((i as f64 + 0.5) * BFS_CELL, (j as f64 + 0.5) * BFS_CELL);
        let blocked = |i: usize, j: usize| {
            let (x, y) = center(i, j);
            self.spec
                .walls
                .iter()
                .any(|w| w.blocks_x(x) && w.blocks_y(y))
        };
        let cell_of = |x: f64, y: f64| {
            let i = ((x / BFS_CELL) as usize).min(nx - 1);
            let j = ((y / BFS_CELL) as usize).min(ny - 1);
            (i, j)
        };
        let (sx, sy) = ((self.spec.start.0 + self.spec.start.2) / 2.0, (self.spec.start.1 + self.spec.start.3) / 2.0);
        let start = cell_of(sx, sy);
        let goal = cell_of(self.spec.goal.0, self.spec.goal.1);
        if blocked(start.0, start.1) || blocked(goal.0, goal.1) {
            return false;
        }
        let mut seen = vec![false; nx * ny];
        let mut queue = std::collections::VecDeque::new();
        seen[start.1 * nx + start.0] = true;
        queue.push_back(start);
        while let Some((i, j)) = queue.pop_front() {
            if (i, j) == goal {
                return true;
            }
            let neighbors = [
                (i.wrapping_sub(1), j),
                (i + 1, j),
                (i, j.wrapping_sub(1)),
                (i, j + 1),
            ];
            for (ni, nj) in neighbors {
                if ni >= nx || nj >= ny || seen[nj * nx + ni] || blocked(ni, nj) {
                    continue;
                }
                seen[nj * nx + ni] = true;
                queue.push_back((ni, nj));
            }
        }
        false
    }
}

fn check_action(action: &[f64], dim: usize) -> Result<()> {
    if action.len() != dim {
        return Err(Error::Argument(format!(
            "action has {} dimensions, expected {dim}",
            action.len()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Argument("action contains a non-finite component".into()));
    }
    Ok(())
}

impl Env for PointMaze {
    fn name(&self) -> &str {
        &self.name
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn action_bound(&self) -> f64 {
        self.spec.action_bound
    }
    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&self, rng: &mut dyn RngCore) -> EnvState {
        let (x_lo, y_lo, x_hi, y_hi) = self.spec.start;
        let x = x_lo + (x_hi - x_lo) * rng.random::<f64>();
        let y = y_lo + (y_hi - y_lo) * rng.random::<f64>();
        EnvState { observation: vec![x, y], reward: 0.0, terminal: false, steps: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        if state.terminal {
            return Err(Error::Argument("cannot step a terminal state".into()));
        }
        check_action(action, 2)?;
        let b = self.spec.action_bound;
        let dx = action[0].clamp(-b, b);
        let dy = action[1].clamp(-b, b);
        let x0 = state.observation[0];
        let y0 = state.observation[1];
        let x1 = self.project_x(x0, y0, dx);
        let y1 = self.project_y(x1, y0, dy);
        debug_assert!(!self.strictly_inside_any_wall(x1, y1));
        let steps = state.steps + 1;
        let dist = {
            let gx = x1 - self.spec.goal.0;
            let gy = y1 - self.spec.goal.1;
            (gx * gx + gy * gy).sqrt()
        };
        let at_goal = dist <= self.spec.goal_radius;
        let reward = if self.spec.dense {
            -dist
        } else if at_goal {
            1.0
        } else {
            0.0
        };
        Ok(EnvState {
            observation: vec![x1, y1],
            reward,
            terminal: at_goal || steps >= self.spec.max_steps,
            steps,
        })
    }

    fn succeeded(&self, state: &EnvState) -> bool {
        self.distance_to_goal(&state.observation) <= self.spec.goal_radius
    }

    fn waypoints(&self, _rng: &mut dyn RngCore) -> Vec<(f64, f64)> {
        self.route.clone()
    }

    fn decoy(&self, rng: &mut dyn RngCore) -> (f64, f64) {
        (
            self.spec.width * rng.random::<f64>(),
            self.spec.height * rng.random::<f64>(),
        )
    }
}

/// K goal points on a circle; an episode succeeds on entering any goal's
/// radius. Exists to exercise multimodal behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiGoalReachSpec {
    pub k: usize,
    pub circle_radius: f64,
    pub success_radius: f64,
    /// Start region is the square [-start_half, start_half]^2.
    pub start_half: f64,
    pub dense: bool,
    pub max_steps: usize,
    pub action_bound: f64,
}

#[derive(Debug, Clone)]
pub struct MultiGoalReach {
    spec: MultiGoalReachSpec,
    name: String,
    goals: Vec<(f64, f64)>,
}

impl MultiGoalReach {
    pub fn new(spec: MultiGoalReachSpec) -> Result<Self> {
        if spec.k < 2 {
            return Err(Error::Config(format!("need at least 2 goals, got {}", spec.k)));
        }
        if !(spec.circle_radius > 0.0) || !(spec.success_radius > 0.0) {
            return Err(Error::Config("radii must be positive".into()));
        }
        let goals = (0..spec.k)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / spec.k as f64;
                (spec.circle_radius * theta.cos(), spec.circle_radius * theta.sin())
            })
            .collect();
        let name = format!("multigoal-k{}", spec.k);
        Ok(MultiGoalReach { spec, name, goals })
    }

    pub fn k8() -> Self {
        MultiGoalReach::new(MultiGoalReachSpec {
            k: 8,
            circle_radius: 1.0,
            success_radius: 0.15,
            start_half: 0.05,
            dense: true,
            max_steps: 20,
            action_bound: 0.25,
        })
        .expect("preset is valid")
    }

    pub fn goals(&self) -> &[(f64, f64)] {
        &self.goals
    }

    pub fn spec(&self) -> &MultiGoalReachSpec {
        &self.spec
    }

    pub fn nearest_goal(&self, obs: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, (gx, gy)) in self.goals.iter().enumerate() {
            let d = ((obs[0] - gx).powi(2) + (obs[1] - gy).powi(2)).sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn limit(&self) -> f64 {
        self.spec.circle_radius + 1.0
    }
}

impl Env for MultiGoalReach {
    fn name(&self) -> &str {
        &self.name
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn action_bound(&self) -> f64 {
        self.spec.action_bound
    }
    fn max_steps(&self) -> usize {
        self.spec.max_steps
    }

    fn reset(&self, rng: &mut dyn RngCore) -> EnvState {
        let h = self.spec.start_half;
        let x = -h + 2.0 * h * rng.random::<f64>();
        let y = -h + 2.0 * h * rng.random::<f64>();
        EnvState { observation: vec![x, y], reward: 0.0, terminal: false, steps: 0 }
    }

    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        if state.terminal {
            return Err(Error::Argument("cannot step a terminal state".into()));
        }
        check_action(action, 2)?;
        let b = self.spec.action_bound;
        let lim = self.limit();
        let x1 = (state.observation[0] + action[0].clamp(-b, b)).clamp(-lim, lim);
        let y1 = (state.observation[1] + action[1].clamp(-b, b)).clamp(-lim, lim);
        let steps = state.steps + 1;
        let (_, dist) = self.nearest_goal(&[x1, y1]);
        let at_goal = dist <= self.spec.success_radius;
        let reward = if self.spec.dense {
            -dist
        } else if at_goal {
            1.0
        } else {
            0.0
        };
        Ok(EnvState {
            observation: vec![x1, y1],
            reward,
            terminal: at_goal || steps >= self.spec.max_steps,
            steps,
        })
    }

    fn succeeded(&self, state: &EnvState) -> bool {
        self.nearest_goal(&state.observation).1 <= self.spec.success_radius
    }

    fn waypoints(&self, rng: &mut dyn RngCore) -> Vec<(f64, f64)> {
        let i = rng.random_range(0..self.goals.len());
        vec![self.goals[i]]
    }

    fn decoy(&self, rng: &mut dyn RngCore) -> (f64, f64) {
        let lim = self.limit();
        (
            -lim + 2.0 * lim * rng.random::<f64>(),
            -lim + 2.0 * lim * rng.random::<f64>(),
        )
    }
}

/// Applies one action for `repeat` inner steps, summing rewards and stopping
/// early at a terminal state. `repeat = 1` is the base environment.
pub struct MultiStep<E: Env> {
    inner: E,
    repeat: usize,
}

pub fn multi_step_wrapper<E: Env>(env: E, repeat: usize) -> Result<MultiStep<E>> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    Ok(MultiStep { inner: env, repeat })
}

impl<E: Env> Env for MultiStep<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
    fn action_bound(&self) -> f64 {
        self.inner.action_bound()
    }
    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }
    fn reset(&self, rng: &mut dyn RngCore) -> EnvState {
        self.inner.reset(rng)
    }
    fn step(&self, state: &EnvState, action: &[f64]) -> Result<EnvState> {
        let mut cur = self.inner.step(state, action)?;
        let mut total = cur.reward;
        for _ in 1..self.repeat {
            if cur.terminal {
                break;
            }
            cur = self.inner.step(&cur, action)?;
            total += cur.reward;
        }
        cur.reward = total;
        Ok(cur)
    }
    fn succeeded(&self, state: &EnvState) -> bool {
        self.inner.succeeded(state)
    }
    fn waypoints(&self, rng: &mut dyn RngCore) -> Vec<(f64, f64)> {
        self.inner.waypoints(rng)
    }
    fn decoy(&self, rng: &mut dyn RngCore) -> (f64, f64) {
        self.inner.decoy(rng)
    }
}

/// Independent environment instances stepped as a batch; each seed owns one
/// instance's reset stream, so a batch run reproduces serial runs exactly.
pub struct ParallelBatch {
    pub states: Vec<EnvState>,
}

pub fn parallel_batch<E: Env + ?Sized>(env: &E, seeds: &[u64]) -> ParallelBatch {
    let states = seeds
        .iter()
        .map(|s| env.reset(&mut ChaCha8Rng::seed_from_u64(*s)))
        .collect();
    ParallelBatch { states }
}

impl ParallelBatch {
    /// Steps every non-terminal instance with its own action.
    pub fn step_all<E: Env + ?Sized>(&mut self, env: &E, actions: &[Vec<f64>]) -> Result<()> {
        if actions.len() != self.states.len() {
            return Err(Error::Argument(format!(
                "{} actions for {} instances",
                actions.len(),
                self.states.len()
            )));
        }
        for (state, action) in self.states.iter_mut().zip(actions) {
            if !state.terminal {
                *state = env.step(state, action)?;
            }
        }
        Ok(())
    }
}

/// Deterministic per-episode seed derivation shared by every evaluation and
/// collection loop.
pub fn episode_seed(base: u64, episode: usize) -> u64 {
    base.wrapping_add(episode as u64)
}

/// A behavior policy driving data collection.
pub trait Policy {
    fn begin_episode(&mut self, env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore);
    fn act(&mut self, env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTier {
    Expert,
    Medium,
    Random,
}

impl PolicyTier {
    pub fn name(self) -> &'static str {
        match self {
            PolicyTier::Expert => "expert",
            PolicyTier::Medium => "medium",
            PolicyTier::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(PolicyTier::Expert),
            "medium" => Ok(PolicyTier::Medium),
            "random" => Ok(PolicyTier::Random),
            other => Err(Error::Config(format!(
                "unknown policy tier '{other}' (expected expert, medium, or random)"
            ))),
        }
    }
}

/// Waypoint-following policy at three quality tiers. Expert heads to the next
/// waypoint at twice the action bound (the environment clamps) with small
/// Gaussian noise. Medium triples the noise, takes 20% uniformly random
/// actions, and gets lost on 45% of episodes, chasing a random decoy point
/// instead of the goal, so its returns are spread across whole episodes
/// rather than only step to step. Random is uniform over the action box.
/// Commanded actions are returned unclamped.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub tier: PolicyTier,
    waypoints: Vec<(f64, f64)>,
    next_wp: usize,
}

const WAYPOINT_RADIUS: f64 = 0.3;
const EXPERT_NOISE: f64 = 0.05;
const MEDIUM_NOISE_FACTOR: f64 = 3.0;
const MEDIUM_RANDOM_FRAC: f64 = 0.2;
const MEDIUM_LOST_PROB: f64 = 0.45;
const OVERDRIVE: f64 = 2.0;

impl ScriptedPolicy {
    pub fn new(tier: PolicyTier) -> Self {
        ScriptedPolicy { tier, waypoints: vec![], next_wp: 0 }
    }
}

/// The expert, medium, and random tiers for an environment.
pub fn scripted_policies() -> (ScriptedPolicy, ScriptedPolicy, ScriptedPolicy) {
    (
        ScriptedPolicy::new(PolicyTier::Expert),
        ScriptedPolicy::new(PolicyTier::Medium),
        ScriptedPolicy::new(PolicyTier::Random),
    )
}

impl Policy for ScriptedPolicy {
    fn begin_episode(&mut self, env: &dyn Env, _state: &EnvState, rng: &mut dyn RngCore) {
        self.waypoints = env.waypoints(rng);
        if self.tier == PolicyTier::Medium && rng.random::<f64>() < MEDIUM_LOST_PROB {
            self.waypoints = vec![env.decoy(rng)];
        }
        self.next_wp = 0;
    }

    fn act(&mut self, env: &dyn Env, state: &EnvState, rng: &mut dyn RngCore) -> Vec<f64> {
        let b = env.action_bound();
        let uniform = |rng: &mut dyn RngCore| {
            (0..env.action_dim())
                .map(|_| -b + 2.0 * b * rng.random::<f64>())
                .collect::<Vec<f64>>()
        };
        let (random_frac, noise) = match self.tier {
            PolicyTier::Random => return uniform(rng),
            PolicyTier::Expert => (0.0, EXPERT_NOISE),
            PolicyTier::Medium => (MEDIUM_RANDOM_FRAC, EXPERT_NOISE * MEDIUM_NOISE_FACTOR),
        };
        if random_frac > 0.0 && rng.random::<f64>() < random_frac {
            return uniform(rng);
        }
        let pos = (state.observation[0], state.observation[1]);
        while self.next_wp + 1 < self.waypoints.len() {
            let (wx, wy) = self.waypoints[self.next_wp];
            let d = ((pos.0 - wx).powi(2) + (pos.1 - wy).powi(2)).sqrt();
            if d > WAYPOINT_RADIUS {
                break;
            }
            self.next_wp += 1;
        }
        let (wx, wy) = self.waypoints[self.next_wp.min(self.waypoints.len() - 1)];
        let (dx, dy) = (wx - pos.0, wy - pos.1);
        let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
        let speed = OVERDRIVE * b;
        let mut action = vec![dx / norm * speed, dy / norm * speed];
        for a in &mut action {
            let z: f64 = StandardNormal.sample(rng);
            *a += noise * z;
        }
        action
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rollout(env: &dyn Env, policy: &mut dyn Policy, seed: u64) -> (bool, f64, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = env.reset(&mut rng);
        policy.begin_episode(env, &state, &mut rng);
        let mut ret = 0.0;
        while !state.terminal {
            let a = policy.act(env, &state, &mut rng);
            state = env.step(&state, &a).unwrap();
            ret += state.reward;
        }
        (env.succeeded(&state), ret, state.steps)
    }

    fn success_rate(env: &dyn Env, tier: PolicyTier, episodes: usize) -> f64 {
        let mut wins = 0;
        for ep in 0..episodes {
            let mut policy = ScriptedPolicy::new(tier);
            let (ok, _, _) = rollout(env, &mut policy, episode_seed(1000, ep));
            if ok {
                wins += 1;
            }
        }
        wins as f64 / episodes as f64
    }

    #[test]
    fn reset_is_deterministic_and_inside_start_region() {
        let env = PointMaze::open();
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.steps, 0);
        assert_eq!(a.reward, 0.0);
        assert!(!a.terminal);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x_lo, y_lo, x_hi, y_hi) = env.spec().start;
        for _ in 0..1000 {
            let s = env.reset(&mut rng);
            assert!(s.observation[0] >= x_lo && s.observation[0] <= x_hi);
            assert!(s.observation[1] >= y_lo && s.observation[1] <= y_hi);
        }
    }

    #[test]
    fn zero_action_keeps_position_and_reports_distance_reward() {
        let env = PointMaze::open();
        let state = EnvState { observation: vec![1.0, 2.0], reward: 0.0, terminal: false, steps: 3 };
        let next = env.step(&state, &[0.0, 0.0]).unwrap();
        assert_eq!(next.observation, vec![1.0, 2.0]);
        let dist = ((1.0f64 - 3.5).powi(2) + (2.0f64 - 3.5).powi(2)).sqrt();
        assert!((next.reward + dist).abs() < 1e-12);
        assert_eq!(next.steps, 4);
    }

    #[test]
    fn actions_into_walls_stop_at_the_boundary() {
        let env = PointMaze::u_wall();
        let state = EnvState { observation: vec![1.5, 1.0], reward: 0.0, terminal: false, steps: 0 };
        // Commanded (1.0, 0.0) clamps to (0.5, 0.0); x would reach 2.0 but the
        // wall face at 1.9 blocks it.
        let next = env.step(&state, &[1.0, 0.0]).unwrap();
        assert_eq!(next.observation[0], 1.9);
        assert_eq!(next.observation[1], 1.0);
        // Arena edges clamp the same way.
        let corner = EnvState { observation: vec![0.2, 0.2], reward: 0.0, terminal: false, steps: 0 };
        let next = env.step(&corner, &[-1.0, -1.0]).unwrap();
        assert_eq!(next.observation, vec![0.0, 0.0]);
    }

    #[test]
    fn goal_entry_is_terminal_with_sparse_reward_one() {
        let env = PointMaze::open().with_sparse();
        let state = EnvState { observation: vec![3.3, 3.5], reward: 0.0, terminal: false, steps: 5 };
        let next = env.step(&state, &[0.15, 0.0]).unwrap();
        assert!(env.succeeded(&next));
        assert!(next.terminal);
        assert_eq!(next.reward, 1.0);
        let away = env.step(&state, &[-0.2, 0.0]).unwrap();
        assert_eq!(away.reward, 0.0);
        assert!(!away.terminal);
    }

    #[test]
    fn non_finite_actions_are_argument_errors() {
        let env = PointMaze::open();
        let state = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let err = env.step(&state, &[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err}");
        let err = env.step(&state, &[0.1]).unwrap_err();
        assert!(matches!(err, Error::Argument(_)), "{err}");
    }

    #[test]
    fn dynamics_are_deterministic() {
        let env = PointMaze::u_wall();
        let state = EnvState { observation: vec![1.2, 2.4], reward: 0.0, terminal: false, steps: 1 };
        let a = env.step(&state, &[0.3, -0.2]).unwrap();
        let b = env.step(&state, &[0.3, -0.2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_never_enters_a_wall() {
        let env = PointMaze::u_wall();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut placed = 0;
        while placed < 2000 {
            let x = 4.0 * rng.random::<f64>();
            let y = 4.0 * rng.random::<f64>();
            if env.strictly_inside_any_wall(x, y) {
                continue;
            }
            placed += 1;
            let state = EnvState { observation: vec![x, y], reward: 0.0, terminal: false, steps: 0 };
            let ax = -1.0 + 2.0 * rng.random::<f64>();
            let ay = -1.0 + 2.0 * rng.random::<f64>();
            let next = env.step(&state, &[ax, ay]).unwrap();
            assert!(
                !env.strictly_inside_any_wall(next.observation[0], next.observation[1]),
                "landed inside a wall at {:?} from ({x}, {y}) action ({ax}, {ay})",
                next.observation
            );
        }
    }

    #[test]
    fn unreachable_goal_is_rejected_at_construction() {
        let spec = PointMazeSpec {
            width: 4.0,
            height: 4.0,
            // Box the goal corner in completely.
            walls: vec![
                Wall { x_lo: 2.8, x_hi: 3.0, y_lo: 2.8, y_hi: 4.0 },
                Wall { x_lo: 2.8, x_hi: 4.0, y_lo: 2.8, y_hi: 3.0 },
            ],
            start: (0.3, 0.3, 0.7, 0.7),
            goal: (3.5, 3.5),
            goal_radius: 0.3,
            dense: true,
            max_steps: 40,
            action_bound: 0.5,
        };
        let err = PointMaze::new(spec, "sealed", vec![(3.5, 3.5)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn episode_returns_stay_within_bounds() {
        let env = PointMaze::open();
        let diam = (env.spec().width.powi(2) + env.spec().height.powi(2)).sqrt();
        for ep in 0..20 {
            let mut policy = ScriptedPolicy::new(PolicyTier::Random);
            let (_, ret, steps) = rollout(&env, &mut policy, episode_seed(5, ep));
            assert!(ret <= 0.0 && ret >= -(env.max_steps() as f64) * diam);
            assert!(steps <= env.max_steps());
        }
        let sparse = PointMaze::open().with_sparse();
        for ep in 0..20 {
            let mut policy = ScriptedPolicy::new(PolicyTier::Expert);
            let (_, ret, _) = rollout(&sparse, &mut policy, episode_seed(6, ep));
            assert!(ret == 0.0 || ret == 1.0);
        }
    }

    #[test]
    fn multi_step_repeat_one_matches_base() {
        let base = PointMaze::u_wall();
        let wrapped = multi_step_wrapper(PointMaze::u_wall(), 1).unwrap();
        let mut s1 = base.reset(&mut ChaCha8Rng::seed_from_u64(3));
        let mut s2 = wrapped.reset(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(s1, s2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            if s1.terminal {
                break;
            }
            let a = vec![-0.5 + rng.random::<f64>(), -0.5 + rng.random::<f64>()];
            s1 = base.step(&s1, &a).unwrap();
            s2 = wrapped.step(&s2, &a).unwrap();
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn multi_step_sums_rewards_additively() {
        let env = multi_step_wrapper(PointMaze::open(), 4).unwrap();
        let state = EnvState { observation: vec![1.0, 1.0], reward: 0.0, terminal: false, steps: 0 };
        let single = PointMaze::open().step(&state, &[0.0, 0.0]).unwrap();
        let repeated = env.step(&state, &[0.0, 0.0]).unwrap();
        assert!((repeated.reward - 4.0 * single.reward).abs() < 1e-12);
        assert_eq!(repeated.steps, 4);
    }

    #[test]
    fn parallel_batch_reproduces_serial_runs() {
        let env = PointMaze::open();
        let seeds: Vec<u64> = (1..=8).collect();
        let mut batch = parallel_batch(&env, &seeds);
        // Fixed per-instance action scripts.
        let scripts: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![0.1 + 0.03 * i as f64, 0.2 - 0.02 * i as f64])
            .collect();
        for _ in 0..5 {
            batch.step_all(&env, &scripts).unwrap();
        }
        for (i, seed) in seeds.iter().enumerate() {
            let mut state = env.reset(&mut ChaCha8Rng::seed_from_u64(*seed));
            for _ in 0..5 {
                if state.terminal {
                    break;
                }
                state = env.step(&state, &scripts[i]).unwrap();
            }
            assert_eq!(batch.states[i], state, "instance {i} diverged");
        }
    }

    #[test]
    fn scripted_tiers_are_ordered_on_the_open_maze() {
        let env = PointMaze::open();
        let expert = success_rate(&env, PolicyTier::Expert, 100);
        let medium = success_rate(&env, PolicyTier::Medium, 100);
        let random = success_rate(&env, PolicyTier::Random, 100);
        assert!(expert >= 0.95, "expert success {expert}");
        assert!(random <= 0.2, "random success {random}");
        assert!(
            medium > random + 0.1 && medium < expert - 0.1,
            "medium {medium} not clearly between random {random} and expert {expert}"
        );
        assert!((0.35..=0.85).contains(&medium), "medium success {medium}");
    }

    #[test]
    fn scripted_expert_solves_the_u_wall_maze() {
        let env = PointMaze::u_wall();
        let expert = success_rate(&env, PolicyTier::Expert, 100);
        assert!(expert >= 0.95, "expert success {expert}");
    }

    #[test]
    fn multigoal_expert_visits_multiple_goals() {
        let env = MultiGoalReach::k8();
        let mut hist = vec![0usize; 8];
        for ep in 0..200 {
            let mut policy = ScriptedPolicy::new(PolicyTier::Expert);
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(77, ep));
            let mut state = env.reset(&mut rng);
            policy.begin_episode(&env, &state, &mut rng);
            while !state.terminal {
                let a = policy.act(&env, &state, &mut rng);
                state = env.step(&state, &a).unwrap();
            }
            if env.succeeded(&state) {
                hist[env.nearest_goal(&state.observation).0] += 1;
            }
        }
        let visited = hist.iter().filter(|c| **c > 0).count();
        assert!(visited >= 6, "expert visitation histogram {hist:?}");
        assert!(hist.iter().sum::<usize>() >= 190, "expert should almost always succeed: {hist:?}");
    }

    #[test]
    fn multigoal_requires_at_least_two_goals() {
        let mut spec = MultiGoalReach::k8().spec().clone();
        spec.k = 1;
        assert!(matches!(MultiGoalReach::new(spec), Err(Error::Config(_))));
    }

    #[test]
    fn commanded_actions_frequently_exceed_the_bound() {
        // The synthesizer's dynamics-residual oracle needs clamping to be
        // common in medium data; the overdriven waypoint follower guarantees
        // at least one clamped component on every directed step.
        let env = PointMaze::open();
        let mut policy = ScriptedPolicy::new(PolicyTier::Medium);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut state = env.reset(&mut rng);
        policy.begin_episode(&env, &state, &mut rng);
        let b = env.action_bound();
        let mut clamped = 0;
        let mut total = 0;
        for _ in 0..200 {
            if state.terminal {
                state = env.reset(&mut rng);
                policy.begin_episode(&env, &state, &mut rng);
            }
            let a = policy.act(&env, &state, &mut rng);
            if a.iter().any(|v| v.abs() > b) {
                clamped += 1;
            }
            total += 1;
            state = env.step(&state, &a).unwrap();
        }
        assert!(
            clamped * 2 > total,
            "only {clamped}/{total} commanded actions exceeded the bound"
        );
    }
}
