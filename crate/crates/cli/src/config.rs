//! One flat, serializable description of a run. Every command validates its
//! config before doing any work and writes the exact config into the run
//! directory, so any run can be reproduced from that file alone. All
//! randomness flows from `seed` (plus the explicit `seeds` list for sweep
//! cells); environment variables are never consulted.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dmtk_decision::env::{Env, MultiGoalReach, PointMaze, PolicyTier};
use dmtk_diffusion::{NoiseSchedule, ScheduleKind, SolverKind};

use crate::CliError;

pub const COMMANDS: [&str; 5] = ["gen-data", "train", "eval", "sweep", "plot"];
pub const ENVS: [&str; 3] = ["pointmaze-open", "pointmaze-uwall", "multigoal-k8"];
pub const ALGOS: [&str; 9] = [
    "diffbc",
    "diffpolicy",
    "dql",
    "edp",
    "idql",
    "diffuser",
    "dd",
    "adaptdiffuser",
    "synther",
];
pub const POLICIES: [&str; 3] = ["expert", "medium", "random"];
pub const SWEEPS: [&str; 2] = ["solvers", "ema"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub env: String,
    pub algo: String,
    /// Scripted data-collection tier for gen-data.
    pub policy: String,
    /// Episode count: collected for gen-data, evaluated for eval.
    pub episodes: usize,
    pub schedule: String,
    pub solver: String,
    pub sample_steps: usize,
    /// Master seed; per-component offsets are documented on each command.
    pub seed: u64,
    /// Per-cell seeds for sweep rows.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Input dataset for train/eval/sweep.
    pub data: Option<PathBuf>,
    /// Input CSV for plot.
    pub input: Option<PathBuf>,
    /// Episode-level parallelism for eval; aggregation is order-independent.
    pub workers: usize,

    pub gradient_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub hidden: Vec<usize>,
    pub hidden_guide: Vec<usize>,

    /// Planner window length (diffuser, dd) and policy chunk length
    /// (diffpolicy).
    pub horizon: usize,
    /// Actions executed per replan (diffpolicy).
    pub action_window: usize,
    /// Observation history length stacked into the condition (diffbc,
    /// diffpolicy).
    pub history: usize,
    pub n_candidates: usize,
    pub guidance_scale: f64,
    pub target_return: f64,
    pub temperature: f64,
    /// Value-term strength for dql/edp.
    pub eta: f64,
    /// Expectile for idql.
    pub tau: f64,
    /// Extra refinement passes for diffbc sampling.
    pub refine: usize,
    /// Synthetic transitions generated by synther.
    pub synth_transitions: usize,

    /// Self-evolution rounds for adaptdiffuser.
    pub rounds: usize,
    pub per_round: usize,
    pub residual_max: f64,
    pub return_quantile: f64,

    /// "solvers" or "ema".
    pub sweep: String,
    pub solvers: Vec<String>,
    pub steps_list: Vec<usize>,
    pub ema_rates: Vec<f64>,
    pub checkpoint_every: usize,
    /// Generated sample count per sweep cell.
    pub samples: usize,
    /// Score column plotted by the plot command.
    pub metric: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            env: "pointmaze-open".into(),
            algo: "diffbc".into(),
            policy: "medium".into(),
            episodes: 50,
            schedule: "linear".into(),
            solver: "ddim".into(),
            sample_steps: 10,
            seed: 0,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/out"),
            data: None,
            input: None,
            workers: 1,
            gradient_steps: 2000,
            batch_size: 64,
            learning_rate: 3e-4,
            ema_decay: 0.995,
            hidden: vec![128, 128],
            hidden_guide: vec![64, 64],
            horizon: 8,
            action_window: 4,
            history: 2,
            n_candidates: 32,
            guidance_scale: 1.0,
            target_return: 0.9,
            temperature: 1.0,
            eta: 1.0,
            tau: 0.7,
            refine: 0,
            synth_transitions: 10_000,
            rounds: 2,
            per_round: 64,
            residual_max: 1.0,
            return_quantile: 0.5,
            sweep: "solvers".into(),
            solvers: vec!["ddpm".into(), "ddim".into(), "sde_dpmpp_1".into(), "ode_dpmpp_2m".into()],
            steps_list: vec![5, 10, 20, 50],
            ema_rates: vec![0.99, 0.999, 0.9999],
            checkpoint_every: 2000,
            samples: 256,
            metric: "score".into(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn expect_one_of(value: &str, what: &str, allowed: &[&str]) -> Result<(), CliError> {
    if allowed.contains(&value) {
        Ok(())
    } else {
        Err(config_err(format!(
            "unknown {what} {value:?}, expected one of {}",
            allowed.join(", ")
        )))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("config {} is not a valid run config: {e}", path.display())))
    }

    /// Writes the exact config into the run directory.
    pub fn save_into(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join("run_config.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Format(format!("cannot serialize run config: {e}")))?;
        text.push('\n');
        fs::write(&path, text)
            .map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    /// Stable identifier embedded in CSV rows. Depends only on what the run
    /// computes, never on paths or time, so reruns reproduce output bytes.
    pub fn run_id(&self) -> String {
        let subject = match self.command.as_str() {
            "gen-data" => &self.policy,
            "sweep" => &self.sweep,
            "plot" => &self.metric,
            _ => &self.algo,
        };
        format!("{}-{}-{}-s{}", self.command, subject, self.env, self.seed)
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind, CliError> {
        Ok(ScheduleKind::parse(&self.schedule)?)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(match self.schedule_kind()? {
            ScheduleKind::Linear => NoiseSchedule::linear(),
            ScheduleKind::Cosine => NoiseSchedule::cosine(),
            ScheduleKind::Edm => NoiseSchedule::edm(),
            ScheduleKind::Rectified => NoiseSchedule::rectified(),
        })
    }

    pub fn solver_kind(&self) -> Result<SolverKind, CliError> {
        Ok(SolverKind::parse(&self.solver)?)
    }

    pub fn policy_tier(&self) -> Result<PolicyTier, CliError> {
        match self.policy.as_str() {
            "expert" => Ok(PolicyTier::Expert),
            "medium" => Ok(PolicyTier::Medium),
            "random" => Ok(PolicyTier::Random),
            other => Err(config_err(format!(
                "unknown policy {other:?}, expected one of {}",
                POLICIES.join(", ")
            ))),
        }
    }

    pub fn make_env(&self) -> Result<Box<dyn Env>, CliError> {
        match self.env.as_str() {
            "pointmaze-open" => Ok(Box::new(PointMaze::open())),
            "pointmaze-uwall" => Ok(Box::new(PointMaze::u_wall())),
            "multigoal-k8" => Ok(Box::new(MultiGoalReach::k8())),
            other => Err(config_err(format!(
                "unknown env {other:?}, expected one of {}",
                ENVS.join(", ")
            ))),
        }
    }

    /// Full validation; runs before any work and before anything is written.
    pub fn validate(&self) -> Result<(), CliError> {
        expect_one_of(&self.command, "command", &COMMANDS)?;
        if self.command != "plot" {
            expect_one_of(&self.env, "env", &ENVS)?;
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(config_err("output directory must not be empty"));
        }
        match self.command.as_str() {
            "gen-data" => {
                self.policy_tier()?;
            }
            "train" | "eval" => {
                expect_one_of(&self.algo, "algo", &ALGOS)?;
                self.require_data()?;
                self.validate_training()?;
                self.validate_agent_combo()?;
                if self.command == "eval" {
                    if self.episodes == 0 {
                        return Err(config_err("eval needs at least one episode"));
                    }
                    if self.workers == 0 {
                        return Err(config_err("workers must be at least 1"));
                    }
                }
            }
            "sweep" => {
                expect_one_of(&self.sweep, "sweep kind", &SWEEPS)?;
                self.require_data()?;
                self.validate_training()?;
                let schedule = self.schedule_kind()?;
                match self.sweep.as_str() {
                    "solvers" => {
                        if self.solvers.is_empty() {
                            return Err(config_err("solver sweep needs at least one solver"));
                        }
                        for name in &self.solvers {
                            let kind = SolverKind::parse(name)?;
                            if !kind.supports(schedule) {
                                return Err(config_err(format!(
                                    "solver {name} does not support the {} schedule",
                                    schedule.name()
                                )));
                            }
                        }
                        if self.steps_list.is_empty() || self.steps_list.iter().any(|s| *s == 0) {
                            return Err(config_err("steps list must be nonempty with positive entries"));
                        }
                        if self.seeds.is_empty() {
                            return Err(config_err("sweep needs at least one seed"));
                        }
                        if self.samples < 2 {
                            return Err(config_err("sweep needs at least 2 samples per cell"));
                        }
                    }
                    _ => {
                        if self.ema_rates.is_empty()
                            || self.ema_rates.iter().any(|r| !(0.0..1.0).contains(r))
                        {
                            return Err(config_err("ema rates must be nonempty and inside [0, 1)"));
                        }
                        if self.checkpoint_every == 0 {
                            return Err(config_err("checkpoint interval must be positive"));
                        }
                        if self.gradient_steps < self.checkpoint_every {
                            return Err(config_err(
                                "gradient steps must cover at least one checkpoint interval",
                            ));
                        }
                    }
                }
            }
            _ => {
                if self.input.is_none() {
                    return Err(config_err("plot needs --input pointing at a metrics CSV"));
                }
            }
        }
        Ok(())
    }

    fn require_data(&self) -> Result<(), CliError> {
        if self.data.is_none() {
            return Err(config_err(format!("{} needs --data pointing at a dataset", self.command)));
        }
        Ok(())
    }

    fn validate_training(&self) -> Result<(), CliError> {
        self.schedule_kind()?;
        let solver = self.solver_kind()?;
        if !solver.supports(self.schedule_kind()?) {
            return Err(config_err(format!(
                "solver {} does not support the {} schedule",
                self.solver, self.schedule
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|w| *w == 0) {
            return Err(config_err("hidden widths must be nonempty and positive"));
        }
        if self.gradient_steps == 0 || self.batch_size == 0 {
            return Err(config_err("gradient steps and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err("learning rate must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("ema decay must be inside [0, 1)"));
        }
        if self.sample_steps == 0 {
            return Err(config_err("sample steps must be positive"));
        }
        Ok(())
    }

    /// Agent trainers build on the linear variance-preserving backbone, so
    /// the schedule and solver must both be compatible with it. Rejected
    /// before any training starts.
    fn validate_agent_combo(&self) -> Result<(), CliError> {
        let schedule = self.schedule_kind()?;
        if schedule != ScheduleKind::Linear {
            return Err(config_err(format!(
                "algo {} trains on the linear schedule; got {}",
                self.algo, self.schedule
            )));
        }
        if !self.solver_kind()?.supports(ScheduleKind::Linear) {
            return Err(config_err(format!(
                "solver {} cannot sample a linear-schedule model",
                self.solver
            )));
        }
        if self.algo == "adaptdiffuser" && self.env == "pointmaze-uwall" {
            return Err(config_err(
                "adaptdiffuser needs an analytic dynamics model; the walled maze has none",
            ));
        }
        if self.algo == "diffpolicy" && (self.action_window == 0 || self.action_window > self.horizon) {
            return Err(config_err("action window must be in 1..=horizon"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_config() -> RunConfig {
        RunConfig {
            command: "eval".into(),
            data: Some(PathBuf::from("ds.bin")),
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = eval_config();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"comand\": \"eval\"}").unwrap_err();
        assert!(err.to_string().contains("comand"));
    }

    #[test]
    fn incompatible_solver_schedule_pairs_fail_validation() {
        let mut cfg = eval_config();
        cfg.solver = "edm_euler".into();
        assert!(cfg.validate().is_err());
        cfg.solver = "ddim".into();
        cfg.schedule = "edm".into();
        assert!(cfg.validate().is_err());
        cfg.schedule = "linear".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn run_id_depends_on_content_not_paths() {
        let mut a = eval_config();
        let mut b = eval_config();
        a.out_dir = PathBuf::from("x");
        b.out_dir = PathBuf::from("y");
        assert_eq!(a.run_id(), b.run_id());
        b.seed = 9;
        assert_ne!(a.run_id(), b.run_id());
    }
}
