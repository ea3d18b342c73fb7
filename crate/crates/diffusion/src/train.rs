//! The denoiser training loop: minibatch Adam on the kind-appropriate loss
//! with an EMA weight track, plus held-out loss evaluation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dmtk_nn::mlp::mlp_forward;
use dmtk_nn::optim::{adam_step, ema_update, AdamConfig, AdamState, EmaState};
use dmtk_nn::Matrix;

use crate::loss::{cfg_dropout, edm_loss, rf_loss, score_matching_loss, weighted_mse};
use crate::model::{CondBatch, Condition, Denoiser};
use crate::prediction::{edm_coeffs, PredictionKind};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    /// Probability of replacing a condition with the null token per sample.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gradient_steps: 2000,
            batch_size: 64,
            learning_rate: 3e-4,
            ema_decay: 0.995,
            cond_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "condition dropout {} outside [0, 1]",
                self.cond_dropout
            )));
        }
        Ok(())
    }
}

/// Training data: one sample per row, with optional row-matched conditions.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub x0: Matrix,
    pub conds: Option<Vec<Condition>>,
}

impl TrainSet {
    pub fn unconditioned(x0: Matrix) -> Self {
        TrainSet { x0, conds: None }
    }

    pub fn with_conds(x0: Matrix, conds: Vec<Condition>) -> Result<Self> {
        if conds.len() != x0.nrows() {
            return Err(Error::Config(format!(
                "{} conditions for {} samples",
                conds.len(),
                x0.nrows()
            )));
        }
        Ok(TrainSet { x0, conds: Some(conds) })
    }

    pub fn len(&self) -> usize {
        self.x0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.nrows() == 0
    }
}

/// Optimizer state that survives across `run` calls, so training can pause
/// for checkpoint snapshots without resetting Adam moments or the EMA track.
pub struct Trainer {
    cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    trace: Vec<f64>,
}

impl Trainer {
    /// Prepares optimizer state and attaches a fresh EMA shadow to the model.
    pub fn new(model: &mut Denoiser, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.ema = Some(EmaState::new(&model.params, cfg.ema_decay));
        Ok(Trainer {
            adam: AdamState::new(model.params.total_len(), AdamConfig::with_lr(cfg.learning_rate)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            trace: Vec::new(),
        })
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn steps_done(&self) -> usize {
        self.trace.len()
    }

    /// Runs `steps` further gradient updates on the model.
    pub fn run(&mut self, model: &mut Denoiser, data: &TrainSet, steps: usize) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        if data.is_empty() {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        if model.cond_dim().is_some() != data.conds.is_some() {
            return Err(Error::Config(
                "model and dataset disagree on conditioning (one has it, the other does not)".into(),
            ));
        }
        let n = data.len();
        let dim = data.x0.ncols();
        for _ in 0..steps {
            let step_index = self.trace.len();
            let mut batch = Matrix::zeros((self.cfg.batch_size, dim));
            let mut idx = Vec::with_capacity(self.cfg.batch_size);
            for b in 0..self.cfg.batch_size {
                let i = self.rng.random_range(0..n);
                idx.push(i);
                batch.row_mut(b).assign(&data.x0.row(i));
            }
            let cond = match &data.conds {
                None => CondBatch::none(),
                Some(cs) => {
                    let mut rows = Vec::with_capacity(idx.len());
                    for &i in &idx {
                        rows.push(cfg_dropout(&cs[i], self.cfg.cond_dropout, &mut self.rng)?);
                    }
                    CondBatch::PerRow(rows)
                }
            };
            let result = match model.kind() {
                PredictionKind::Noise | PredictionKind::Data => {
                    let sched = *model.schedule();
                    score_matching_loss(model, &batch, &cond, &sched, &mut self.rng)
                }
                PredictionKind::EdmRaw => {
                    let pre = *model.precond();
                    edm_loss(model, &batch, &pre, &mut self.rng)
                }
                PredictionKind::RfVelocity => rf_loss(model, &batch, &mut self.rng),
            };
            let (loss, grads) = result.map_err(|e| match e {
                Error::Numeric { what, .. } => Error::Numeric { step: Some(step_index), what },
                other => other,
            })?;
            adam_step(&mut self.adam, &mut model.params, &grads)?;
            ema_update(model.ema.as_mut().expect("trainer installed ema"), &model.params);
            self.trace.push(loss);
        }
        Ok(())
    }
}

/// Runs the full configured training and returns the loss trace. The model
/// keeps both weight sets: raw in `params`, averaged in `ema`.
pub fn train(model: &mut Denoiser, data: &TrainSet, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(model, data, cfg.gradient_steps)?;
    Ok(trainer.trace)
}

/// Loss of the frozen model on held-out data, without gradients. Draws the
/// same per-sample randomness as training, so two calls with one rng seed
/// are comparable across models and weight sets.
pub fn eval_loss(model: &Denoiser, data: &TrainSet, use_ema: bool, rng: &mut dyn RngCore) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    if model.cond_dim().is_some() != data.conds.is_some() {
        return Err(Error::Config(
            "model and dataset disagree on conditioning (one has it, the other does not)".into(),
        ));
    }
    let params = if use_ema {
        match &model.ema {
            Some(e) => &e.shadow,
            None => return Err(Error::Config("model has no ema weights".into())),
        }
    } else {
        &model.params
    };
    let (b, d) = data.x0.dim();
    let x0 = &data.x0;
    let cond = match &data.conds {
        None => CondBatch::none(),
        Some(cs) => CondBatch::PerRow(cs.clone()),
    };
    let sched = model.schedule();

    let (input, target, weights) = match model.kind() {
        PredictionKind::Noise | PredictionKind::Data => {
            let mut ts = Vec::with_capacity(b);
            for _ in 0..b {
                ts.push(sched.t_eps + rng.random::<f64>() * (sched.t_max - sched.t_eps));
            }
            let mut eps = Matrix::zeros((b, d));
            for v in eps.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let mut x_t = Matrix::zeros((b, d));
            for i in 0..b {
                let (a, s) = sched.alpha_sigma(ts[i])?;
                for j in 0..d {
                    x_t[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
                }
            }
            let target = if model.kind() == PredictionKind::Noise { eps } else { x0.clone() };
            (model.assemble(&x_t, &ts, &cond)?, target, None)
        }
        PredictionKind::RfVelocity => {
            let ts: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
            let mut x1 = Matrix::zeros((b, d));
            for v in x1.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let mut x_t = Matrix::zeros((b, d));
            let mut target = Matrix::zeros((b, d));
            for i in 0..b {
                for j in 0..d {
                    x_t[[i, j]] = ts[i] * x1[[i, j]] + (1.0 - ts[i]) * x0[[i, j]];
                    target[[i, j]] = x0[[i, j]] - x1[[i, j]];
                }
            }
            (model.assemble(&x_t, &ts, &cond)?, target, None)
        }
        PredictionKind::EdmRaw => {
            let (lo, hi) = (sched.sigma_min.ln(), sched.sigma_max.ln());
            let sigmas: Vec<f64> = (0..b).map(|_| (lo + rng.random::<f64>() * (hi - lo)).exp()).collect();
            let coeffs: Vec<_> = sigmas.iter().map(|&s| edm_coeffs(s, model.precond())).collect();
            let mut eps = Matrix::zeros((b, d));
            for v in eps.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let mut inner = Matrix::zeros((b, d));
            for i in 0..b {
                for j in 0..d {
                    inner[[i, j]] = coeffs[i].c_in * (x0[[i, j]] + sigmas[i] * eps[[i, j]]);
                }
            }
            let ts: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
            // Evaluate F and fold the skip path into an adjusted target:
            // lambda*||D - y||^2 = lambda*c_out^2*||F - (y - c_skip*x)/c_out||^2.
            let input = model.assemble(&inner, &ts, &cond)?;
            let mut raw_target = Matrix::zeros((b, d));
            for i in 0..b {
                for j in 0..d {
                    let noised = x0[[i, j]] + sigmas[i] * eps[[i, j]];
                    raw_target[[i, j]] = (x0[[i, j]] - coeffs[i].c_skip * noised) / coeffs[i].c_out;
                }
            }
            let w: Vec<f64> = coeffs.iter().map(|c| c.weight * c.c_out * c.c_out).collect();
            let pred = mlp_forward(model.spec(), params, &input, false, rng)?;
            let (loss, _) = weighted_mse(&pred, &raw_target, Some(&w));
            return Ok(loss);
        }
    };
    let pred = mlp_forward(model.spec(), params, &input, false, rng)?;
    let (loss, _) = weighted_mse(&pred, &target, weights);
    Ok(loss)
}
