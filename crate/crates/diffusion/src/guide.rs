//! Steering hooks consumed by the sampling loop: classifier guidance over a
//! scalar field, classifier-free guidance, mask-based inpainting, and the
//! sampling extensions (extra final-level refinement, warm starts, and
//! candidate generation with score-based selection).

use std::fmt;
use std::sync::Arc;

use dmtk_nn::{
    adam_step, backprop_trace, mat, mlp_forward, mlp_forward_trace, sinusoidal_time_embed,
    time_embed_rows, Activation, AdamConfig, AdamState, Matrix, MlpSpec, ParamSet,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{CondBatch, Condition, DenoiseModel, EvalRng, DEFAULT_TIME_DIM};
use crate::prediction::{data_to_noise, noise_to_data, PredictionKind};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::solver::{check_compat, run_chain, sample, step_once, ChainOpts, SampleConfig};
use crate::train::TrainConfig;
use crate::{numeric_err, Error, Result};

/// A differentiable scalar objective over noisy states. Classifier guidance
/// follows its gradient; candidate selection ranks by its value.
pub trait ScalarField: Send + Sync {
    /// Per-row values and the gradient of the summed value with respect to x.
    fn value_grad(&self, x: &Matrix, t: f64) -> Result<(Vec<f64>, Matrix)>;
}

/// C(x) = -||x - goal||^2 / 2, the hand-checkable quadratic objective.
#[derive(Debug, Clone)]
pub struct QuadraticField {
    pub goal: Vec<f64>,
}

impl ScalarField for QuadraticField {
    fn value_grad(&self, x: &Matrix, _t: f64) -> Result<(Vec<f64>, Matrix)> {
        if x.ncols() != self.goal.len() {
            return Err(Error::Config(format!(
                "field dim {} does not match input dim {}",
                self.goal.len(),
                x.ncols()
            )));
        }
        let mut vals = vec![0.0; x.nrows()];
        let mut grad = Matrix::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let d = x[[i, j]] - self.goal[j];
                vals[i] -= 0.5 * d * d;
                grad[[i, j]] = -d;
            }
        }
        Ok((vals, grad))
    }
}

/// A scalar field backed by an MLP regressor J(x_t, t), trained on
/// forward-perturbed inputs by `train_guidance_classifier`.
#[derive(Debug, Clone)]
pub struct TrainedValueClassifier {
    spec: MlpSpec,
    params: ParamSet,
    data_dim: usize,
    time_dim: usize,
}

impl TrainedValueClassifier {
    /// All-zero weights: predicts 0 everywhere with zero gradient, so any
    /// guidance built on it is inert.
    pub fn zeros(data_dim: usize, hidden: &[usize], time_dim: usize) -> Result<Self> {
        let spec = classifier_spec(data_dim, hidden, time_dim)?;
        let params = spec.init(0).zeros_like();
        Ok(TrainedValueClassifier { spec, params, data_dim, time_dim })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn assemble(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        if x.ncols() != self.data_dim {
            return Err(Error::Config(format!(
                "classifier dim {} does not match input dim {}",
                self.data_dim,
                x.ncols()
            )));
        }
        let ts = vec![t; x.nrows()];
        let emb = time_embed_rows(&ts, self.time_dim);
        let mut input = Matrix::zeros((x.nrows(), self.data_dim + self.time_dim));
        for i in 0..x.nrows() {
            for j in 0..self.data_dim {
                input[[i, j]] = x[[i, j]];
            }
            for j in 0..self.time_dim {
                input[[i, self.data_dim + j]] = emb[[i, j]];
            }
        }
        Ok(input)
    }

    /// Forward-only evaluation of J(x, t) per row.
    pub fn value(&self, x: &Matrix, t: f64) -> Result<Vec<f64>> {
        let input = self.assemble(x, t)?;
        let out = mlp_forward(&self.spec, &self.params, &input, false, &mut EvalRng)?;
        Ok((0..x.nrows()).map(|i| out[[i, 0]]).collect())
    }
}

impl ScalarField for TrainedValueClassifier {
    fn value_grad(&self, x: &Matrix, t: f64) -> Result<(Vec<f64>, Matrix)> {
        let input = self.assemble(x, t)?;
        let (out, trace) = mlp_forward_trace(&self.spec, &self.params, &input, false, &mut EvalRng)?;
        let upstream = Matrix::from_elem((x.nrows(), 1), 1.0);
        let (_, input_grad) = backprop_trace(&self.spec, &self.params, &trace, &upstream)?;
        let vals = (0..x.nrows()).map(|i| out[[i, 0]]).collect();
        let mut grad = Matrix::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..self.data_dim {
                grad[[i, j]] = input_grad[[i, j]];
            }
        }
        Ok((vals, grad))
    }
}

fn classifier_spec(data_dim: usize, hidden: &[usize], time_dim: usize) -> Result<MlpSpec> {
    if data_dim == 0 {
        return Err(Error::Config("classifier needs at least one data dimension".into()));
    }
    if time_dim < 2 || time_dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim must be even and >= 2, got {time_dim}")));
    }
    let mut spec = MlpSpec::plain(data_dim + time_dim, hidden, 1);
    spec.activation = Activation::Silu;
    spec.validate()?;
    Ok(spec)
}

/// Fits J(x_t, t) to per-example returns by squared loss on forward-perturbed
/// inputs: each minibatch row draws an example, a time t ~ U[t_eps, t_max],
/// and fresh perturbation noise. EMA and condition dropout settings in `cfg`
/// are not used here.
pub fn train_guidance_classifier(
    x0: &Matrix,
    returns: &[f64],
    sched: &NoiseSchedule,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainedValueClassifier> {
    if x0.nrows() == 0 {
        return Err(Error::Config("classifier training set is empty".into()));
    }
    if x0.nrows() != returns.len() {
        return Err(Error::Config(format!(
            "{} examples but {} returns",
            x0.nrows(),
            returns.len()
        )));
    }
    cfg.validate()?;
    let data_dim = x0.ncols();
    let time_dim = DEFAULT_TIME_DIM;
    let spec = classifier_spec(data_dim, hidden, time_dim)?;
    let mut params = spec.init(cfg.seed);
    let mut adam = AdamState::new(params.total_len(), AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = x0.nrows();
    let b = cfg.batch_size.min(n.max(1));
    for step in 0..cfg.gradient_steps {
        let mut input = Matrix::zeros((b, data_dim + time_dim));
        let mut target = Matrix::zeros((b, 1));
        for r in 0..b {
            let idx = rng.random_range(0..n);
            let t = sched.t_eps + (sched.t_max - sched.t_eps) * rng.random::<f64>();
            let row: Vec<f64> = x0.row(idx).to_vec();
            let (x_t, _) = sched.perturb_rand(&row, t, &mut rng)?;
            for j in 0..data_dim {
                input[[r, j]] = x_t[j];
            }
            let emb = sinusoidal_time_embed(t, time_dim);
            for j in 0..time_dim {
                input[[r, data_dim + j]] = emb[j];
            }
            target[[r, 0]] = returns[idx];
        }
        let (out, trace) = mlp_forward_trace(&spec, &params, &input, true, &mut rng)?;
        let (loss, upstream) = crate::loss::weighted_mse(&out, &target, None);
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: Some(step),
                what: format!("classifier loss became {loss}"),
            });
        }
        let (grads, _) = backprop_trace(&spec, &params, &trace, &upstream)?;
        adam_step(&mut adam, &mut params, &grads)?;
    }
    Ok(TrainedValueClassifier { spec, params, data_dim, time_dim })
}

/// Classifier guidance: a scalar field plus its scale.
#[derive(Clone)]
pub struct ClassifierGuide {
    pub field: Arc<dyn ScalarField>,
    pub weight: f64,
}

impl ClassifierGuide {
    pub fn new(field: Arc<dyn ScalarField>, weight: f64) -> Result<Self> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::Config(format!("guidance weight must be finite and >= 0, got {weight}")));
        }
        Ok(ClassifierGuide { field, weight })
    }
}

impl fmt::Debug for ClassifierGuide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierGuide").field("weight", &self.weight).finish_non_exhaustive()
    }
}

/// How predictions are steered during sampling.
#[derive(Debug, Clone)]
pub enum Guidance {
    /// Plain unconditioned prediction.
    None,
    /// Condition the model without reweighting.
    Conditional(Condition),
    /// Classifier-free extrapolation between the conditional and
    /// null-conditioned predictions.
    Cfg { cond: Condition, weight: f64 },
    /// Gradient steering by a separately trained scalar field.
    Cg(ClassifierGuide),
}

/// eps_bar = eps_hat - w * sigma_t * grad_x C(x_t, t).
pub fn cg_adjust(
    eps_hat: &Matrix,
    x_t: &Matrix,
    t: f64,
    guide: &ClassifierGuide,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    if eps_hat.dim() != x_t.dim() {
        return Err(Error::Config(format!(
            "prediction shape {:?} does not match state shape {:?}",
            eps_hat.dim(),
            x_t.dim()
        )));
    }
    let (_, sigma) = sched.alpha_sigma(t)?;
    let (_, grad) = guide.field.value_grad(x_t, t)?;
    if grad.dim() != x_t.dim() {
        return Err(Error::Config("field gradient shape does not match state".into()));
    }
    let mut out = eps_hat.clone();
    let scale = guide.weight * sigma;
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[[i, j]] -= scale * grad[[i, j]];
        }
    }
    Ok(out)
}

/// eps_bar = eps_uncond + w (eps_cond - eps_uncond). w = 0 returns the
/// unconditional input and w = 1 the conditional one, both exactly.
pub fn cfg_combine(eps_uncond: &Matrix, eps_cond: &Matrix, w: f64) -> Result<Matrix> {
    if eps_uncond.dim() != eps_cond.dim() {
        return Err(Error::Config(format!(
            "prediction shapes {:?} and {:?} differ",
            eps_uncond.dim(),
            eps_cond.dim()
        )));
    }
    if !w.is_finite() {
        return Err(Error::Config(format!("guidance weight must be finite, got {w}")));
    }
    if w == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    let mut out = eps_uncond.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[[i, j]] += w * (eps_cond[[i, j]] - eps_uncond[[i, j]]);
        }
    }
    Ok(out)
}

/// Model prediction at (x, t) with the guidance applied. Classifier guidance
/// acts in noise space: data-parameterized predictions are converted, the
/// noise prediction adjusted, and the result converted back, so every solver
/// family sees a consistently steered prediction.
pub fn guided_prediction(
    model: &dyn DenoiseModel,
    x: &Matrix,
    t: f64,
    guidance: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    match guidance {
        Guidance::None => model.predict(x, t, &CondBatch::none()),
        Guidance::Conditional(c) => model.predict(x, t, &CondBatch::shared(c.clone())),
        Guidance::Cfg { cond, weight } => {
            if !weight.is_finite() {
                return Err(Error::Config(format!("guidance weight must be finite, got {weight}")));
            }
            let cond_pred = model.predict(x, t, &CondBatch::shared(cond.clone()))?;
            if *weight == 1.0 {
                return Ok(cond_pred);
            }
            let uncond = model.predict(x, t, &CondBatch::null_shared())?;
            cfg_combine(&uncond, &cond_pred, *weight)
        }
        Guidance::Cg(guide) => {
            let pred = model.predict(x, t, &CondBatch::none())?;
            match model.kind() {
                PredictionKind::Noise => cg_adjust(&pred, x, t, guide, sched),
                PredictionKind::Data | PredictionKind::EdmRaw => {
                    let eps = data_to_noise(x, t, &pred, sched)?;
                    let adjusted = cg_adjust(&eps, x, t, guide, sched)?;
                    noise_to_data(x, t, &adjusted, sched)
                }
                PredictionKind::RfVelocity => Err(Error::Config(
                    "classifier guidance does not apply to velocity predictions".into(),
                )),
            }
        }
    }
}

/// What replaces masked coordinates: the known values themselves, or the
/// known values pushed through the forward process at the current time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Clean,
    Noised,
}

/// Freeze pattern for inpainting: `mask` marks frozen coordinates with 1,
/// `known` holds their values. A single-row mask broadcasts over the batch.
#[derive(Debug, Clone)]
pub struct SampleMask {
    pub mask: Matrix,
    pub known: Matrix,
    pub mode: MaskMode,
}

impl SampleMask {
    pub fn new(mask: Matrix, known: Matrix) -> Result<Self> {
        if mask.dim() != known.dim() {
            return Err(Error::Config(format!(
                "mask shape {:?} does not match known-values shape {:?}",
                mask.dim(),
                known.dim()
            )));
        }
        for v in mask.iter() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::Config(format!("mask entries must be 0 or 1, found {v}")));
            }
        }
        for (m, k) in mask.iter().zip(known.iter()) {
            if *m == 1.0 && !k.is_finite() {
                return Err(Error::Config("known values must be finite wherever mask = 1".into()));
            }
        }
        Ok(SampleMask { mask, known, mode: MaskMode::Clean })
    }

    pub fn with_mode(mut self, mode: MaskMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Replaces masked coordinates of `x`; unmasked coordinates pass through
/// untouched. Clean mode substitutes the known values verbatim (idempotent);
/// noised mode substitutes alpha_t * known + sigma_t * fresh noise.
pub fn apply_mask(
    x: &Matrix,
    m: &SampleMask,
    sched: &NoiseSchedule,
    t: f64,
    mode: MaskMode,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    let rows = m.mask.nrows();
    if m.mask.ncols() != x.ncols() || (rows != 1 && rows != x.nrows()) {
        return Err(Error::Config(format!(
            "mask shape {:?} does not fit batch shape {:?}",
            m.mask.dim(),
            x.dim()
        )));
    }
    let mut out = x.clone();
    match mode {
        MaskMode::Clean => {
            for i in 0..x.nrows() {
                let mi = if rows == 1 { 0 } else { i };
                for j in 0..x.ncols() {
                    if m.mask[[mi, j]] == 1.0 {
                        out[[i, j]] = m.known[[mi, j]];
                    }
                }
            }
        }
        MaskMode::Noised => {
            let (a, s) = sched.alpha_sigma(t)?;
            for i in 0..x.nrows() {
                let mi = if rows == 1 { 0 } else { i };
                for j in 0..x.ncols() {
                    if m.mask[[mi, j]] == 1.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        out[[i, j]] = a * m.known[[mi, j]] + s * z;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Extra refinement at the final noise level: repeats the last grid pair's
/// denoise step `m` times with the timestep held there. Deterministic by
/// default; `stochastic` restores the solver's noise injection.
pub fn diffusion_x(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    m: usize,
    opts: &ChainOpts,
    stochastic: bool,
    x_final: &Matrix,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    check_compat(opts.solver, sched, model.kind())?;
    let (s_last, t_last) = grid.last_pair();
    let eff = ChainOpts {
        temperature: if stochastic { opts.temperature } else { 0.0 },
        ..*opts
    };
    let mut x = x_final.clone();
    for rep in 0..m {
        let mut prev = None;
        x = step_once(model, sched, &eff, s_last, t_last, &x, &mut prev, rng)
            .map_err(|e| e.with_step(rep))?;
        if !mat::all_finite(&x) {
            return Err(Error::Numeric {
                step: Some(rep),
                what: "refinement state became non-finite".into(),
            });
        }
        if let Some(msk) = opts.mask {
            x = apply_mask(&x, msk, sched, t_last, msk.mode, rng)?;
        }
    }
    Ok(x)
}

/// Re-noises the previous decision's sample to level t_w and refines it with
/// k solver steps over [t_eps, t_w]. t_w = t_eps degenerates to pure
/// perturbation at the noise floor, matching the near-identity limit.
pub fn warm_start(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    prev_sample: &Matrix,
    t_w: f64,
    k: usize,
    opts: &ChainOpts,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    if !(t_w >= sched.t_eps) || t_w > sched.t_max * (1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "warm-start level {t_w} outside [{}, {}]",
            sched.t_eps, sched.t_max
        )));
    }
    if k == 0 {
        return Err(Error::Config("warm start needs at least one refinement step".into()));
    }
    if prev_sample.ncols() != model.data_dim() {
        return Err(Error::Config(format!(
            "sample dim {} does not match model dim {}",
            prev_sample.ncols(),
            model.data_dim()
        )));
    }
    let (a, s) = sched.alpha_sigma(t_w)?;
    let z = mat::randn(prev_sample.nrows(), prev_sample.ncols(), rng);
    let mut x = Matrix::zeros(prev_sample.dim());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            x[[i, j]] = a * prev_sample[[i, j]] + s * z[[i, j]];
        }
    }
    if t_w == sched.t_eps {
        return Ok(x);
    }
    let grid = sched.time_grid_over(t_w, k, sched.default_spacing())?;
    run_chain(model, sched, &grid, opts, x, rng)
}

/// Sampling settings for the extensions: extra final-level repetitions M,
/// the warm-start pair (t_w, k), and whether refinement steps keep their
/// stochastic term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XtraConfig {
    pub m: usize,
    pub t_w: f64,
    pub k: usize,
    pub stochastic: bool,
}

impl XtraConfig {
    pub fn for_schedule(sched: &NoiseSchedule) -> Self {
        XtraConfig { m: 0, t_w: 0.3 * sched.t_max, k: 2, stochastic: false }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.t_w > sched.t_eps) || self.t_w > sched.t_max * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "warm-start level {} outside ({}, {}]",
                self.t_w, sched.t_eps, sched.t_max
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("warm start needs at least one refinement step".into()));
        }
        Ok(())
    }
}

/// Draws `n` candidates in one batched chain. When classifier guidance is
/// active the candidates are scored by the field at the grid terminus.
pub fn generate_candidates(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    guidance: &Guidance,
    mask: Option<&SampleMask>,
    n: usize,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    if n == 0 {
        return Err(Error::Config("candidate count must be at least 1".into()));
    }
    let mut batched = cfg.clone();
    batched.batch = n;
    let x = sample(model, sched, &batched, guidance, mask, None)?;
    let scores = match guidance {
        Guidance::Cg(g) => Some(g.field.value_grad(&x, sched.t_eps)?.0),
        _ => None,
    };
    Ok((x, scores))
}

/// Index of the best finite score. Errors when no score is usable.
pub fn best_candidate(scores: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in scores.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| numeric_err("no candidate has a finite score"))
}
