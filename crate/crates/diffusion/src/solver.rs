//! Reverse-process steppers and the sampling loop. Each `*_step` function is
//! a pure map from the state at time s to the state at time t < s given the
//! model prediction at s; `sample` wires them to a schedule grid, guidance,
//! and masking.
//!
//! Solver families are tied to schedule families: the ancestral and
//! exponential-integrator steppers (ddpm, ddim, dpm_solver_1, sde_dpmpp_1,
//! ode_dpmpp_2m) run on the variance-preserving schedules, the Euler and
//! Heun steppers on the edm schedule, and rf_euler on the rectified one.

use dmtk_nn::{mat, Matrix};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::guide::{apply_mask, guided_prediction, Guidance, SampleMask};
use crate::model::DenoiseModel;
use crate::prediction::{data_to_noise, noise_to_data, PredictionKind};
use crate::schedule::{GridSpacing, NoiseSchedule, ScheduleKind, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Ddpm,
    Ddim,
    DpmSolver1,
    SdeDpmpp1,
    OdeDpmpp2m,
    EdmEuler,
    EdmHeun,
    RfEuler,
}

impl SolverKind {
    pub const ALL: [SolverKind; 8] = [
        SolverKind::Ddpm,
        SolverKind::Ddim,
        SolverKind::DpmSolver1,
        SolverKind::SdeDpmpp1,
        SolverKind::OdeDpmpp2m,
        SolverKind::EdmEuler,
        SolverKind::EdmHeun,
        SolverKind::RfEuler,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Ddpm => "ddpm",
            SolverKind::Ddim => "ddim",
            SolverKind::DpmSolver1 => "dpm_solver_1",
            SolverKind::SdeDpmpp1 => "sde_dpmpp_1",
            SolverKind::OdeDpmpp2m => "ode_dpmpp_2m",
            SolverKind::EdmEuler => "edm_euler",
            SolverKind::EdmHeun => "edm_heun",
            SolverKind::RfEuler => "rf_euler",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = SolverKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown solver {s:?}, expected one of {}", names.join(", ")))
            })
    }

    pub fn supports(self, kind: ScheduleKind) -> bool {
        match self {
            SolverKind::Ddpm
            | SolverKind::Ddim
            | SolverKind::DpmSolver1
            | SolverKind::SdeDpmpp1
            | SolverKind::OdeDpmpp2m => kind.is_vp(),
            SolverKind::EdmEuler | SolverKind::EdmHeun => kind == ScheduleKind::Edm,
            SolverKind::RfEuler => kind == ScheduleKind::Rectified,
        }
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, SolverKind::Ddpm | SolverKind::SdeDpmpp1)
    }

    /// Multistep methods need history before their update rule applies.
    pub fn min_steps(self) -> usize {
        if self == SolverKind::OdeDpmpp2m {
            2
        } else {
            1
        }
    }
}

fn same_shape(what: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Config(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Deterministic update x_t = alpha_t x0_hat + sigma_t eps_hat with
/// x0_hat = (x_s - sigma_s eps_hat) / alpha_s.
pub fn ddim_step(
    x_s: &Matrix,
    s: f64,
    t: f64,
    eps_hat: &Matrix,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    same_shape("ddim_step", x_s, eps_hat)?;
    if s == t {
        return Ok(x_s.clone());
    }
    let (a_s, sig_s) = sched.alpha_sigma(s)?;
    let (a_t, sig_t) = sched.alpha_sigma(t)?;
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            let x0 = (x_s[[i, j]] - sig_s * eps_hat[[i, j]]) / a_s;
            out[[i, j]] = a_t * x0 + sig_t * eps_hat[[i, j]];
        }
    }
    Ok(out)
}

/// Ancestral update: posterior mean plus `temperature`-scaled posterior
/// noise. The posterior std is beta = (sigma_t/sigma_s) sqrt(1 - a_s^2/a_t^2)
/// and the remaining noise direction keeps scale sqrt(sigma_t^2 - beta^2).
pub fn ddpm_step(
    x_s: &Matrix,
    s: f64,
    t: f64,
    eps_hat: &Matrix,
    sched: &NoiseSchedule,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    same_shape("ddpm_step", x_s, eps_hat)?;
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if s == t {
        return Ok(x_s.clone());
    }
    let (a_s, sig_s) = sched.alpha_sigma(s)?;
    let (a_t, sig_t) = sched.alpha_sigma(t)?;
    let ratio = 1.0 - (a_s * a_s) / (a_t * a_t);
    if ratio < 0.0 {
        return Err(Error::Grid(format!("ddpm step must decrease time, got s = {s}, t = {t}")));
    }
    let beta = sig_t / sig_s * ratio.sqrt();
    let dir_var = sig_t * sig_t - beta * beta;
    if dir_var < -1e-9 {
        return Err(crate::numeric_err(format!(
            "ddpm direction variance {dir_var} fell below zero at s = {s}, t = {t}"
        )));
    }
    let dir = dir_var.max(0.0).sqrt();
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            let x0 = (x_s[[i, j]] - sig_s * eps_hat[[i, j]]) / a_s;
            out[[i, j]] = a_t * x0 + dir * eps_hat[[i, j]];
        }
    }
    if temperature > 0.0 {
        let z = mat::randn(x_s.nrows(), x_s.ncols(), rng);
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[i, j]] += temperature * beta * z[[i, j]];
            }
        }
    }
    Ok(out)
}

/// First-order exponential integrator in log-SNR time:
/// x_t = (alpha_t/alpha_s) x_s - sigma_t (e^h - 1) eps_hat, h = lambda_t - lambda_s.
/// Algebraically identical to `ddim_step`; kept in integrator form so the
/// equivalence is a test, not a tautology.
pub fn dpm_solver_1_step(
    x_s: &Matrix,
    s: f64,
    t: f64,
    eps_hat: &Matrix,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    same_shape("dpm_solver_1_step", x_s, eps_hat)?;
    if s == t {
        return Ok(x_s.clone());
    }
    let h = sched.log_snr(t)? - sched.log_snr(s)?;
    let (a_s, _) = sched.alpha_sigma(s)?;
    let (a_t, sig_t) = sched.alpha_sigma(t)?;
    let scale = a_t / a_s;
    let coeff = sig_t * (h.exp() - 1.0);
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            out[[i, j]] = scale * x_s[[i, j]] - coeff * eps_hat[[i, j]];
        }
    }
    Ok(out)
}

/// First-order SDE integrator in data parameterization:
/// x_t = (sigma_t/sigma_s) e^{-h} x_s + alpha_t (1 - e^{-2h}) x0_hat + noise,
/// with injected scale temperature * sigma_t * sqrt(1 - e^{-2h}).
pub fn sde_dpmpp_1_step(
    x_s: &Matrix,
    s: f64,
    t: f64,
    x0_hat: &Matrix,
    sched: &NoiseSchedule,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    same_shape("sde_dpmpp_1_step", x_s, x0_hat)?;
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be finite and >= 0, got {temperature}")));
    }
    if s == t {
        return Ok(x_s.clone());
    }
    let h = sched.log_snr(t)? - sched.log_snr(s)?;
    if !(h > 0.0) {
        return Err(Error::Grid(format!(
            "sde step needs increasing log-snr, got h = {h} for s = {s}, t = {t}"
        )));
    }
    let (_, sig_s) = sched.alpha_sigma(s)?;
    let (a_t, sig_t) = sched.alpha_sigma(t)?;
    let keep = sig_t / sig_s * (-h).exp();
    let mix = 1.0 - (-2.0 * h).exp();
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            out[[i, j]] = keep * x_s[[i, j]] + a_t * mix * x0_hat[[i, j]];
        }
    }
    if temperature > 0.0 {
        let scale = temperature * sig_t * mix.sqrt();
        let z = mat::randn(x_s.nrows(), x_s.ncols(), rng);
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                out[[i, j]] += scale * z[[i, j]];
            }
        }
    }
    Ok(out)
}

/// Second-order multistep ODE update in data parameterization. With
/// h = lambda_t - lambda_s and r = h_prev / h:
/// x_t = (sigma_t/sigma_s) x_s + alpha_t (1 - e^{-h}) [(1 + 1/2r) x0_s - (1/2r) x0_prev].
/// Callers without history pass x0_prev = x0_s, which collapses to the
/// first-order data-space update.
pub fn ode_dpmpp_2m_step(
    x_s: &Matrix,
    s: f64,
    t: f64,
    x0_s: &Matrix,
    x0_prev: &Matrix,
    h_prev: f64,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    same_shape("ode_dpmpp_2m_step", x_s, x0_s)?;
    same_shape("ode_dpmpp_2m_step", x_s, x0_prev)?;
    if s == t {
        return Ok(x_s.clone());
    }
    let h = sched.log_snr(t)? - sched.log_snr(s)?;
    if !(h > 0.0) {
        return Err(Error::Grid(format!(
            "multistep update needs increasing log-snr, got h = {h} for s = {s}, t = {t}"
        )));
    }
    let r = h_prev / h;
    if !(r > 0.0) {
        return Err(Error::Grid(format!(
            "multistep update needs a previous step in the same direction, got step ratio {r}"
        )));
    }
    let c_cur = 1.0 + 1.0 / (2.0 * r);
    let c_prev = -1.0 / (2.0 * r);
    let (_, sig_s) = sched.alpha_sigma(s)?;
    let (a_t, sig_t) = sched.alpha_sigma(t)?;
    let keep = sig_t / sig_s;
    let gain = a_t * (1.0 - (-h).exp());
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            let target = c_cur * x0_s[[i, j]] + c_prev * x0_prev[[i, j]];
            out[[i, j]] = keep * x_s[[i, j]] + gain * target;
        }
    }
    Ok(out)
}

/// Euler step for the edm ODE dx/dsigma = (x - D(x; sigma)) / sigma.
pub fn edm_euler_step(x_s: &Matrix, sigma_s: f64, sigma_t: f64, d: &Matrix) -> Result<Matrix> {
    same_shape("edm_euler_step", x_s, d)?;
    if !(sigma_s > 0.0) {
        return Err(Error::Domain(format!("euler step needs positive starting sigma, got {sigma_s}")));
    }
    if sigma_s == sigma_t {
        return Ok(x_s.clone());
    }
    let step = sigma_t - sigma_s;
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            out[[i, j]] = x_s[[i, j]] + step * (x_s[[i, j]] - d[[i, j]]) / sigma_s;
        }
    }
    Ok(out)
}

/// Heun (trapezoid) step for the edm ODE: the slope is re-evaluated at the
/// Euler endpoint, so a second denoiser call is needed; `denoise` supplies
/// it. Falls back to plain Euler when sigma_t = 0, where the slope is not
/// defined.
pub fn edm_heun_step<F>(
    x_s: &Matrix,
    sigma_s: f64,
    sigma_t: f64,
    d_s: &Matrix,
    mut denoise: F,
) -> Result<Matrix>
where
    F: FnMut(&Matrix, f64) -> Result<Matrix>,
{
    same_shape("edm_heun_step", x_s, d_s)?;
    if !(sigma_s > 0.0) {
        return Err(Error::Domain(format!("heun step needs positive starting sigma, got {sigma_s}")));
    }
    if sigma_s == sigma_t {
        return Ok(x_s.clone());
    }
    let step = sigma_t - sigma_s;
    let mut euler = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            euler[[i, j]] = x_s[[i, j]] + step * (x_s[[i, j]] - d_s[[i, j]]) / sigma_s;
        }
    }
    if sigma_t == 0.0 {
        return Ok(euler);
    }
    let d_e = denoise(&euler, sigma_t)?;
    same_shape("edm_heun_step endpoint", x_s, &d_e)?;
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            let slope_s = (x_s[[i, j]] - d_s[[i, j]]) / sigma_s;
            let slope_e = (euler[[i, j]] - d_e[[i, j]]) / sigma_t;
            out[[i, j]] = x_s[[i, j]] + step * 0.5 * (slope_s + slope_e);
        }
    }
    Ok(out)
}

/// Euler step for the rectified-flow ODE: x_t = x_s + (s - t) v_hat where
/// v_hat predicts x0 - x1. Stepping toward t = 0 moves along +v.
pub fn rf_euler_step(x_s: &Matrix, s: f64, t: f64, v_hat: &Matrix) -> Result<Matrix> {
    same_shape("rf_euler_step", x_s, v_hat)?;
    let step = s - t;
    let mut out = Matrix::zeros(x_s.dim());
    for i in 0..x_s.nrows() {
        for j in 0..x_s.ncols() {
            out[[i, j]] = x_s[[i, j]] + step * v_hat[[i, j]];
        }
    }
    Ok(out)
}

/// One generation call: solver, step count, temperature for the stochastic
/// solvers, batch size, optional clamp applied to data-space predictions,
/// optional grid-spacing override, and the seed that makes the call
/// reproducible end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub solver: SolverKind,
    pub n_steps: usize,
    pub batch: usize,
    pub temperature: f64,
    pub clip: Option<(f64, f64)>,
    pub spacing: Option<GridSpacing>,
    pub seed: u64,
}

impl SampleConfig {
    pub fn new(solver: SolverKind, n_steps: usize) -> Self {
        SampleConfig {
            solver,
            n_steps,
            batch: 1,
            temperature: 1.0,
            clip: None,
            spacing: None,
            seed: 0,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_clip(mut self, lo: f64, hi: f64) -> Self {
        self.clip = Some((lo, hi));
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule, model_kind: PredictionKind) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.n_steps < self.solver.min_steps() {
            return Err(Error::Config(format!(
                "{} needs at least {} steps, got {}",
                self.solver.name(),
                self.solver.min_steps(),
                self.n_steps
            )));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if let Some((lo, hi)) = self.clip {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Config(format!("clip bounds ({lo}, {hi}) must be finite and ordered")));
            }
        }
        check_compat(self.solver, sched, model_kind)
    }
}

pub(crate) fn check_compat(
    solver: SolverKind,
    sched: &NoiseSchedule,
    kind: PredictionKind,
) -> Result<()> {
    if !solver.supports(sched.kind) {
        return Err(Error::Config(format!(
            "solver {} does not run on the {} schedule",
            solver.name(),
            sched.kind.name()
        )));
    }
    match (solver, kind) {
        (SolverKind::RfEuler, PredictionKind::RfVelocity) => Ok(()),
        (SolverKind::RfEuler, other) => Err(Error::Config(format!(
            "rf_euler needs a velocity model, got a {} model",
            other.name()
        ))),
        (_, PredictionKind::RfVelocity) => Err(Error::Config(format!(
            "solver {} cannot consume velocity predictions",
            solver.name()
        ))),
        _ => Ok(()),
    }
}

/// Per-step settings shared by `sample` and the sampling extensions.
#[derive(Clone, Copy)]
pub struct ChainOpts<'a> {
    pub solver: SolverKind,
    pub temperature: f64,
    pub clip: Option<(f64, f64)>,
    pub guidance: &'a Guidance,
    pub mask: Option<&'a SampleMask>,
}

fn clamp_opt(mut m: Matrix, clip: Option<(f64, f64)>) -> Matrix {
    if let Some((lo, hi)) = clip {
        m.mapv_inplace(|v| v.clamp(lo, hi));
    }
    m
}

/// Guided noise prediction at (x, s), converting from the model's native
/// parameterization when necessary.
fn predict_eps(
    model: &dyn DenoiseModel,
    x: &Matrix,
    s: f64,
    guidance: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Matrix> {
    let pred = guided_prediction(model, x, s, guidance, sched)?;
    match model.kind() {
        PredictionKind::Noise => Ok(pred),
        PredictionKind::Data | PredictionKind::EdmRaw => data_to_noise(x, s, &pred, sched),
        PredictionKind::RfVelocity => Err(Error::Config(
            "velocity predictions cannot be converted to noise".into(),
        )),
    }
}

/// Guided data prediction at (x, s); this is where the clamp applies, since
/// only data-parameterized updates consume it.
fn predict_x0(
    model: &dyn DenoiseModel,
    x: &Matrix,
    s: f64,
    guidance: &Guidance,
    sched: &NoiseSchedule,
    clip: Option<(f64, f64)>,
) -> Result<Matrix> {
    let pred = guided_prediction(model, x, s, guidance, sched)?;
    let x0 = match model.kind() {
        PredictionKind::Data | PredictionKind::EdmRaw => pred,
        PredictionKind::Noise => noise_to_data(x, s, &pred, sched)?,
        PredictionKind::RfVelocity => {
            return Err(Error::Config(
                "velocity predictions cannot be converted to data".into(),
            ))
        }
    };
    Ok(clamp_opt(x0, clip))
}

/// Advances the chain by one grid pair. `prev` carries multistep history
/// across calls and must start as None.
pub(crate) fn step_once(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    opts: &ChainOpts,
    s: f64,
    t: f64,
    x: &Matrix,
    prev: &mut Option<(f64, Matrix)>,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    match opts.solver {
        SolverKind::Ddim => {
            let eps = predict_eps(model, x, s, opts.guidance, sched)?;
            ddim_step(x, s, t, &eps, sched)
        }
        SolverKind::Ddpm => {
            let eps = predict_eps(model, x, s, opts.guidance, sched)?;
            ddpm_step(x, s, t, &eps, sched, opts.temperature, rng)
        }
        SolverKind::DpmSolver1 => {
            let eps = predict_eps(model, x, s, opts.guidance, sched)?;
            dpm_solver_1_step(x, s, t, &eps, sched)
        }
        SolverKind::SdeDpmpp1 => {
            let x0 = predict_x0(model, x, s, opts.guidance, sched, opts.clip)?;
            sde_dpmpp_1_step(x, s, t, &x0, sched, opts.temperature, rng)
        }
        SolverKind::OdeDpmpp2m => {
            let x0 = predict_x0(model, x, s, opts.guidance, sched, opts.clip)?;
            let h = sched.log_snr(t)? - sched.log_snr(s)?;
            let out = match prev.take() {
                Some((h_prev, x0_prev)) => {
                    ode_dpmpp_2m_step(x, s, t, &x0, &x0_prev, h_prev, sched)?
                }
                None => ode_dpmpp_2m_step(x, s, t, &x0, &x0, h, sched)?,
            };
            *prev = Some((h, x0));
            Ok(out)
        }
        SolverKind::EdmEuler => {
            let d = predict_x0(model, x, s, opts.guidance, sched, opts.clip)?;
            edm_euler_step(x, s, t, &d)
        }
        SolverKind::EdmHeun => {
            let d = predict_x0(model, x, s, opts.guidance, sched, opts.clip)?;
            edm_heun_step(x, s, t, &d, |xe, sigma_e| {
                predict_x0(model, xe, sigma_e, opts.guidance, sched, opts.clip)
            })
        }
        SolverKind::RfEuler => {
            let v = guided_prediction(model, x, s, opts.guidance, sched)?;
            rf_euler_step(x, s, t, &v)
        }
    }
}

/// Walks a grid from its first node to t_eps starting from `x`. The mask, if
/// present, is enforced after initialization and after every step; on the
/// edm schedule the chain ends with a terminal denoise readout. Fails with
/// the step index if the state ever leaves the finite range.
pub fn run_chain(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    grid: &TimeGrid,
    opts: &ChainOpts,
    mut x: Matrix,
    rng: &mut dyn RngCore,
) -> Result<Matrix> {
    check_compat(opts.solver, sched, model.kind())?;
    if x.ncols() != model.data_dim() {
        return Err(Error::Config(format!(
            "state dim {} does not match model dim {}",
            x.ncols(),
            model.data_dim()
        )));
    }
    if let Some(m) = opts.mask {
        x = apply_mask(&x, m, sched, grid.points()[0], m.mode, rng)?;
    }
    let mut prev: Option<(f64, Matrix)> = None;
    for (k, (s, t)) in grid.pairs().enumerate() {
        x = step_once(model, sched, opts, s, t, &x, &mut prev, rng).map_err(|e| e.with_step(k))?;
        if !mat::all_finite(&x) {
            return Err(Error::Numeric {
                step: Some(k),
                what: "sampler state became non-finite".into(),
            });
        }
        if let Some(m) = opts.mask {
            x = apply_mask(&x, m, sched, t, m.mode, rng)?;
        }
    }
    if sched.kind == ScheduleKind::Edm {
        let (_, t_last) = grid.last_pair();
        x = predict_x0(model, &x, t_last, opts.guidance, sched, opts.clip)
            .map_err(|e| e.with_step(grid.n_steps()))?;
        if !mat::all_finite(&x) {
            return Err(Error::Numeric {
                step: Some(grid.n_steps()),
                what: "terminal denoise readout became non-finite".into(),
            });
        }
        if let Some(m) = opts.mask {
            x = apply_mask(&x, m, sched, t_last, m.mode, rng)?;
        }
    }
    Ok(x)
}

/// Generates a batch. The initial state comes from `prior` when given,
/// otherwise from the schedule's terminal law (standard normal, scaled by
/// sigma_max on the edm schedule). Everything random derives from
/// `cfg.seed`, so a call is a pure function of its arguments.
pub fn sample(
    model: &dyn DenoiseModel,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
    guidance: &Guidance,
    mask: Option<&SampleMask>,
    prior: Option<&Matrix>,
) -> Result<Matrix> {
    cfg.validate(sched, model.kind())?;
    let spacing = cfg.spacing.unwrap_or_else(|| sched.default_spacing());
    let grid = sched.time_grid(cfg.n_steps, spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = model.data_dim();
    let x_init = match prior {
        Some(p) => {
            if p.ncols() != dim {
                return Err(Error::Config(format!(
                    "prior dim {} does not match model dim {dim}",
                    p.ncols()
                )));
            }
            if !mat::all_finite(p) {
                return Err(Error::Config("prior contains non-finite values".into()));
            }
            p.clone()
        }
        None => {
            let mut m = mat::randn(cfg.batch, dim, &mut rng);
            if sched.kind == ScheduleKind::Edm {
                m.mapv_inplace(|v| v * sched.sigma_max);
            }
            m
        }
    };
    let opts = ChainOpts {
        solver: cfg.solver,
        temperature: cfg.temperature,
        clip: cfg.clip,
        guidance,
        mask,
    };
    run_chain(model, sched, &grid, &opts, x_init, &mut rng)
}
