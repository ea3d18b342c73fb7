//! Training losses for the four prediction kinds, plus the condition
//! dropout used to train classifier-free guidance.
//!
//! Every loss reduces squared error as: sum over data dimensions, mean over
//! the batch. With that reduction the all-zero noise predictor scores
//! E||eps||^2 = dim and the all-zero velocity predictor scores 2*dim, which
//! the tests pin as Monte-Carlo baselines.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use dmtk_nn::{Matrix, ParamSet};

use crate::model::{CondBatch, Condition, Denoiser};
use crate::prediction::{edm_coeffs, EdmPrecond, PredictionKind};
use crate::schedule::NoiseSchedule;
use crate::{numeric_err, Error, Result};

/// Squared-error reduction shared by all losses: per-sample sum over
/// dimensions, mean over the batch, with optional per-sample weights.
/// Returns the loss and the upstream gradient d loss / d pred.
pub fn weighted_mse(pred: &Matrix, target: &Matrix, weights: Option<&[f64]>) -> (f64, Matrix) {
    assert_eq!(pred.dim(), target.dim(), "prediction and target shapes differ");
    let b = pred.nrows() as f64;
    let mut loss = 0.0;
    let mut upstream = Matrix::zeros(pred.dim());
    for i in 0..pred.nrows() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        for j in 0..pred.ncols() {
            let d = pred[[i, j]] - target[[i, j]];
            loss += w * d * d;
            upstream[[i, j]] = 2.0 * w * d / b;
        }
    }
    (loss / b, upstream)
}

fn standard_normal(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Matrix {
    let mut m = Matrix::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    m
}

/// Regression of the network output toward `target` on pre-built noisy
/// inputs; the common trunk of the public losses and the finite-difference
/// tests. Runs in train mode against the live (non-EMA) weights.
pub fn regression_loss(
    model: &Denoiser,
    x_t: &Matrix,
    ts: &[f64],
    cond: &CondBatch,
    target: &Matrix,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParamSet)> {
    let input = model.assemble(x_t, ts, cond)?;
    let (pred, trace) = model.forward_traced(&input, true, rng)?;
    let (loss, upstream) = weighted_mse(&pred, target, None);
    if !loss.is_finite() {
        return Err(numeric_err(format!("non-finite regression loss {loss}")));
    }
    let (grads, _) = model.backward(&trace, &upstream)?;
    Ok((loss, grads))
}

/// Denoising score-matching loss: perturb x0 to a uniformly drawn time and
/// regress the noise (noise kind) or the clean point (data kind).
pub fn score_matching_loss(
    model: &Denoiser,
    x0: &Matrix,
    cond: &CondBatch,
    sched: &NoiseSchedule,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParamSet)> {
    if !matches!(model.kind(), PredictionKind::Noise | PredictionKind::Data) {
        return Err(Error::Config(format!(
            "score-matching loss needs a noise or data model, got {}",
            model.kind().name()
        )));
    }
    let (b, d) = x0.dim();
    let mut ts = Vec::with_capacity(b);
    for _ in 0..b {
        ts.push(sched.t_eps + rng.random::<f64>() * (sched.t_max - sched.t_eps));
    }
    let eps = standard_normal(b, d, rng);
    let mut x_t = Matrix::zeros((b, d));
    for i in 0..b {
        let (a, s) = sched.alpha_sigma(ts[i])?;
        for j in 0..d {
            x_t[[i, j]] = a * x0[[i, j]] + s * eps[[i, j]];
        }
    }
    let target = match model.kind() {
        PredictionKind::Noise => &eps,
        _ => x0,
    };
    regression_loss(model, &x_t, &ts, cond, target, rng)
}

/// Preconditioned edm loss: noise levels drawn log-uniformly over the
/// schedule's sigma range, squared error weighted per sample by lambda(sigma).
pub fn edm_loss(
    model: &Denoiser,
    x0: &Matrix,
    pre: &EdmPrecond,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParamSet)> {
    if model.kind() != PredictionKind::EdmRaw {
        return Err(Error::Config(format!(
            "edm loss needs an edm model, got {}",
            model.kind().name()
        )));
    }
    let sched = *model.schedule();
    let (b, d) = x0.dim();
    let (lo, hi) = (sched.sigma_min.ln(), sched.sigma_max.ln());
    let sigmas: Vec<f64> = (0..b).map(|_| (lo + rng.random::<f64>() * (hi - lo)).exp()).collect();
    let eps = standard_normal(b, d, rng);

    let coeffs: Vec<_> = sigmas.iter().map(|&s| edm_coeffs(s, pre)).collect();
    let mut noised = Matrix::zeros((b, d));
    let mut inner = Matrix::zeros((b, d));
    for i in 0..b {
        for j in 0..d {
            noised[[i, j]] = x0[[i, j]] + sigmas[i] * eps[[i, j]];
            inner[[i, j]] = coeffs[i].c_in * noised[[i, j]];
        }
    }
    let ts: Vec<f64> = coeffs.iter().map(|c| c.c_noise).collect();
    let input = model.assemble(&inner, &ts, &CondBatch::none())?;
    let (raw, trace) = model.forward_traced(&input, true, rng)?;

    let mut denoised = Matrix::zeros((b, d));
    for i in 0..b {
        for j in 0..d {
            denoised[[i, j]] = coeffs[i].c_skip * noised[[i, j]] + coeffs[i].c_out * raw[[i, j]];
        }
    }
    let weights: Vec<f64> = coeffs.iter().map(|c| c.weight).collect();
    let (loss, mut upstream) = weighted_mse(&denoised, x0, Some(&weights));
    if !loss.is_finite() {
        return Err(numeric_err(format!("non-finite edm loss {loss}")));
    }
    // Chain through D = c_skip*x + c_out*F: the network sees c_out scaling.
    for i in 0..b {
        for j in 0..d {
            upstream[[i, j]] *= coeffs[i].c_out;
        }
    }
    let (grads, _) = model.backward(&trace, &upstream)?;
    Ok((loss, grads))
}

/// Rectified-flow regression: x_t = t*x1 + (1-t)*x0 with Gaussian x1, and
/// the network regresses the straight-line velocity x0 - x1.
pub fn rf_loss(model: &Denoiser, x0: &Matrix, rng: &mut dyn RngCore) -> Result<(f64, ParamSet)> {
    if model.kind() != PredictionKind::RfVelocity {
        return Err(Error::Config(format!(
            "rf loss needs an rf-velocity model, got {}",
            model.kind().name()
        )));
    }
    let (b, d) = x0.dim();
    let ts: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let x1 = standard_normal(b, d, rng);
    let mut x_t = Matrix::zeros((b, d));
    let mut target = Matrix::zeros((b, d));
    for i in 0..b {
        for j in 0..d {
            x_t[[i, j]] = ts[i] * x1[[i, j]] + (1.0 - ts[i]) * x0[[i, j]];
            target[[i, j]] = x0[[i, j]] - x1[[i, j]];
        }
    }
    regression_loss(model, &x_t, &ts, &CondBatch::none(), &target, rng)
}

/// Condition dropout for classifier-free guidance: with probability p the
/// condition is replaced by the null token.
pub fn cfg_dropout(cond: &Condition, p: f64, rng: &mut dyn RngCore) -> Result<Condition> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    if rng.random::<f64>() < p {
        Ok(Condition::Null)
    } else {
        Ok(cond.clone())
    }
}
