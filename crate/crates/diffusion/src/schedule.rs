//! Noise schedules: the (alpha_t, sigma_t) pair as a function of time,
//! derived quantities (SNR, drift/diffusion coefficients), the forward
//! perturbation, and reverse-process time grids.
//!
//! Four kinds are provided. `linear` and `cosine` are variance-preserving
//! (alpha^2 + sigma^2 = 1); `edm` is the variance-exploding family with
//! alpha = 1 and sigma = t; `rectified` uses the straight interpolation
//! weights (1-t, t). Everything downstream (losses, solvers) consumes only
//! this functional contract, so further schedules can be added by extending
//! this module alone.

use crate::{Error, Result};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Edm,
    Rectified,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Edm => "edm",
            ScheduleKind::Rectified => "rectified",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "edm" => Ok(ScheduleKind::Edm),
            "rectified" => Ok(ScheduleKind::Rectified),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }

    /// True for schedules with alpha^2 + sigma^2 = 1.
    pub fn is_vp(self) -> bool {
        matches!(self, ScheduleKind::Linear | ScheduleKind::Cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Linear-kind endpoints of the beta ramp.
    pub beta0: f64,
    pub beta1: f64,
    /// Cosine-kind offset.
    pub s: f64,
    /// Edm-kind sigma range; `t` ranges over sigma directly.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Integration bounds for reverse-process grids.
    pub t_eps: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Linear,
            beta0: 0.1,
            beta1: 20.0,
            s: 0.0,
            sigma_min: 0.0,
            sigma_max: 0.0,
            t_eps: 0.001,
            t_max: 1.0,
        }
    }

    pub fn linear_with(beta0: f64, beta1: f64) -> Self {
        NoiseSchedule { beta0, beta1, ..NoiseSchedule::linear() }
    }

    pub fn cosine() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
            beta0: 0.0,
            beta1: 0.0,
            s: 0.008,
            sigma_min: 0.0,
            sigma_max: 0.0,
            t_eps: 0.001,
            t_max: 0.9946,
        }
    }

    pub fn edm() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Edm,
            beta0: 0.0,
            beta1: 0.0,
            s: 0.0,
            sigma_min: 0.002,
            sigma_max: 80.0,
            t_eps: 0.002,
            t_max: 80.0,
        }
    }

    pub fn edm_with(sigma_min: f64, sigma_max: f64) -> Self {
        NoiseSchedule {
            sigma_min,
            sigma_max,
            t_eps: sigma_min,
            t_max: sigma_max,
            ..NoiseSchedule::edm()
        }
    }

    pub fn rectified() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Rectified,
            beta0: 0.0,
            beta1: 0.0,
            s: 0.0,
            sigma_min: 0.0,
            sigma_max: 0.0,
            t_eps: 0.0,
            t_max: 1.0,
        }
    }

    pub fn for_kind(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Linear => NoiseSchedule::linear(),
            ScheduleKind::Cosine => NoiseSchedule::cosine(),
            ScheduleKind::Edm => NoiseSchedule::edm(),
            ScheduleKind::Rectified => NoiseSchedule::rectified(),
        }
    }

    /// Closed-form evaluation without the domain check; numeric
    /// differentiation near the bounds needs a little overhang.
    fn alpha_sigma_raw(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::Linear => {
                let log_alpha = -(self.beta1 - self.beta0) / 4.0 * t * t - self.beta0 / 2.0 * t;
                let alpha = log_alpha.exp();
                (alpha, (1.0 - alpha * alpha).max(0.0).sqrt())
            }
            ScheduleKind::Cosine => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                let warp = |u: f64| (half_pi * (u + self.s) / (1.0 + self.s)).cos();
                let alpha = warp(t) / warp(0.0);
                (alpha, (1.0 - alpha * alpha).max(0.0).sqrt())
            }
            ScheduleKind::Edm => (1.0, t),
            ScheduleKind::Rectified => (1.0 - t, t),
        }
    }

    /// (alpha_t, sigma_t). Accepts the closed interval [0, t_max]; values
    /// below `t_eps` appear only in terminal readouts, never on grids.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !t.is_finite() || t < 0.0 || t > self.t_max * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "t = {t} outside [0, {}] for {} schedule",
                self.t_max,
                self.kind.name()
            )));
        }
        Ok(self.alpha_sigma_raw(t))
    }

    /// log(alpha_t / sigma_t), the log signal-to-noise ratio.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        let (a, s) = self.alpha_sigma(t)?;
        Ok(a.ln() - s.ln())
    }

    /// Drift and squared diffusion of the forward SDE:
    /// f = d log alpha / dt, g^2 = d sigma^2 / dt - 2 sigma^2 f.
    /// Analytic for linear and edm; centered differences (h = 1e-5) for
    /// cosine. The rectified kind has no SDE form here.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        self.alpha_sigma(t)?;
        match self.kind {
            ScheduleKind::Linear => {
                let beta = (self.beta1 - self.beta0) * t + self.beta0;
                Ok((-beta / 2.0, beta))
            }
            ScheduleKind::Cosine => {
                let h = 1e-5;
                let (a_p, s_p) = self.alpha_sigma_raw(t + h);
                let (a_m, s_m) = self.alpha_sigma_raw(t - h);
                let f = (a_p.ln() - a_m.ln()) / (2.0 * h);
                let dsigma2 = (s_p * s_p - s_m * s_m) / (2.0 * h);
                let (_, s) = self.alpha_sigma_raw(t);
                Ok((f, dsigma2 - 2.0 * s * s * f))
            }
            ScheduleKind::Edm => Ok((0.0, 2.0 * t)),
            ScheduleKind::Rectified => Err(Error::Unsupported(
                "rectified flow has no drift/diffusion decomposition".into(),
            )),
        }
    }

    /// Forward perturbation x_t = alpha_t x0 + sigma_t noise.
    pub fn perturb(&self, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        let (a, s) = self.alpha_sigma(t)?;
        assert_eq!(x0.len(), noise.len(), "x0 and noise lengths differ");
        Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + s * n).collect())
    }

    /// Perturbs a point with freshly drawn standard Gaussian noise,
    /// returning (x_t, noise).
    pub fn perturb_rand(&self, x0: &[f64], t: f64, rng: &mut dyn RngCore) -> Result<(Vec<f64>, Vec<f64>)> {
        let noise: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(&mut *rng)).collect();
        Ok((self.perturb(x0, t, &noise)?, noise))
    }

    /// Reverse-process grid of `n_steps + 1` points from t_max down to t_eps.
    pub fn time_grid(&self, n_steps: usize, spacing: GridSpacing) -> Result<TimeGrid> {
        self.time_grid_over(self.t_max, n_steps, spacing)
    }

    /// Grid over [t_eps, hi] for partial chains (warm starts).
    pub fn time_grid_over(&self, hi: f64, n_steps: usize, spacing: GridSpacing) -> Result<TimeGrid> {
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if hi <= self.t_eps || hi > self.t_max * (1.0 + 1e-12) {
            return Err(Error::Grid(format!(
                "grid upper bound {hi} outside ({}, {}]",
                self.t_eps, self.t_max
            )));
        }
        let mut points = Vec::with_capacity(n_steps + 1);
        match spacing {
            GridSpacing::UniformT => {
                for i in 0..=n_steps {
                    let frac = i as f64 / n_steps as f64;
                    points.push(hi + frac * (self.t_eps - hi));
                }
            }
            GridSpacing::PowerSigma { rho } => {
                if self.kind != ScheduleKind::Edm {
                    return Err(Error::Config(
                        "power-sigma spacing applies to the edm schedule only".into(),
                    ));
                }
                if rho <= 0.0 {
                    return Err(Error::Config(format!("power-sigma exponent must be positive, got {rho}")));
                }
                let inv = 1.0 / rho;
                let (top, bot) = (hi.powf(inv), self.t_eps.powf(inv));
                for i in 0..=n_steps {
                    let frac = i as f64 / n_steps as f64;
                    points.push((top + frac * (bot - top)).powf(rho));
                }
            }
        }
        points[0] = hi;
        points[n_steps] = self.t_eps;
        for w in points.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Grid(format!("grid not strictly decreasing: {} then {}", w[0], w[1])));
            }
        }
        Ok(TimeGrid { points, spacing })
    }

    /// Spacing used when the caller does not pick one.
    pub fn default_spacing(&self) -> GridSpacing {
        match self.kind {
            ScheduleKind::Edm => GridSpacing::PowerSigma { rho: 7.0 },
            _ => GridSpacing::UniformT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridSpacing {
    UniformT,
    PowerSigma { rho: f64 },
}

/// Strictly decreasing timesteps from t_max (or a warm-start level) down to
/// t_eps; solvers walk consecutive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    pub spacing: GridSpacing,
}

impl TimeGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Consecutive (s, t) pairs, s > t.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn last_pair(&self) -> (f64, f64) {
        let n = self.points.len();
        (self.points[n - 2], self.points[n - 1])
    }
}
