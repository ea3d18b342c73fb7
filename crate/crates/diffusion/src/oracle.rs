//! Analytic reference models for testing solvers without training: exact
//! predictions for isotropic Gaussian data and for a point mass, plus the
//! closed-form probability-flow endpoint map for the Gaussian case.
//!
//! For data x0 ~ N(mu, var*I) perturbed to x_t = alpha*x0 + sigma*eps, the
//! posterior over (x0, eps) given x_t is Gaussian, so the optimal prediction
//! of every kind has a closed form. Solvers driven by these predictions
//! must reproduce the data law up to discretization error, which pins their
//! update rules far harder than any trained network could.

use dmtk_nn::Matrix;

use crate::model::{CondBatch, DenoiseModel};
use crate::prediction::PredictionKind;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Exact predictor for isotropic Gaussian data N(mu, var*I).
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub mu: Vec<f64>,
    pub var: f64,
    pub kind: PredictionKind,
    pub sched: NoiseSchedule,
}

impl GaussianOracle {
    pub fn new(mu: Vec<f64>, var: f64, kind: PredictionKind, sched: NoiseSchedule) -> Self {
        assert!(var > 0.0 && var.is_finite(), "variance must be positive, got {var}");
        GaussianOracle { mu, var, kind, sched }
    }
}

impl DenoiseModel for GaussianOracle {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn data_dim(&self) -> usize {
        self.mu.len()
    }

    fn predict(&self, x: &Matrix, t: f64, _cond: &CondBatch) -> Result<Matrix> {
        if x.ncols() != self.mu.len() {
            return Err(Error::Config(format!(
                "oracle dim {} vs input dim {}",
                self.mu.len(),
                x.ncols()
            )));
        }
        let s2 = self.var;
        let mut out = Matrix::zeros(x.dim());
        match self.kind {
            // eps*(x, t) = sigma * (x - alpha*mu) / (alpha^2 s^2 + sigma^2)
            PredictionKind::Noise => {
                let (a, s) = self.sched.alpha_sigma(t)?;
                let denom = a * a * s2 + s * s;
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = s * (x[[i, j]] - a * self.mu[j]) / denom;
                    }
                }
            }
            // E[x0 | x_t] = mu + alpha s^2 (x - alpha*mu) / (alpha^2 s^2 + sigma^2)
            PredictionKind::Data => {
                let (a, s) = self.sched.alpha_sigma(t)?;
                let denom = a * a * s2 + s * s;
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = self.mu[j] + a * s2 * (x[[i, j]] - a * self.mu[j]) / denom;
                    }
                }
            }
            // D*(x; sigma) = (s^2 x + sigma^2 mu) / (s^2 + sigma^2), the
            // alpha = 1 specialization of the posterior mean.
            PredictionKind::EdmRaw => {
                let sigma = t;
                let denom = s2 + sigma * sigma;
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = (s2 * x[[i, j]] + sigma * sigma * self.mu[j]) / denom;
                    }
                }
            }
            // v*(x, t) = E[x0 - x1 | x_t] with x_t = (1-t) x0 + t x1.
            PredictionKind::RfVelocity => {
                let (a, b) = (1.0 - t, t);
                let denom = a * a * s2 + b * b;
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] =
                            self.mu[j] + (a * s2 - b) * (x[[i, j]] - a * self.mu[j]) / denom;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Exact predictor for a point mass at `c` (data = delta_c).
#[derive(Debug, Clone)]
pub struct PointMassOracle {
    pub c: Vec<f64>,
    pub kind: PredictionKind,
    pub sched: NoiseSchedule,
}

impl PointMassOracle {
    pub fn new(c: Vec<f64>, kind: PredictionKind, sched: NoiseSchedule) -> Self {
        PointMassOracle { c, kind, sched }
    }
}

impl DenoiseModel for PointMassOracle {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn data_dim(&self) -> usize {
        self.c.len()
    }

    fn predict(&self, x: &Matrix, t: f64, _cond: &CondBatch) -> Result<Matrix> {
        if x.ncols() != self.c.len() {
            return Err(Error::Config(format!(
                "oracle dim {} vs input dim {}",
                self.c.len(),
                x.ncols()
            )));
        }
        let mut out = Matrix::zeros(x.dim());
        match self.kind {
            // eps* = (x - alpha*c) / sigma
            PredictionKind::Noise => {
                let (a, s) = self.sched.alpha_sigma(t)?;
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = (x[[i, j]] - a * self.c[j]) / s;
                    }
                }
            }
            PredictionKind::Data | PredictionKind::EdmRaw => {
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = self.c[j];
                    }
                }
            }
            // v* = (c - x) / t, clamped away from the t = 0 blow-up.
            PredictionKind::RfVelocity => {
                let tt = t.max(1e-3);
                for i in 0..x.nrows() {
                    for j in 0..x.ncols() {
                        out[[i, j]] = (self.c[j] - x[[i, j]]) / tt;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Exact probability-flow endpoint for Gaussian data: the deterministic
/// reverse ODE maps x at time `from` to time `to` by preserving the
/// standardized coordinate, x(t) = alpha_t mu + (c_t / c_from)(x - m_from)
/// with c_t^2 = alpha_t^2 var + sigma_t^2. Holds for the VP, edm, and
/// rectified families alike, which the schedule tests verify against the
/// drift/diffusion definition.
pub fn gaussian_ode_endpoint(
    sched: &NoiseSchedule,
    mu: &[f64],
    var: f64,
    x_from: &Matrix,
    from: f64,
    to: f64,
) -> Result<Matrix> {
    let (a_f, s_f) = sched.alpha_sigma(from)?;
    let (a_t, s_t) = sched.alpha_sigma(to)?;
    let c_f = (a_f * a_f * var + s_f * s_f).sqrt();
    let c_t = (a_t * a_t * var + s_t * s_t).sqrt();
    let mut out = Matrix::zeros(x_from.dim());
    for i in 0..x_from.nrows() {
        for j in 0..x_from.ncols() {
            out[[i, j]] = a_t * mu[j] + (c_t / c_f) * (x_from[[i, j]] - a_f * mu[j]);
        }
    }
    Ok(out)
}

/// Energy distance between two samples: 2 E|A - B| - E|A - A'| - E|B - B'|
/// with Euclidean norms. Nonnegative, zero iff the distributions match, and
/// usable as a sample-quality score against a reference set.
pub fn energy_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Domain(format!(
            "samples have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Domain("energy distance needs nonempty samples".into()));
    }
    let dist = |x: &Matrix, i: usize, y: &Matrix, j: usize| -> f64 {
        (0..x.ncols()).map(|c| (x[[i, c]] - y[[j, c]]).powi(2)).sum::<f64>().sqrt()
    };
    let mean_pairwise = |x: &Matrix, y: &Matrix| -> f64 {
        let mut total = 0.0;
        for i in 0..x.nrows() {
            for j in 0..y.nrows() {
                total += dist(x, i, y, j);
            }
        }
        total / (x.nrows() * y.nrows()) as f64
    };
    Ok(2.0 * mean_pairwise(a, b) - mean_pairwise(a, a) - mean_pairwise(b, b))
}
