//! Learned components shared by the value-based agents: a double Q critic
//! with lagged targets, an expectile-regression state-value network, and an
//! inverse-dynamics action recoverer.

use rand::RngCore;

use dmtk_nn::optim::{adam_step, AdamConfig, AdamState};
use dmtk_nn::{backprop_trace, mlp_forward, mlp_forward_trace, Activation, Matrix, MlpSpec, ParamSet};

use crate::{Error, Result};

/// Forward passes here never use dropout, so they must not draw randomness.
pub(crate) struct EvalRng;

impl RngCore for EvalRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval forward must not draw randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval forward must not draw randomness")
    }
    fn fill_bytes(&mut self, _dest: &mut [u8]) {
        unreachable!("eval forward must not draw randomness")
    }
}

fn scalar_net(input_dim: usize, hidden: &[usize]) -> MlpSpec {
    let mut spec = MlpSpec::plain(input_dim, hidden, 1);
    spec.activation = Activation::Silu;
    spec
}

fn forward_scalar(spec: &MlpSpec, params: &ParamSet, input: &Matrix) -> Result<Vec<f64>> {
    let out = mlp_forward(spec, params, input, false, &mut EvalRng)?;
    Ok(out.column(0).to_vec())
}

/// Rows [s | a] for critic inputs.
pub fn concat_rows(s: &Matrix, a: &Matrix) -> Matrix {
    assert_eq!(s.nrows(), a.nrows(), "state and action row counts differ");
    let mut out = Matrix::zeros((s.nrows(), s.ncols() + a.ncols()));
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            out[[i, j]] = s[[i, j]];
        }
        for j in 0..a.ncols() {
            out[[i, s.ncols() + j]] = a[[i, j]];
        }
    }
    out
}

/// Double Q networks with lagged target copies. Bellman targets always use
/// the minimum of the two target networks; the live pair trains on a shared
/// regression target and the targets follow by exponential averaging.
#[derive(Clone)]
pub struct QCritic {
    spec: MlpSpec,
    q1: ParamSet,
    q2: ParamSet,
    t1: ParamSet,
    t2: ParamSet,
    adam1: AdamState,
    adam2: AdamState,
    pub gamma: f64,
    pub target_rate: f64,
}

impl QCritic {
    pub fn new(
        state_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        gamma: f64,
        target_rate: f64,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
        }
        if !(target_rate > 0.0 && target_rate <= 1.0) {
            return Err(Error::Config(format!("target rate {target_rate} outside (0, 1]")));
        }
        let spec = scalar_net(state_dim + act_dim, hidden);
        let q1 = spec.init(seed);
        let q2 = spec.init(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        let t1 = q1.clone();
        let t2 = q2.clone();
        let adam1 = AdamState::new(q1.total_len(), AdamConfig::with_lr(lr));
        let adam2 = AdamState::new(q2.total_len(), AdamConfig::with_lr(lr));
        Ok(QCritic { spec, q1, q2, t1, t2, adam1, adam2, gamma, target_rate })
    }

    pub fn q1_values(&self, sa: &Matrix) -> Result<Vec<f64>> {
        forward_scalar(&self.spec, &self.q1, sa)
    }

    pub fn min_live(&self, sa: &Matrix) -> Result<Vec<f64>> {
        let a = forward_scalar(&self.spec, &self.q1, sa)?;
        let b = forward_scalar(&self.spec, &self.q2, sa)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn min_target(&self, sa: &Matrix) -> Result<Vec<f64>> {
        let a = forward_scalar(&self.spec, &self.t1, sa)?;
        let b = forward_scalar(&self.spec, &self.t2, sa)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect())
    }

    /// Mean over the batch of the summed squared Bellman residuals of both
    /// live networks, with its parameter gradients.
    pub fn bellman_loss_grads(&self, sa: &Matrix, y: &[f64]) -> Result<(f64, ParamSet, ParamSet)> {
        if y.len() != sa.nrows() {
            return Err(Error::Argument(format!("{} targets for {} rows", y.len(), sa.nrows())));
        }
        let b = sa.nrows() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for params in [&self.q1, &self.q2] {
            let (out, trace) = mlp_forward_trace(&self.spec, params, sa, false, &mut EvalRng)?;
            let mut upstream = Matrix::zeros((sa.nrows(), 1));
            for i in 0..sa.nrows() {
                let d = out[[i, 0]] - y[i];
                loss += d * d / b;
                upstream[[i, 0]] = 2.0 * d / b;
            }
            let (g, _) = backprop_trace(&self.spec, params, &trace, &upstream)?;
            grads.push(g);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite critic loss {loss}")));
        }
        let g2 = grads.pop().unwrap();
        let g1 = grads.pop().unwrap();
        Ok((loss, g1, g2))
    }

    /// One regression step of both live networks toward `y`.
    pub fn update(&mut self, sa: &Matrix, y: &[f64]) -> Result<f64> {
        let (loss, g1, g2) = self.bellman_loss_grads(sa, y)?;
        adam_step(&mut self.adam1, &mut self.q1, &g1)?;
        adam_step(&mut self.adam2, &mut self.q2, &g2)?;
        Ok(loss)
    }

    pub fn soft_update_targets(&mut self) {
        let rate = self.target_rate;
        for (t, q) in [(&mut self.t1, &self.q1), (&mut self.t2, &self.q2)] {
            for (tv, qv) in t.iter_values_mut().zip(q.iter_values()) {
                *tv += rate * (qv - *tv);
            }
        }
    }

    /// Gradient of sum_i upstream_i * Q1(row_i) with respect to the inputs.
    pub fn q1_input_grads(&self, sa: &Matrix, upstream: &[f64]) -> Result<Matrix> {
        if upstream.len() != sa.nrows() {
            return Err(Error::Argument(format!(
                "{} upstream values for {} rows",
                upstream.len(),
                sa.nrows()
            )));
        }
        let (_, trace) = mlp_forward_trace(&self.spec, &self.q1, sa, false, &mut EvalRng)?;
        let mut up = Matrix::zeros((sa.nrows(), 1));
        for (i, u) in upstream.iter().enumerate() {
            up[[i, 0]] = *u;
        }
        let (_, input_grads) = backprop_trace(&self.spec, &self.q1, &trace, &up)?;
        Ok(input_grads)
    }
}

/// Expectile weight |tau - 1(u < 0)| doubled, the derivative magnitude of
/// the expectile loss; also the IDQL candidate weight.
pub fn expectile_weight(tau: f64, u: f64) -> f64 {
    if u > 0.0 {
        2.0 * tau
    } else {
        2.0 * (1.0 - tau)
    }
}

/// State-value network trained by expectile regression toward Q targets.
#[derive(Clone)]
pub struct ValueNet {
    spec: MlpSpec,
    pub params: ParamSet,
    adam: AdamState,
    pub tau: f64,
}

impl ValueNet {
    pub fn new(state_dim: usize, hidden: &[usize], tau: f64, lr: f64, seed: u64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("expectile {tau} outside (0, 1)")));
        }
        let spec = scalar_net(state_dim, hidden);
        let params = spec.init(seed);
        let adam = AdamState::new(params.total_len(), AdamConfig::with_lr(lr));
        Ok(ValueNet { spec, params, adam, tau })
    }

    pub fn values(&self, s: &Matrix) -> Result<Vec<f64>> {
        forward_scalar(&self.spec, &self.params, s)
    }

    /// L = mean_i |tau - 1(u_i < 0)| u_i^2 with u = q - V(s).
    pub fn expectile_loss_grads(&self, s: &Matrix, q: &[f64]) -> Result<(f64, ParamSet)> {
        if q.len() != s.nrows() {
            return Err(Error::Argument(format!("{} targets for {} rows", q.len(), s.nrows())));
        }
        let b = s.nrows() as f64;
        let (out, trace) = mlp_forward_trace(&self.spec, &self.params, s, false, &mut EvalRng)?;
        let mut loss = 0.0;
        let mut upstream = Matrix::zeros((s.nrows(), 1));
        for i in 0..s.nrows() {
            let u = q[i] - out[[i, 0]];
            let w = expectile_weight(self.tau, u) / 2.0;
            loss += w * u * u / b;
            upstream[[i, 0]] = -2.0 * w * u / b;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite expectile loss {loss}")));
        }
        let (grads, _) = backprop_trace(&self.spec, &self.params, &trace, &upstream)?;
        Ok((loss, grads))
    }

    pub fn update(&mut self, s: &Matrix, q: &[f64]) -> Result<f64> {
        let (loss, grads) = self.expectile_loss_grads(s, q)?;
        adam_step(&mut self.adam, &mut self.params, &grads)?;
        Ok(loss)
    }
}

/// MLP from (s, s') to the action that caused the move, with the output
/// clamped to the action bounds it was constructed with.
#[derive(Clone)]
pub struct InverseDynamics {
    spec: MlpSpec,
    params: ParamSet,
    adam: AdamState,
    act_dim: usize,
    bound: f64,
}

impl InverseDynamics {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], bound: f64, lr: f64, seed: u64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::Config(format!("action bound {bound} must be positive")));
        }
        let mut spec = MlpSpec::plain(2 * obs_dim, hidden, act_dim);
        spec.activation = Activation::Silu;
        let params = spec.init(seed);
        let adam = AdamState::new(params.total_len(), AdamConfig::with_lr(lr));
        Ok(InverseDynamics { spec, params, adam, act_dim, bound })
    }

    pub fn predict(&self, s: &Matrix, s_next: &Matrix) -> Result<Matrix> {
        let input = concat_rows(s, s_next);
        let mut out = mlp_forward(&self.spec, &self.params, &input, false, &mut EvalRng)?;
        out.mapv_inplace(|v| v.clamp(-self.bound, self.bound));
        Ok(out)
    }

    /// Minibatch regression on (s, s') -> a pairs; returns the loss trace.
    pub fn train(
        &mut self,
        s: &Matrix,
        s_next: &Matrix,
        a: &Matrix,
        steps: usize,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<f64>> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if s.nrows() == 0 {
            return Err(Error::Config("cannot train inverse dynamics on no pairs".into()));
        }
        if a.ncols() != self.act_dim {
            return Err(Error::Config(format!(
                "action dim {} does not match model dim {}",
                a.ncols(),
                self.act_dim
            )));
        }
        let input = concat_rows(s, s_next);
        let n = input.nrows();
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut bx = Matrix::zeros((batch, input.ncols()));
            let mut by = Matrix::zeros((batch, a.ncols()));
            for r in 0..batch {
                let i = (rng.next_u64() % n as u64) as usize;
                bx.row_mut(r).assign(&input.row(i));
                by.row_mut(r).assign(&a.row(i));
            }
            let (out, fwd) = mlp_forward_trace(&self.spec, &self.params, &bx, false, &mut EvalRng)?;
            let (loss, upstream) = dmtk_diffusion::weighted_mse(&out, &by, None);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite inverse-dynamics loss {loss}")));
            }
            let (grads, _) = backprop_trace(&self.spec, &self.params, &fwd, &upstream)?;
            adam_step(&mut self.adam, &mut self.params, &grads)?;
            trace.push(loss);
        }
        Ok(trace)
    }
}
