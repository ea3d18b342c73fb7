//! Adam with bias correction, plus exponential-moving-average weight
//! tracking. Both operate on `ParamSet`s flattened in section (name) order,
//! so optimizer state stays aligned with checkpoints.

use crate::mlp::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..AdamConfig::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(param_len: usize, cfg: AdamConfig) -> Self {
        AdamState { cfg, m: vec![0.0; param_len], v: vec![0.0; param_len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place. Gradient sections must mirror
/// the parameter layout; any non-finite gradient aborts with a numeric
/// error before touching the parameters.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    if !params.same_layout(grads) {
        return Err(crate::dim_err("adam gradients", "parameter layout", "mismatched layout"));
    }
    if params.total_len() != state.m.len() {
        return Err(crate::dim_err("adam state", state.m.len(), params.total_len()));
    }
    if grads.iter_values().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in adam_step".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_values_mut()
        .zip(grads.iter_values())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
    Ok(())
}

/// Shadow copy of the parameters updated as
/// `shadow <- decay * shadow + (1 - decay) * params`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamSet,
}

impl EmaState {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&decay), "ema decay must lie in [0, 1], got {decay}");
        EmaState { decay, shadow: params.clone() }
    }
}

pub fn ema_update(ema: &mut EmaState, params: &ParamSet) {
    assert!(ema.shadow.same_layout(params), "ema shadow layout must match parameters");
    let d = ema.decay;
    for (s, p) in ema.shadow.iter_values_mut().zip(params.iter_values()) {
        *s = d * *s + (1.0 - d) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{MlpSpec, Section};

    fn scalar_params(v: f64) -> ParamSet {
        ParamSet::from_sections(vec![Section {
            name: "theta".into(),
            rows: 1,
            cols: 1,
            values: vec![v],
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let spec = MlpSpec::plain(2, &[4], 1);
        let mut params = spec.init(1);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(params.total_len(), AdamConfig::default());
        adam_step(&mut state, &mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn quadratic_converges_in_two_hundred_steps() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.1));
        for _ in 0..200 {
            let theta = params.sections()[0].values[0];
            let grads = scalar_params(2.0 * theta);
            adam_step(&mut state, &mut params, &grads).unwrap();
        }
        let theta = params.sections()[0].values[0];
        assert!(theta.abs() < 0.01, "after 200 steps theta = {theta}");
    }

    #[test]
    fn first_step_magnitude_equals_lr() {
        // Bias correction makes the first update lr * g / (|g| + eps), which
        // is lr in magnitude for any gradient scale well above eps.
        for &g in &[1e-6, 1.0, 1e6] {
            let mut params = scalar_params(0.0);
            let mut state = AdamState::new(1, AdamConfig::with_lr(0.05));
            adam_step(&mut state, &mut params, &scalar_params(g)).unwrap();
            let step = params.sections()[0].values[0].abs();
            let expected = 0.05 * g / (g + 1e-8);
            assert!((step - expected).abs() < 1e-15);
            assert!((step - 0.05).abs() < 1e-3, "gradient {g} gave first step {step}");
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut params = scalar_params(1.0);
        let mut state = AdamState::new(1, AdamConfig::default());
        let err = adam_step(&mut state, &mut params, &scalar_params(f64::NAN));
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(params.sections()[0].values[0], 1.0);
    }

    #[test]
    fn ema_decay_one_keeps_shadow() {
        let params = scalar_params(3.0);
        let mut ema = EmaState::new(&scalar_params(1.0), 1.0);
        ema_update(&mut ema, &params);
        assert_eq!(ema.shadow.sections()[0].values[0], 1.0);
    }

    #[test]
    fn ema_decay_zero_copies_params() {
        let params = scalar_params(3.0);
        let mut ema = EmaState::new(&scalar_params(1.0), 0.0);
        ema_update(&mut ema, &params);
        assert_eq!(ema.shadow.sections()[0].values[0], 3.0);
    }

    #[test]
    fn ema_matches_hand_recursion() {
        // decay 0.995, shadow0 = 1, params sequence 2, 3, 4.
        let mut ema = EmaState::new(&scalar_params(1.0), 0.995);
        let mut expected = 1.0;
        for p in [2.0, 3.0, 4.0] {
            ema_update(&mut ema, &scalar_params(p));
            expected = 0.995 * expected + 0.005 * p;
            let got = ema.shadow.sections()[0].values[0];
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn ema_contracts_toward_params() {
        for &decay in &[0.0, 0.3, 0.9, 0.999] {
            let params = scalar_params(2.0);
            let mut ema = EmaState::new(&scalar_params(-1.0), decay);
            let before = (ema.shadow.sections()[0].values[0] - 2.0f64).abs();
            ema_update(&mut ema, &params);
            let after = (ema.shadow.sections()[0].values[0] - 2.0f64).abs();
            assert!(after < before, "decay {decay} did not contract");
        }
    }
}
