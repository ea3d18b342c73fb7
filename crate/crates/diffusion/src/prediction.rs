//! Parameterization switching. A trained network predicts one of four
//! quantities; the conversions here let any variance-preserving solver
//! consume either a noise- or data-prediction model without retraining.

use crate::schedule::NoiseSchedule;
use crate::Result;
use dmtk_nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionKind {
    /// epsilon-hat: the noise that was mixed into x_t.
    Noise,
    /// x0-hat: the clean data point.
    Data,
    /// The preconditioned denoiser D(x; sigma) of the edm family.
    EdmRaw,
    /// The rectified-flow velocity pointing from noise toward data.
    RfVelocity,
}

impl PredictionKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictionKind::Noise => "noise",
            PredictionKind::Data => "data",
            PredictionKind::EdmRaw => "edm",
            PredictionKind::RfVelocity => "rf-velocity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(PredictionKind::Noise),
            "data" => Some(PredictionKind::Data),
            "edm" => Some(PredictionKind::EdmRaw),
            "rf-velocity" => Some(PredictionKind::RfVelocity),
            _ => None,
        }
    }
}

/// x0-hat = (x_t - sigma_t * eps-hat) / alpha_t, rowwise over a batch.
pub fn noise_to_data(x_t: &Matrix, t: f64, eps_hat: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    let (a, s) = sched.alpha_sigma(t)?;
    Ok((x_t - &(eps_hat * s)) / a)
}

/// eps-hat = (x_t - alpha_t * x0-hat) / sigma_t, rowwise over a batch.
pub fn data_to_noise(x_t: &Matrix, t: f64, x0_hat: &Matrix, sched: &NoiseSchedule) -> Result<Matrix> {
    let (a, s) = sched.alpha_sigma(t)?;
    Ok((x_t - &(x0_hat * a)) / s)
}

/// Preconditioning scale for the edm denoiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmPrecond {
    pub sigma_data: f64,
}

impl EdmPrecond {
    pub fn new(sigma_data: f64) -> Self {
        assert!(
            sigma_data.is_finite() && sigma_data > 0.0,
            "sigma_data must be positive and finite, got {sigma_data}"
        );
        EdmPrecond { sigma_data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
    /// Loss weight lambda(sigma).
    pub weight: f64,
}

/// The edm preconditioning coefficients at noise level sigma.
pub fn edm_coeffs(sigma: f64, pre: &EdmPrecond) -> EdmCoeffs {
    let sd2 = pre.sigma_data * pre.sigma_data;
    let s2 = sigma * sigma;
    let denom = sd2 + s2;
    EdmCoeffs {
        c_skip: sd2 / denom,
        c_out: sigma * pre.sigma_data / denom.sqrt(),
        c_in: 1.0 / denom.sqrt(),
        c_noise: sigma.ln() / 4.0,
        weight: denom / (pre.sigma_data * sigma).powi(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dmtk_nn::mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noise_to_data_recovers_x0_from_true_noise() {
        let sched = NoiseSchedule::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = mat::randn(4, 3, &mut rng);
        let eps = mat::randn(4, 3, &mut rng);
        let t = 0.37;
        let (a, s) = sched.alpha_sigma(t).unwrap();
        let x_t = &x0 * a + &eps * s;
        let rec = noise_to_data(&x_t, t, &eps, &sched).unwrap();
        for (r, x) in rec.iter().zip(x0.iter()) {
            assert!((r - x).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_prediction_rescales_state() {
        let sched = NoiseSchedule::linear();
        let x_t = mat::from_flat(1, 2, vec![0.5, -0.5]);
        let zero = Matrix::zeros((1, 2));
        let t = 0.8;
        let (a, _) = sched.alpha_sigma(t).unwrap();
        let rec = noise_to_data(&x_t, t, &zero, &sched).unwrap();
        assert_eq!(rec[[0, 0]], 0.5 / a);
        assert_eq!(rec[[0, 1]], -0.5 / a);
    }

    #[test]
    fn conversion_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sched in [NoiseSchedule::linear(), NoiseSchedule::cosine()] {
            for &t in &[0.05, 0.4, 0.9] {
                let x_t = mat::randn(3, 4, &mut rng);
                let eps = mat::randn(3, 4, &mut rng);
                let x0 = noise_to_data(&x_t, t, &eps, &sched).unwrap();
                let back = data_to_noise(&x_t, t, &x0, &sched).unwrap();
                for (a, b) in back.iter().zip(eps.iter()) {
                    assert!((a - b).abs() < 1e-10);
                }
                // Reconstruction identity x_t = alpha x0 + sigma eps.
                let (al, si) = sched.alpha_sigma(t).unwrap();
                let rebuilt = &x0 * al + &back * si;
                for (a, b) in rebuilt.iter().zip(x_t.iter()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn edm_coeffs_at_sigma_data() {
        let pre = EdmPrecond::new(0.5);
        let c = edm_coeffs(0.5, &pre);
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 1.0 / (0.5 * 2f64.sqrt())).abs() < 1e-15);
        assert!((c.weight - 2.0 / 0.25).abs() < 1e-12);
    }

    #[test]
    fn edm_coeffs_low_noise_limit() {
        let pre = EdmPrecond::new(0.5);
        let c = edm_coeffs(1e-9, &pre);
        assert!((c.c_skip - 1.0).abs() < 1e-12);
        assert!(c.c_out < 1e-8);
    }

    #[test]
    fn edm_coeffs_direct_evaluation_at_high_sigma() {
        let pre = EdmPrecond::new(0.5);
        let c = edm_coeffs(80.0, &pre);
        let denom = 0.25 + 6400.0;
        assert!((c.c_skip - 0.25 / denom).abs() < 1e-15);
        assert!((c.c_out - 80.0 * 0.5 / denom.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 1.0 / denom.sqrt()).abs() < 1e-15);
        assert!((c.c_noise - 80f64.ln() / 4.0).abs() < 1e-15);
        assert!((c.weight - denom / (0.5 * 80.0_f64).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn edm_c_in_normalizes_input_variance() {
        let pre = EdmPrecond::new(1.3);
        for &sigma in &[0.002, 0.1, 1.0, 25.0, 80.0] {
            let c = edm_coeffs(sigma, &pre);
            let v = c.c_in * c.c_in * (pre.sigma_data * pre.sigma_data + sigma * sigma);
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
