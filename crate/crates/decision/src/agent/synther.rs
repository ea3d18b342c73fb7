//! Dataset upsampling: an unconditional denoiser over flattened transition
//! rows [s, a, r, s', terminal] generates synthetic transitions that are
//! mixed back into the real dataset.

use dmtk_diffusion::{
    sample, train, Denoiser, DenoiserConfig, Guidance, NoiseSchedule, PredictionKind,
    SampleConfig, SolverKind, TrainConfig, TrainSet,
};

use crate::data::{Normalizer, NormalizerKind, TrajectoryDataset, Transition};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntherConfig {
    /// Number of synthetic transitions to generate.
    pub m: usize,
    pub hidden: Vec<usize>,
    pub gradient_steps: usize,
    pub solver: SolverKind,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for SyntherConfig {
    fn default() -> Self {
        SyntherConfig {
            m: 10_000,
            hidden: vec![128, 128],
            gradient_steps: 2000,
            solver: SolverKind::Ddim,
            n_steps: 10,
            seed: 0,
        }
    }
}

impl SyntherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("upsampler needs at least one hidden layer".into()));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("upsampler needs at least one sampling step".into()));
        }
        Ok(())
    }
}

/// A real dataset plus generated transitions, kept separate so consumers can
/// weight or inspect them independently.
#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub real: TrajectoryDataset,
    synthetic: Vec<Transition>,
}

impl AugmentedDataset {
    pub fn synthetic(&self) -> &[Transition] {
        &self.synthetic
    }

    pub fn total_transitions(&self) -> usize {
        self.real.transition_count() + self.synthetic.len()
    }

    /// Synthetic transitions as rows [s, a, r, s', terminal].
    pub fn synthetic_matrix(&self) -> dmtk_nn::Matrix {
        let obs = self.real.obs_dim();
        let act = self.real.act_dim();
        let mut m = dmtk_nn::Matrix::zeros((self.synthetic.len(), 2 * obs + act + 2));
        for (i, t) in self.synthetic.iter().enumerate() {
            let mut j = 0;
            for v in &t.s {
                m[[i, j]] = *v;
                j += 1;
            }
            for v in &t.a {
                m[[i, j]] = *v;
                j += 1;
            }
            m[[i, j]] = t.r;
            j += 1;
            for v in &t.s_next {
                m[[i, j]] = *v;
                j += 1;
            }
            m[[i, j]] = if t.terminal { 1.0 } else { 0.0 };
        }
        m
    }
}

/// Trains a transition-level denoiser on the dataset and samples `cfg.m`
/// synthetic transitions from it. With `m == 0` the dataset passes through
/// untouched and nothing is trained.
pub fn synther_upsample(ds: &TrajectoryDataset, cfg: &SyntherConfig) -> Result<AugmentedDataset> {
    cfg.validate()?;
    if cfg.m == 0 {
        return Ok(AugmentedDataset { real: ds.clone(), synthetic: Vec::new() });
    }
    let flat = ds.flat_transitions();
    let norm = Normalizer::fit(&flat, NormalizerKind::MinMax)?;
    let x0 = norm.forward(&flat);

    let sched = NoiseSchedule::linear();
    let mut model = Denoiser::new(
        &DenoiserConfig::new(x0.ncols(), &cfg.hidden, PredictionKind::Noise, sched)
            .with_seed(cfg.seed),
    )?;
    let train_cfg = TrainConfig {
        gradient_steps: cfg.gradient_steps,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    train(&mut model, &TrainSet::unconditioned(x0), &train_cfg)?;

    let sc = SampleConfig {
        solver: cfg.solver,
        n_steps: cfg.n_steps,
        batch: cfg.m,
        temperature: 1.0,
        clip: Some((-1.0, 1.0)),
        spacing: None,
        seed: cfg.seed.wrapping_add(17),
    };
    let rows = norm.inverse(&sample(&model, &sched, &sc, &Guidance::None, None, None)?);

    let obs = ds.obs_dim();
    let act = ds.act_dim();
    let synthetic = (0..rows.nrows())
        .map(|i| {
            let row = rows.row(i);
            Transition {
                s: row.iter().take(obs).cloned().collect(),
                a: row.iter().skip(obs).take(act).cloned().collect(),
                r: row[obs + act],
                s_next: row.iter().skip(obs + act + 1).take(obs).cloned().collect(),
                terminal: row[2 * obs + act + 1] > 0.5,
            }
        })
        .collect();
    Ok(AugmentedDataset { real: ds.clone(), synthetic })
}
