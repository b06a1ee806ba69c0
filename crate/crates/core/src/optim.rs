//! Adam with an epoch-indexed step learning-rate schedule.

use crate::encoder::{EncoderGrads, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.1,
            decay_every: 1000,
        }
    }
}

impl AdamConfig {
    /// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
    pub fn lr_at(&self, epoch: u64) -> f64 {
        let drops = epoch / self.decay_every.max(1);
        self.base_lr * self.decay_factor.powi(drops.min(i32::MAX as u64) as i32)
    }
}

/// Moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        AdamState {
            config,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &EncoderParams) -> Self {
        Self::new(config, params.n_params())
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.config.lr_at(epoch)
    }

    /// One bias-corrected Adam update over flat parameter and gradient views.
    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[f64], epoch: u64) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != self.first_moment.len() || grads.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.first_moment.len(),
                total,
                grads.len()
            )));
        }
        let c = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr_at(epoch);
        let mut idx = 0;
        for p in params.iter_mut() {
            for v in p.iter_mut() {
                let g = grads[idx];
                let m = &mut self.first_moment[idx];
                let s = &mut self.second_moment[idx];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *s = c.beta2 * *s + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let s_hat = *s / bc2;
                *v -= lr * m_hat / (s_hat.sqrt() + c.eps);
                idx += 1;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads, epoch: u64) -> Result<()> {
        let shapes_match = params.weights.len() == grads.weights.len()
            && params.weights.iter().zip(&grads.weights).all(|(p, g)| p.rows() == g.rows() && p.cols() == g.cols())
            && params.biases.iter().zip(&grads.biases).all(|(p, g)| p.len() == g.len());
        if !shapes_match {
            return Err(Error::ShapeMismatch("gradients are not congruent with parameters".into()));
        }
        let flat = grads.flat();
        self.step_slices(&mut params.param_slices_mut(), &flat, epoch)
    }
}
