//! SGD with classic momentum, weight decay folded into the gradient, and a
//! stepped learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Optimizer hyperparameters. `lr_at_epoch` applies the step schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate divides by this factor every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            decay_factor: 10.0,
            decay_period: 10,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr 0 is allowed: it makes a run a parameter-preserving no-op,
        // which the tests use as a controlled baseline
        let ok = self.initial_lr >= 0.0
            && self.initial_lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && self.decay_factor > 0.0
            && self.decay_factor.is_finite()
            && self.decay_period >= 1;
        if !ok {
            return Err(Error::BadSpec { context: format!("invalid optimizer config {self:?}") });
        }
        Ok(())
    }
}

/// Mutable optimizer state: current learning rate plus parameter-shaped
/// velocity.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub lr: f64,
    pub velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(Self { lr: config.initial_lr, velocity: params.zeros_like(), config })
    }

    /// Set the learning rate for `epoch` from the stepped schedule.
    pub fn enter_epoch(&mut self, epoch: u64) {
        self.lr = lr_at_epoch(self.config.initial_lr, epoch, self.config.decay_period, self.config.decay_factor);
    }
}

/// `initial / factor^floor(epoch / period)`; non-increasing in epoch for
/// factor >= 1.
pub fn lr_at_epoch(initial: f64, epoch: u64, period: u64, factor: f64) -> f64 {
    initial / factor.powi((epoch / period) as i32)
}

/// One SGD step: `g' = g + wd * theta; v = momentum * v + g';
/// theta = theta - lr * v`. A non-finite gradient aborts the step before
/// any state is touched.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    {
        let grad_slices = grads.tensor_slices();
        let param_slices = params.tensor_slices();
        let vel_slices = state.velocity.tensor_slices();
        if grad_slices.len() != param_slices.len()
            || vel_slices.len() != param_slices.len()
            || grad_slices.iter().zip(&param_slices).any(|(g, p)| g.len() != p.len())
            || vel_slices.iter().zip(&param_slices).any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::ShapeMismatch { context: "optimizer step shapes".into() });
        }
        if grad_slices.iter().any(|s| s.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient { context: "sgd_step".into() });
        }
    }

    let lr = state.lr;
    let momentum = state.config.momentum;
    let wd = state.config.weight_decay;
    let grad_slices = grads.tensor_slices();
    for ((p_slice, v_slice), g_slice) in params
        .tensor_slices_mut()
        .into_iter()
        .zip(state.velocity.tensor_slices_mut())
        .zip(grad_slices)
    {
        for ((p, v), g) in p_slice.iter_mut().zip(v_slice.iter_mut()).zip(g_slice.iter()) {
            let g_eff = g + wd * *p;
            *v = momentum * *v + g_eff;
            *p -= lr * *v;
        }
    }
    Ok(())
}
