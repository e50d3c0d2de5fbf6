//! SGD with momentum, decoupled weight decay, and a cosine learning-rate
//! schedule.
//!
//! The decay term is applied directly to the weights (`w -= lr * wd * w`)
//! rather than folded into the gradient, so the momentum buffer carries pure
//! gradient signal and finite-difference checks of the loss stay meaningful.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate_base: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Cosine-decayed rate at step `t` of `total_steps`:
/// `lr_base * 0.5 * (1 + cos(pi * t / total_steps))`.
pub fn cosine_lr(lr_base: f64, step_index: usize, total_steps: usize) -> f64 {
    debug_assert!(total_steps > 0);
    let frac = step_index as f64 / total_steps as f64;
    lr_base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug)]
pub struct Sgd<F> {
    cfg: OptimConfig,
    total_steps: usize,
    step_index: usize,
    velocity: Vec<Tensor<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(cfg: OptimConfig, total_steps: usize, params: &ParamStore<F>) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::invalid("sgd", "total_steps must be positive"));
        }
        let velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect::<Result<_>>()?;
        Ok(Sgd { cfg, total_steps, step_index: 0, velocity })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Rate the next `step` call will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.learning_rate_base, self.step_index, self.total_steps)
    }

    /// Apply one update. `grads` must align with the store's declaration
    /// order; a missing gradient means backward() was never run.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<&Tensor<F>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(
                "sgd",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        let lr = F::from_f64(self.current_lr());
        let mu = F::from_f64(self.cfg.momentum);
        let wd = F::from_f64(self.cfg.weight_decay);
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let grad = grad.ok_or_else(|| Error::MissingGradient {
                name: param.name.clone(),
            })?;
            if grad.shape() != param.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    lhs: param.value.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            for ((w, &g), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                *v = mu * *v + g;
                *w = *w - lr * *v - lr * wd * *w;
            }
        }
        self.step_index += 1;
        Ok(())
    }
}
