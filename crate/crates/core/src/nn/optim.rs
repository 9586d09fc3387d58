use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::real::Real;
use crate::error::{Error, Result};

/// Minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Linear ramp from `lr / warmup_steps` to `lr` over the first steps.
    pub warmup_steps: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_seed: u64,
    pub order_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            lr_milestones: vec![6, 8],
            lr_decay: 0.2,
            warmup_steps: 100,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            init_seed: 0,
            order_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::invalid("lr_decay must be > 0"));
        }
        Ok(())
    }

    /// Learning rate at a global step, given the number of steps per epoch.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let epoch = step / steps_per_epoch.max(1);
        let decays = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        let mut lr = self.lr * self.lr_decay.powi(decays as i32);
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr
    }
}

/// Classical momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Gradients<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(net: &Network<T>, momentum: f64) -> Self {
        Sgd {
            momentum: T::from_f64(momentum),
            velocity: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != self.velocity.layers.len() {
            return Err(Error::invalid("gradient does not match the network's layers"));
        }
        let lr = T::from_f64(lr);
        let mu = self.momentum;
        for ((conv, g), v) in net
            .convs_mut()
            .zip(&grads.layers)
            .zip(self.velocity.layers.iter_mut())
        {
            if g.weight.len() != conv.weight.len() || g.bias.len() != conv.bias.len() {
                return Err(Error::invalid("gradient shape does not match the network"));
            }
            for ((w, &g), v) in conv.weight.iter_mut().zip(&g.weight).zip(v.weight.iter_mut()) {
                *v = mu * *v + g;
                *w = *w - lr * *v;
            }
            for ((b, &g), v) in conv.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
                *v = mu * *v + g;
                *b = *b - lr * *v;
            }
        }
        Ok(())
    }
}

/// One momentum step with the scheduled learning rate for `step_index`.
pub fn sgd_step<T: Real>(
    net: &mut Network<T>,
    opt: &mut Sgd<T>,
    grads: &Gradients<T>,
    config: &TrainConfig,
    step_index: usize,
    steps_per_epoch: usize,
) -> Result<()> {
    opt.step(net, grads, config.lr_at(step_index, steps_per_epoch))
}
