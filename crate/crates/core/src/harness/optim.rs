//! Adam with coupled L2 weight decay and a linear warm-up schedule.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Learning rate for 0-based `step`: ramps linearly to `lr` over the
    /// warm-up, then stays constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Prompt-projection biases are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.starts_with("prompt/") && name.ends_with("/bias"))
}

/// First and second moments for every trainable tensor, by store index.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let moments = || {
            store
                .iter()
                .map(|(_, p)| (!p.frozen).then(|| Tensor::zeros(p.value.shape())))
                .collect()
        };
        Adam {
            config,
            t: 0,
            m: moments(),
            v: moments(),
        }
    }

    /// One update of every trainable parameter; frozen ones are untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], step: usize) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}, {} gradients given",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.t += 1;
        let lr = c.lr_at(step);
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            let (Some(m), Some(v)) = (self.m[i].as_mut(), self.v[i].as_mut()) else {
                continue;
            };
            let wd = if decays(&param.name) { c.weight_decay } else { 0.0 };
            let values = param.value.data_mut();
            for (((x, g), mi), vi) in values
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g + wd * *x;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                *x -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
