//! Adam optimizer over the Unet parameter list.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::unet::Unet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    config: AdamConfig,
    step: u64,
    first: Vec<ArrayD<F>>,
    second: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, model: &Unet<F>) -> Self {
        let zeros = |m: &Unet<F>| {
            m.parameters()
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            first: zeros(model),
            second: zeros(model),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update from the accumulated gradients.
    pub fn step(&mut self, model: &mut Unet<F>) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = F::of(learning_rate / correction1);
        let inv_c2 = F::of(1.0 / correction2);
        let (b1, b2, eps) = (F::of(beta1), F::of(beta2), F::of(eps));
        for ((p, m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    *w -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
                });
        }
        model.training_steps += 1;
    }
}

impl<F: Real> Adam<F> {
    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Moment estimates, in parameter order.
    pub fn moments(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(
        config: AdamConfig,
        step: u64,
        first: Vec<ArrayD<F>>,
        second: Vec<ArrayD<F>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }
}
