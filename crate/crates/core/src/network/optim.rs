use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::error::{shape, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay. Moment buffers are kept
/// in parameter visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter the visitor yields.
    pub fn step<F>(&mut self, visit_params: F)
    where
        F: FnOnce(&mut dyn FnMut(&str, &mut Param<T>)),
    {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.learning_rate / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let first_step = self.first.is_empty();
        let (first, second) = (&mut self.first, &mut self.second);
        let mut idx = 0;
        visit_params(&mut |_, p| {
            if first_step {
                first.push(vec![T::zero(); p.len()]);
                second.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut first[idx], &mut second[idx]);
            assert_eq!(m.len(), p.len(), "parameter layout changed between steps");
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
            idx += 1;
        });
    }

    /// `(step, first moments, second moments)` for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<T>], &[Vec<T>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(shape("first and second moment buffers differ in layout"));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }
}
