//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Optimizer hyperparameters. The defaults are the ones used for
/// fine-tuning: learning rate 5e-5, betas (0.9, 0.999), epsilon 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Slot<T: Scalar> {
    param: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam state over a fixed set of parameter tensors. Moments are kept per
/// parameter element; the step counter advances once per [`Adam::step`].
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamConfig) -> Result<Self> {
        if cfg.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let slots = params
            .iter()
            .map(|p| Slot {
                param: p.clone(),
                m: vec![T::zero(); p.numel()],
                v: vec![T::zero(); p.numel()],
            })
            .collect();
        Ok(Adam {
            cfg,
            step: 0,
            slots,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. A missing gradient is treated as zero.
    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.learning_rate);
        let eps = T::from_f64(self.cfg.epsilon);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for slot in &mut self.slots {
            let grad = slot.param.grad();
            let mut data = slot.param.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |gv| gv[i]);
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Clears gradients on every managed parameter.
    pub fn zero_grads(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }
}
