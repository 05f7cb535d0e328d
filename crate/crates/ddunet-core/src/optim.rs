//! Adam optimizer with bias correction, plus the per-epoch exponential
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First/second moment state per parameter, aligned with the store order.
pub struct Adam<T: Scalar> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(ADAM_BETA1),
            beta2: T::from_f64(ADAM_BETA2),
            eps: T::from_f64(ADAM_EPSILON),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64(lr);
    }

    pub fn lr(&self) -> f64 {
        self.lr.as_f64()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter in the store. Every parameter must
    /// carry a gradient.
    pub fn step(&mut self, params: &ParamStore<T>) -> Result<()> {
        let entries: Vec<_> = params.params().collect();
        if self.m.is_empty() {
            self.m = entries
                .iter()
                .map(|e| vec![T::zero(); e.tensor.elem_count()])
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != entries.len() {
            return Err(Error::contract(format!(
                "optimizer state built for {} parameters, store has {}",
                self.m.len(),
                entries.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for (i, entry) in entries.iter().enumerate() {
            let grad = entry.tensor.grad().ok_or_else(|| {
                Error::contract(format!("parameter {} has no gradient", entry.name))
            })?;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            entry.tensor.with_data_mut(|p| {
                for j in 0..p.len() {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    p[j] = p[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        Ok(())
    }
}

/// `lr0 * gamma^epoch`, applied at epoch boundaries.
pub fn lr_schedule(epoch: usize, lr0: f64, gamma: f64) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}
