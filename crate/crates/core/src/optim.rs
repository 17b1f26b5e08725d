//! Adaptive-moment (Adam) optimizer with step-wise learning-rate decay.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays; 0 disables decay.
    pub decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptState {
    pub fn new(
        store: &ParamStore,
        learning_rate: f64,
        decay_factor: f64,
        decay_interval: usize,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(invalid!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            ));
        }
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect()
        };
        Ok(Self {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            learning_rate,
            decay_factor,
            decay_interval,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Applies one update from the gradient slots of `store`.
    ///
    /// Gradients are validated before anything is written, so a rejected
    /// step leaves both the parameters and the moments untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(invalid!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            ));
        }
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).into()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= self.learning_rate * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }

    /// Call once after each completed epoch (1-based count).
    pub fn end_epoch(&mut self, completed_epochs: usize) {
        if self.decay_interval > 0 && completed_epochs % self.decay_interval == 0 {
            self.learning_rate *= self.decay_factor;
        }
    }
}
