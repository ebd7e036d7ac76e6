//! Adam with per-parameter moment state and bias correction.

use crate::net::ParamStore;
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub decay_per_epoch: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            decay_per_epoch: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Learning rate at a given epoch: `lr * decay^epoch`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.decay_per_epoch.powi(epoch as i32)
    }
}

/// First/second moment and step count for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<E: Element> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam<E: Element> {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn states(&self) -> &BTreeMap<String, AdamState<E>> {
        &self.states
    }

    pub fn restore_states(&mut self, states: BTreeMap<String, AdamState<E>>) {
        self.states = states;
    }

    /// Apply one update to every parameter that received a gradient.
    /// Parameters are visited in sorted name order; state is created
    /// lazily, so decoders added mid-run start with fresh moments.
    pub fn step(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        lr: f64,
    ) {
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one = E::ONE;
        let eps = E::from_f64(self.cfg.eps);
        for (name, grad) in grads {
            let Some(value) = params.get_mut(name) else {
                continue;
            };
            let state = self.states.entry(name.clone()).or_insert_with(|| AdamState {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                t: 0,
            });
            state.t += 1;
            let bc1 = E::from_f64(1.0 - self.cfg.beta1.powi(state.t as i32));
            let bc2 = E::from_f64(1.0 - self.cfg.beta2.powi(state.t as i32));
            let step_e = E::from_f64(lr);
            for ((p, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - step_e * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_on_a_quadratic_bowl_matches_closed_form() {
        // f(x) = x^2 / 2, gradient at x0 is x0.
        let cfg = AdamConfig::default();
        let mut adam: Adam<f64> = Adam::new(cfg);
        let x0 = 3.0f64;
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(x0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(x0));
        adam.step(&mut params, &grads, cfg.lr);

        let g = x0;
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expect = x0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let got = params.get("x").unwrap().item().unwrap();
        assert!((got - expect).abs() < 1e-10, "got {got}, expect {expect}");
    }

    #[test]
    fn two_steps_match_hand_rolled_recurrence() {
        let cfg = AdamConfig::default();
        let mut adam: Adam<f64> = Adam::new(cfg);
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(1.0));

        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2u32 {
            let g = x; // gradient of x^2/2
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(g));
            adam.step(&mut params, &grads, cfg.lr);

            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            let got = params.get("x").unwrap().item().unwrap();
            assert!((got - x).abs() < 1e-12);
        }
    }

    #[test]
    fn learning_rate_decay_schedule() {
        let cfg = AdamConfig::default();
        for e in 0..20 {
            let expect = 1e-3 * 0.95f64.powi(e);
            assert!((cfg.lr_at_epoch(e as usize) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradients_leave_parameters_untouched() {
        let cfg = AdamConfig::default();
        let mut adam: Adam<f64> = Adam::new(cfg);
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1.0));
        params.insert("b", Tensor::scalar(2.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(0.5));
        adam.step(&mut params, &grads, cfg.lr);
        assert_eq!(params.get("b").unwrap().item().unwrap(), 2.0);
        assert_ne!(params.get("a").unwrap().item().unwrap(), 1.0);
        assert!(adam.states().contains_key("a"));
        assert!(!adam.states().contains_key("b"));
    }
}
