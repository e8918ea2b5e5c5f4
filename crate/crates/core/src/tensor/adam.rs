use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Parameters that received no gradient
/// in a step (not reachable from the loss) are left untouched, moments
/// included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Restores saved optimizer state.
    pub fn from_state(config: AdamConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), TensorError> {
        for (id, g) in params.ids().zip(grads.params()) {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let correct1 = 1.0 - beta1.powi(self.step as i32);
        let correct2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.param(id) else { continue };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let theta = params.get_mut(id).data_mut();
            for (((t, m), v), &g) in theta.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *t -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Mode};
    use rand::SeedableRng;
    use std::collections::HashMap;

    fn quadratic_grads(params: &ParamStore, id: crate::tensor::ParamId, target: f64) -> Gradients {
        // (θ − target)² written with graph ops
        let mut g = Graph::new(Mode::Train);
        let t = g.param(id);
        let c = g.input("c");
        let neg = g.scale(c, -1.0);
        let d = g.add(t, neg);
        let sq = g.mul(d, d);
        let loss = g.sum(sq);
        let inputs: HashMap<String, Tensor> = [("c".to_string(), Tensor::vector(vec![target]))].into();
        g.forward(params, inputs, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        g.backward(loss, params).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        let id = params.add("theta", Tensor::vector(vec![5.0]));
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let grads = quadratic_grads(&params, id, 3.0); // g = 4
        adam.step(&mut params, &grads).unwrap();
        let moved = 5.0 - params.get(id).data()[0];
        let expected = 1e-3 * 4.0 / (4.0 + 1e-8);
        assert!((moved - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_state_at_zero() {
        let mut params = ParamStore::new();
        let id = params.add("theta", Tensor::vector(vec![3.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let mut g = Graph::new(Mode::Train);
        let t = g.param(id);
        let z = g.scale(t, 0.0);
        let loss = g.sum(z);
        g.forward(&params, HashMap::new(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let grads = g.backward(loss, &params).unwrap();
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params.get(id).data(), &[3.0, -1.0]);
        assert!(adam.first_moments()[0].data().iter().all(|&m| m == 0.0));
        assert!(adam.second_moments()[0].data().iter().all(|&v| v == 0.0));
    }

    /// The scalar recurrence written out directly, independent of the
    /// graph and optimizer code.
    fn analytic_adam_on_quadratic(theta0: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (th - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let oracle = analytic_adam_on_quadratic(0.0, 0.1, 100);
        assert!((oracle - 3.0).abs() < 0.1, "oracle ended at {oracle}");

        let mut params = ParamStore::new();
        let id = params.add("theta", Tensor::vector(vec![0.0]));
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &params);
        for _ in 0..100 {
            let grads = quadratic_grads(&params, id, 3.0);
            adam.step(&mut params, &grads).unwrap();
        }
        let theta = params.get(id).data()[0];
        assert!((theta - 3.0).abs() < 0.1);
        assert!((theta - oracle).abs() < 1e-12);
        assert_eq!(adam.step_count(), 100);
        assert!(adam.second_moments()[0].data()[0] >= 0.0);
    }
}
