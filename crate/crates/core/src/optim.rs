//! Named parameter storage and the Adam update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Ordered set of named parameter tensors. Order is insertion order and is
/// the canonical order for gradient vectors and checkpoints.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name}"))].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    /// All-zero gradient buffers aligned to this set's order.
    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            slots: self.entries.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Gradient buffers aligned index-for-index with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub slots: Vec<Vec<f64>>,
}

impl Gradients {
    /// Ordered in-place sum; deterministic regardless of how the addends
    /// were produced.
    pub fn add(&mut self, other: &Gradients) {
        assert_eq!(self.slots.len(), other.slots.len());
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for slot in &mut self.slots {
            for x in slot.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn zero(&mut self) {
        for slot in &mut self.slots {
            slot.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
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

/// Adam with bias correction. Moments are keyed by parameter index and
/// start at zero; the step counter increases by one per `step` call.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        OptimizerState {
            config,
            step_count: 0,
            first_moment: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            second_moment: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
        }
    }

    /// One Adam update over every parameter; zeroes `grads` afterwards.
    pub fn step(&mut self, params: &mut ParamSet, grads: &mut Gradients) -> Result<()> {
        if grads.slots.len() != params.len() {
            return Err(Error::contract(format!(
                "gradient count {} does not match parameter count {}",
                grads.slots.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (pi, (_, tensor)) in params.entries.iter_mut().enumerate() {
            let g = &grads.slots[pi];
            if g.len() != tensor.len() {
                return Err(Error::contract(format!(
                    "gradient {} has {} entries, parameter has {}",
                    pi,
                    g.len(),
                    tensor.len()
                )));
            }
            let m = &mut self.first_moment[pi];
            let v = &mut self.second_moment[pi];
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                tensor.data[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        grads.zero();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let n = value.len();
        p.insert("w", Tensor::matrix(1, n, value).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = single_param(vec![1.0, -3.0]);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        let mut grads = params.zero_gradients();
        opt.step(&mut params, &mut grads).unwrap();
        assert_eq!(params.get("w").data, vec![1.0, -3.0]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn one_step_descends_quadratic() {
        // f(w) = w^2 at w=1, grad 2
        let mut params = single_param(vec![1.0]);
        let mut cfg = AdamConfig::default();
        cfg.learning_rate = 0.1;
        let mut opt = OptimizerState::new(cfg, &params);
        let mut grads = params.zero_gradients();
        grads.slots[0][0] = 2.0;
        opt.step(&mut params, &mut grads).unwrap();
        let w = params.get("w").data[0];
        assert!(w * w < 1.0, "f did not decrease: w = {w}");
        assert_eq!(grads.slots[0][0], 0.0, "gradients not zeroed");
    }

    #[test]
    fn converges_on_2d_quadratic() {
        // f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimizer (3, -1)
        let mut params = single_param(vec![0.0, 0.0]);
        let mut cfg = AdamConfig::default();
        cfg.learning_rate = 0.05;
        let mut opt = OptimizerState::new(cfg, &params);
        let mut grads = params.zero_gradients();
        for _ in 0..200 {
            let w = &params.get("w").data;
            grads.slots[0][0] = 2.0 * (w[0] - 3.0);
            grads.slots[0][1] = 4.0 * (w[1] + 1.0);
            opt.step(&mut params, &mut grads).unwrap();
        }
        let w = &params.get("w").data;
        assert!((w[0] - 3.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-3, "ended at {w:?}");
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut params = single_param(vec![1.0]);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        let mut grads = Gradients { slots: vec![] };
        assert!(opt.step(&mut params, &mut grads).is_err());
    }
}
