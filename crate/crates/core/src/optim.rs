//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use lapstyle_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

const FIRST_PREFIX: &str = "adam.m.";
const SECOND_PREFIX: &str = "adam.v.";

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without one keep their value and moment state.
    pub fn update(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = (c.learning_rate / bc1) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let sqrt_bc2 = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (name, g) in grads {
            if params.is_frozen(name) {
                return Err(Error::Invalid(format!("refusing to update frozen parameter {name}")));
            }
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut next = (**p).clone();
            for (((w, &gi), mi), vi) in next.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / sqrt_bc2 + eps);
            }
            params.set(name, next)?;
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn state_tensors(&self) -> ParameterSet {
        let mut ps = ParameterSet::new();
        for (prefix, map) in [(FIRST_PREFIX, &self.first), (SECOND_PREFIX, &self.second)] {
            for (name, buf) in map {
                let t = Tensor::new(&[buf.len()], buf.clone()).expect("flat buffer");
                ps.insert(format!("{prefix}{name}"), t, false).expect("unique names");
            }
        }
        ps
    }

    /// Restores moment buffers written by [`state_tensors`](Self::state_tensors).
    pub fn from_state(config: AdamConfig, step: u64, state: &ParameterSet) -> Self {
        let mut adam = Self::new(config);
        adam.step = step;
        for (name, p) in state.iter() {
            if let Some(rest) = name.strip_prefix(FIRST_PREFIX) {
                adam.first.insert(rest.to_string(), p.tensor.data().to_vec());
            } else if let Some(rest) = name.strip_prefix(SECOND_PREFIX) {
                adam.second.insert(rest.to_string(), p.tensor.data().to_vec());
            }
        }
        adam
    }

    pub fn is_state_name(name: &str) -> bool {
        name.starts_with(FIRST_PREFIX) || name.starts_with(SECOND_PREFIX)
    }
}
