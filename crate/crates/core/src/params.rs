//! Named parameter collections and their binding into a computation graph.

use std::collections::BTreeMap;
use std::sync::Arc;

use lapstyle_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub tensor: Arc<Tensor<T>>,
    pub frozen: bool,
}

/// Named learnable tensors with shape metadata and a per-tensor frozen flag.
#[derive(Clone, Debug)]
pub struct ParameterSet<T: Real = f32> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { tensor: Arc::new(tensor), frozen });
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| Error::MissingLayer(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: p.tensor.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        p.tensor = Arc::new(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor<T>>> {
        self.entries.get(name).map(|p| &p.tensor).ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.frozen)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParameterSet<T>) -> Result<()> {
        for (name, p) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Invalid(format!("duplicate parameter name {name}")));
            }
            self.entries.insert(name, p);
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { tensor: Arc::new(p.tensor.cast()), frozen: p.frozen }))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and values (as little-endian `f64`).
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks that every expected `(name, shape)` is present with that shape.
    pub fn expect_shapes<'a>(&self, expected: impl IntoIterator<Item = (&'a str, Vec<usize>)>) -> Result<()> {
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name: name.to_string(), expected: shape, found: t.shape().to_vec() });
            }
        }
        Ok(())
    }

    /// Adds each parameter to `g`. Unfrozen entries become differentiable
    /// leaves when `trainable` is set; everything else is a constant.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let v = if trainable && !p.frozen {
                    g.param_arc(Arc::clone(&p.tensor))
                } else {
                    g.constant_arc(Arc::clone(&p.tensor))
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound into one graph, addressed by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binds graph values directly, e.g. differentiable inputs in gradient
    /// checks.
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var)>) -> Bound {
        Bound { vars: vars.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }

    /// Combines two bindings from the same graph.
    pub fn union(mut self, other: Bound) -> Bound {
        self.vars.extend(other.vars);
        self
    }
}

/// Uniform `U(-b, b)` with `b = 1 / sqrt(fan_in)` for trainable convolutions.
pub fn fan_in_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Registers a `c_out x c_in x k x k` convolution with bias under `name`.
pub fn add_conv(
    ps: &mut ParameterSet,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let shape = [c_out, c_in, k, k];
    ps.insert(format!("{name}.weight"), fan_in_uniform(&shape, rng), false)?;
    let bound = 1.0 / ((c_in * k * k) as f32).sqrt();
    ps.insert(format!("{name}.bias"), Tensor::from_fn(&[c_out], |_| rng.random_range(-bound..bound)), false)
}

/// Registers a zero-initialized convolution (weights and bias all 0).
pub fn add_zero_conv(ps: &mut ParameterSet, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
    ps.insert(format!("{name}.weight"), Tensor::zeros(&[c_out, c_in, k, k]), false)?;
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]), false)
}
