//! Named parameter storage and initializers.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    value: Rc<Tensor>,
    pub trainable: bool,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    /// Mutable access; copies the tensor only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Rc::make_mut(&mut self.value)
    }
}

/// A flat, ordered `name → tensor` mapping. Keys are dotted paths such as
/// `backbone.layer2.0.conv1.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            bail!(Config, "duplicate parameter `{name}`");
        }
        self.entries.insert(
            name.to_string(),
            Param {
                value: Rc::new(value),
                trainable,
            },
        );
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| p.value())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a parameter's value; the shape must match the registered one.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            bail!(
                Shape,
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            );
        }
        p.value = Rc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

pub fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data)
}

/// He-normal: `N(0, 2 / fan_in)`.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    normal(shape, math::sqrt(2.0 / fan_in as f64), rng)
}

/// Glorot-uniform over `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, math::sqrt(6.0 / (fan_in + fan_out) as f64), rng)
}
