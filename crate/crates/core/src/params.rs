use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Real, Tensor};

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

/// Ordered, named weight and bias tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParameterSet<T> {
    fn default() -> Self {
        ParameterSet {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Like [`get`](Self::get) but errors with the missing name.
    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// True when both sets hold the same names with the same shapes, in order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Errors naming the first parameter that holds a NaN or infinity.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, t) in &self.entries {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{what} {name}")));
            }
        }
        Ok(())
    }
}

/// Draws weights from N(0, 0.02^2) and zero biases for each layer, named
/// `{prefix}{index}.weight` / `{prefix}{index}.bias` per layer group.
///
/// Layers are initialized in order from a single seeded stream, so the
/// result is a pure function of `(layers, seed)`.
pub fn init_params<T: Real>(layers: &[(String, ConvSpec)], seed: u64) -> ParameterSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParameterSet::new();
    for (name, spec) in layers {
        let weight = Tensor::from_fn(&spec.weight_shape(), |_| T::lit(normal.sample(&mut rng)));
        params
            .insert(format!("{name}.weight"), weight)
            .expect("unique layer names");
        params
            .insert(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]))
            .expect("unique layer names");
    }
    params
}
