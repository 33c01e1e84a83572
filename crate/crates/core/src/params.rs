//! Named parameter storage shared by all networks of a pipeline.

use std::collections::BTreeMap;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Spectral-norm power-iteration vectors are stored but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// Uniform fan-in initialization scaled for a leaky-rectifier with the
/// given negative slope.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], slope: f64, rng: &mut R) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
