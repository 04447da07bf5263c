//! Named parameter storage keyed by module path.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{config_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Xavier,
    /// Uniform in +-scale.
    Uniform(f64),
}

impl Init {
    pub fn build<T: Scalar, R: Rng + ?Sized>(self, rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
        let bound = match self {
            Init::Zeros => return Array2::zeros((rows, cols)),
            Init::Ones => return Array2::ones((rows, cols)),
            Init::Xavier => (6.0 / (rows + cols) as f64).sqrt(),
            Init::Uniform(s) => s,
        };
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Array2::from_shape_simple_fn((rows, cols), || T::of(dist.sample(rng)))
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Array2<T>,
    trainable: bool,
}

/// Flat registry of every parameter tensor of a model. Order of insertion is
/// preserved so serialisation is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = init.build(rows, cols, rng);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Number of scalar entries across the parameters matching `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrites values of matching names from `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (_, name, value) in other.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            let id = self
                .id(name)
                .ok_or_else(|| config_err!("checkpoint parameter {name} unknown to model"))?;
            let dst = self.get_mut(id);
            if dst.dim() != value.dim() {
                return Err(config_err!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    value.dim(),
                    dst.dim()
                ));
            }
            dst.assign(value);
            n += 1;
        }
        Ok(n)
    }

    /// Bit pattern of every value under `prefix`, for byte-equality audits.
    pub fn fingerprint(&self, prefix: &str) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .flat_map(|e| e.value.iter().map(|v| v.bits()))
            .collect()
    }
}
