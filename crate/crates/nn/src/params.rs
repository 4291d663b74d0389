//! Named parameter storage, deterministic initialization and gradient
//! containers.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::NnError;
use crate::real::Real;
use crate::tensor::Tensor;

/// Ordered collection of uniquely named parameter tensors. Ids are insertion
/// indices and stay stable for the lifetime of the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<usize, NnError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        let (id, _) = self.tensors.insert_full(name, t);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn get_by_id(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_by_id_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        self.tensors.get_index(id).map(|(k, _)| k.as_str()).expect("param id")
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Deterministic parameter initialization. Each tensor draws from its own
/// stream keyed by `(seed, name)`, so adding a parameter never perturbs the
/// values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Normal(0, 1/fan_in) truncated at two standard deviations.
    pub fn fan_in<T: Real>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let sd = 1.0 / (fan_in as f64).sqrt();
        self.truncated_normal(name, shape, sd)
    }

    pub fn truncated_normal<T: Real>(&self, name: &str, shape: &[usize], sd: f64) -> Tensor<T> {
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64(z * sd);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("shape product")
    }
}

/// 64-bit FNV-1a; used only to derive stable per-name stream ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_id: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn insert(&mut self, id: usize, g: Tensor<T>) {
        self.by_id.insert(id, g);
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.by_id.get(&id)
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore<T>, name: &str) -> Option<&'a Tensor<T>> {
        store.id(name).and_then(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.by_id.iter().map(|(&k, v)| (k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Explicit reduction step for data-parallel shards.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (&id, g) in &other.by_id {
            match self.by_id.get_mut(&id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.by_id.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_id.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_id
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.by_id.values().all(Tensor::all_finite)
    }
}
