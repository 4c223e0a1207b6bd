use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Registry of named, trainable tensors. Names are dotted paths
/// (`spatial.decoder.layers.0.ffn.fc1.weight`) and unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.tensors.insert_full(name, tensor.with_grad());
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .unwrap_or("")
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Enables or disables training for every parameter whose name starts
    /// with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.set_requires_grad(on);
            }
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, g) in grads {
            self.tensors[id.0].accumulate_grad(&g)?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Overwrites values of same-named parameters from `other`.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, src) in other.tensors.iter() {
            if let Some(dst) = self.tensors.get_mut(name) {
                if dst.shape() != src.shape() {
                    return Err(Error::dim("copy_from", dst.shape(), src.shape()));
                }
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}

/// Builds parameters under a dotted name prefix.
pub struct Init<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Real, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub<'b>(&'b mut self, name: &str) -> Init<'b, T, R> {
        Init {
            prefix: self.path(name),
            store: self.store,
            rng: self.rng,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform Xavier initialization for a `[fan_in, fan_out]` matrix.
    pub fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(vec![fan_in, fan_out], |_| T::lit(self.rng.gen_range(-a..a)));
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, Tensor::zeros(shape.to_vec()))
    }

    pub fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let path = self.path(name);
        self.store
            .insert(path, Tensor::from_fn(shape.to_vec(), |_| T::lit(v)))
    }

    pub fn values(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            // Box-Muller; keeps the dependency set small.
            let u1: f64 = self.rng.gen_range(1e-12..1.0);
            let u2: f64 = self.rng.gen();
            T::lit(std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos())
        });
        let path = self.path(name);
        self.store.insert(path, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_dotted() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        let mut enc = init.sub("encoder");
        let mut lin = enc.sub("fc");
        lin.xavier("weight", 4, 3).unwrap();
        assert!(lin.zeros("weight", &[3]).is_err());
        assert!(store.id("encoder.fc.weight").is_some());
    }

    #[test]
    fn xavier_bound_respected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = Init::new(&mut store, &mut rng).xavier("w", 10, 6).unwrap();
        let a = (6.0f32 / 16.0).sqrt();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= a));
    }
}
