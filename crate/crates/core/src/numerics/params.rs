use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Named parameters in insertion order.
///
/// Every tensor draws from its own generator, seeded from the store seed and
/// the parameter name, so adding a parameter never perturbs the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
    seed: u64,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    fn insert(&mut self, name: String, t: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Dimension {
                op: "param set",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Scalar count of all parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Uniform in ±1/√fan_in.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        self.insert(name.to_string(), Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::of(z * std)
            })
            .collect();
        self.insert(name.to_string(), Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.insert(name.to_string(), Tensor::full(shape, T::of(v)))
    }

    /// Registers `{prefix}.weight` `[in×out]` and `{prefix}.bias` `[out]`.
    pub fn add_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.add_uniform(&format!("{prefix}.weight"), &[fan_in, fan_out], fan_in)?;
        self.add_uniform(&format!("{prefix}.bias"), &[fan_out], fan_in)
    }

    /// Registers `{prefix}.gamma` (ones) and `{prefix}.beta` (zeros).
    pub fn add_layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.add_const(&format!("{prefix}.gamma"), &[c], 1.0)?;
        self.add_const(&format!("{prefix}.beta"), &[c], 0.0)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            seed: self.seed,
        }
    }
}
