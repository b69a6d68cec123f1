//! Model components: parameter storage, the three encoder branches, gate
//! fusion, backbone variants, the patch-wise decoder, and the assembled
//! training/scoring pipeline.

pub mod backbone;
pub mod config;
pub mod decoder;
pub mod encoder_global;
pub mod encoder_local;
pub mod gate_fusion;
pub mod pipeline;
pub mod weights;

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Named tensors with a trainable flag each. Registration order is the
/// canonical creation order (deterministic for a fixed seed); name order is
/// the canonical serialization order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter '{name}' registered twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .value
    }

    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(self.entries[i].value.shape(), value.shape(), "shape change for '{name}'");
        self.entries[i].value = value;
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Content hash over all frozen tensors: sorted by name, each hashed as
    /// name bytes, dims (u32 LE) and values as f64 bits (LE). First eight
    /// bytes of SHA-256, little-endian. Hashing the empty set yields a fixed
    /// sentinel value.
    pub fn fingerprint_frozen(&self) -> u64 {
        let mut names: Vec<&ParamEntry<T>> = self.entries.iter().filter(|e| !e.trainable).collect();
        names.sort_by(|a, b| a.name.cmp(&b.name));
        let mut hasher = Sha256::new();
        for e in names {
            hasher.update(e.name.as_bytes());
            hasher.update([0u8]);
            for &d in e.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                hasher.update(v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Tape bindings for one parameter store: trainable entries become tracked
/// leaves, frozen entries become constants (pruned on backward).
pub struct Bound<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    vars: HashMap<String, Var>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn bind(store: &ParamStore<T>, tape: &'t Tape<T>) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        for e in store.entries() {
            let var = if e.trainable { tape.param(e.value.clone()) } else { tape.constant(e.value.clone()) };
            vars.insert(e.name.clone(), var);
        }
        Self { tape, vars }
    }

    /// Bind everything as constants: no gradient bookkeeping. Used for
    /// inference paths.
    pub fn bind_frozen(store: &ParamStore<T>, tape: &'t Tape<T>) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        for e in store.entries() {
            vars.insert(e.name.clone(), tape.constant(e.value.clone()));
        }
        Self { tape, vars }
    }

    /// Bind externally created variables to names; used by gradient checks
    /// that need direct handles on the parameter leaves.
    pub fn from_vars(tape: &'t Tape<T>, pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { tape, vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }
}

/// Uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)); draw order is the
/// flat element order, so layouts are reproducible for a fixed seed.
pub fn init_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| lit((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(shape, data)
}

pub fn init_zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn init_ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}

/// Validate that a tensor variable carries only finite values; used on
/// public forward entry points.
pub fn ensure_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.with_value(v, |t| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::Numerics(format!("{what} contains non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn fingerprint_sensitive_to_frozen_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.register("a", init_uniform(&mut rng, &[2, 2], 2), false);
        store.register("b", init_uniform(&mut rng, &[3], 3), true);
        let fp1 = store.fingerprint_frozen();

        // Trainable tensors do not contribute.
        let mut t = store.tensor("b").clone();
        t.data_mut()[0] += 1.0;
        store.set_tensor("b", t);
        assert_eq!(store.fingerprint_frozen(), fp1);

        // One frozen bit flips the fingerprint.
        let mut t = store.tensor("a").clone();
        t.data_mut()[0] = f32::from_bits(t.data()[0].to_bits() ^ 1);
        store.set_tensor("a", t);
        assert_ne!(store.fingerprint_frozen(), fp1);
    }

    #[test]
    fn empty_fingerprint_is_stable_sentinel() {
        let a = ParamStore::<f32>::new().fingerprint_frozen();
        let b = ParamStore::<f64>::new().fingerprint_frozen();
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut store = ParamStore::<f32>::new();
        store.register("x", Tensor::zeros(&[1]), true);
        store.register("x", Tensor::zeros(&[1]), true);
    }
}
