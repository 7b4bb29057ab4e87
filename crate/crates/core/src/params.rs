//! Named parameter storage and per-forward binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// All learnable tensors of a model, keyed by dotted name (`e1.attn.wq`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| in_scope(k, prefix))
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor of `other` over the same-named entry here.
    pub fn overlay(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &other.tensors {
            if let Some(dst) = self.tensors.get(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::shape("overlay", dst.shape(), t.shape()));
                }
            }
            self.tensors.insert(name.clone(), t.clone());
        }
        Ok(())
    }

    /// Bitwise equality of the entries under `prefix` in both stores.
    pub fn scope_bit_eq(&self, other: &ParamStore, prefix: &str) -> bool {
        let a: Vec<_> = self.tensors.iter().filter(|(k, _)| in_scope(k, prefix)).collect();
        let b: Vec<_> = other.tensors.iter().filter(|(k, _)| in_scope(k, prefix)).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamStore { tensors: iter.into_iter().collect() }
    }
}

/// `name` is `prefix` itself or lives below it (`e1` covers `e1.attn.wq`).
pub fn in_scope(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Parameter scopes excluded from gradient updates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeSet(Vec<String>);

impl FreezeSet {
    pub fn new<S: Into<String>>(scopes: impl IntoIterator<Item = S>) -> Self {
        FreezeSet(scopes.into_iter().map(Into::into).collect())
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.0.iter().any(|p| in_scope(name, p))
    }

    pub fn scopes(&self) -> &[String] {
        &self.0
    }
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    freeze: Option<&'p FreezeSet>,
    bound: HashMap<String, Var>,
}

impl<'p> Session<'p> {
    /// No parameter requires a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Session { tape: Tape::new(), params, freeze: None, bound: HashMap::new() }
    }

    /// Parameters outside `freeze` are recorded as differentiable leaves.
    pub fn training(params: &'p ParamStore, freeze: &'p FreezeSet) -> Self {
        Session { tape: Tape::new(), params, freeze: Some(freeze), bound: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?.clone();
        let trainable = self.freeze.is_some_and(|f| !f.is_frozen(name));
        let v = self.tape.leaf(t, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter in the store. Parameters the
    /// loss does not reach get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let Some(freeze) = self.freeze else {
            return Err(Error::invalid("backward on an inference session"));
        };
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, t) in self.params.iter() {
            if freeze.is_frozen(name) {
                continue;
            }
            let g = self
                .bound
                .get(name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Deterministic parameter initialiser. Each tensor draws from its own
/// stream keyed by `(seed, name)`, so the value of a parameter does not
/// depend on which other parameters exist or the order they are created in.
pub struct ParamInit {
    seed: u64,
    store: ParamStore,
}

pub const INIT_STD: f32 = 0.02;

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit { seed, store: ParamStore::new() }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(name.as_bytes()) ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Normal(0, std²) truncated to ±2 std.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f32) {
        let mut rng = self.rng_for(name);
        let t = Tensor::from_fn(shape.to_vec(), |_| loop {
            let z: f32 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        });
        self.store.insert(name, t);
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) {
        self.trunc_normal(name, shape, INIT_STD);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape.to_vec()));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::ones(shape.to_vec()));
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
