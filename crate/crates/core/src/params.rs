//! Named parameter storage shared by the decoder and its gates.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NdArray, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// Part of the ungated decoder.
    Base,
    /// Introduced by an energy gate.
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: NdArray<T>,
    pub kind: ParamKind,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray<T>, kind: ParamKind, decay: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            value,
            kind,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalars of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.value.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a gradient-tracking leaf, in store order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values, truncated to
    /// 64 bits.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_where(&self.params, |_| true)
    }

    pub fn fingerprint_kind(&self, kind: ParamKind) -> u64 {
        fingerprint_where(&self.params, |p| p.kind == kind)
    }
}

fn fingerprint_where<T: Scalar>(params: &[Parameter<T>], keep: impl Fn(&Parameter<T>) -> bool) -> u64 {
    let mut hasher = Sha256::new();
    for p in params.iter().filter(|p| keep(p)) {
        hasher.update(p.name.as_bytes());
        for &s in p.value.shape() {
            hasher.update((s as u64).to_le_bytes());
        }
        for v in p.value.data() {
            hasher.update(v.as_f64().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
