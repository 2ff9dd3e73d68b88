//! Named parameter storage shared by every layer.

use sha2::{Digest, Sha256};

use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other state carried but never differentiated.
    Buffer,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<T>,
}

/// An ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        self.entries.push(Entry { name: name.into(), kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamKind, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.kind, &e.tensor))
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values, as hex.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            hasher.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.tensor.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every trainable tensor on the tape.
    ///
    /// With `track = false` the leaves are constants, which is what
    /// evaluation and saliency use.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => Some(tape.leaf(e.tensor.clone(), track)),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables for the trainable entries of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }

    /// `(param, var)` pairs for every bound trainable tensor.
    pub fn pairs(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
