//! Flat, named parameter storage.

use ndarray::Array2;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Part of the dense network.
    Base,
    /// Introduced by an adapter (LoRA factor or DoRA magnitude).
    Adapter,
}

/// One tensor. Vectors are stored as `1 × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
    pub component: Component,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Array2<f64>,
        component: Component,
        kind: ParamKind,
    ) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
            component,
            kind,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// SHA-256 over the names and little-endian bytes of the selected tensors.
    pub fn fingerprint(&self, mut select: impl FnMut(&Param) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Per-parameter gradient slots indexed like a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Array2<f64>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn set(&mut self, id: ParamId, g: Array2<f64>) {
        self.slots[id.0] = Some(g);
    }

    /// The slot for `id`, zero-initialized with `shape` on first use.
    pub fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<f64> {
        self.slots[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}
