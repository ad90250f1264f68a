use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tensor::{ensure_same_shape, Tensor};

/// Handle to an entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics and other state that is not differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Owns every learned tensor (and buffer) of one or more modules.
///
/// Modules only hold [`ParamId`]s, so a whole model can be checkpointed,
/// fingerprinted, or restored by operating on its store.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), ParamKind::Trainable, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), ParamKind::Buffer, value)
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        ensure_same_shape("ParamStore::set", slot.shape(), value.shape())?;
        *slot = value;
        Ok(())
    }

    /// Number of scalar trainable parameters among `ids`.
    pub fn count_scalars(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .filter(|id| self.kind(**id) == ParamKind::Trainable)
            .map(|id| self.value(*id).len())
            .sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        self.fingerprint_of(&self.ids().collect::<Vec<_>>())
    }

    pub fn fingerprint_of(&self, ids: &[ParamId]) -> String {
        let mut hasher = Sha256::new();
        for id in ids {
            let e = &self.entries[id.0];
            hasher.update(e.name.as_bytes());
            for d in e.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Copies the values of `ids` into a new store, preserving order.
    pub fn subset(&self, ids: &[ParamId]) -> ParamStore {
        ParamStore {
            entries: ids.iter().map(|id| self.entries[id.0].clone()).collect(),
        }
    }

    /// Overwrites the values of `ids` with the entries of `source`, in order.
    pub fn load_subset(&mut self, ids: &[ParamId], source: &ParamStore) -> Result<()> {
        if ids.len() != source.entries.len() {
            return Err(TensorError::invalid(
                "ParamStore::load_subset",
                format!("expected {} entries, got {}", ids.len(), source.entries.len()),
            ));
        }
        for (id, src) in ids.iter().zip(&source.entries) {
            let dst = &self.entries[id.0];
            if dst.name != src.name {
                return Err(TensorError::invalid(
                    "ParamStore::load_subset",
                    format!("name mismatch: {} vs {}", dst.name, src.name),
                ));
            }
            self.set(*id, src.value.clone())?;
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
