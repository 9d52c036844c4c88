//! Minimal reverse-mode gradient engine.
//!
//! Losses are recorded on a [`Graph`] over a fixed primitive set (affine maps,
//! elementwise math, reductions, grid interpolation, gathers, ray compositing,
//! a stop-gradient marker) and differentiated by replaying the tape in
//! reverse. Every primitive has an exact reverse rule; [`finite_diff_check`]
//! validates them against central differences in 64-bit mode.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_update, lr_schedule, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, EntryMeta};
pub use gradcheck::finite_diff_check;
pub use tape::{gradient_of, GradStore, Graph, NodeId};
pub use tensor::{gemm_acc, matmul, MatSide, Real, Tensor};

use crate::{Error, Result};
use std::collections::HashMap;

/// Learning-rate group a parameter entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrGroup {
    /// Feature plane grids of the keyframe field.
    Planes,
    /// Appearance decoder (feature projection + color MLP).
    FieldMlp,
    /// Velocity weight MLP.
    VelocityMlp,
    /// Acceleration MLP.
    AccelMlp,
    /// Object-code MLP for scene decomposition.
    ObjectMlp,
}

/// One named trainable array.
#[derive(Debug, Clone)]
pub struct ParamEntry<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub group: LrGroup,
}

/// Named parameter arrays in insertion order. Every trainable symbol of the
/// pipeline lives in exactly one entry; names are unique and shapes immutable
/// except through [`ParamStore::replace_resized`] (grid upsampling).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    entries: Vec<ParamEntry<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<R>, group: LrGroup) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            group,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<R> {
        &self.entries[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<R> {
        &mut self.entries[idx].value
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    /// Replace an entry with a differently shaped tensor (grid upsampling).
    /// The caller is responsible for resetting optimizer moments.
    pub fn replace_resized(&mut self, idx: usize, value: Tensor<R>) {
        self.entries[idx].value = value;
    }

    /// Total number of scalar coordinates across all entries.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Entries whose name starts with `prefix` (e.g. `"field."` for all
    /// radiance-field parameters).
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }
}
