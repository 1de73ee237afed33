//! Named parameter storage, shared by the model and the optimizer.
//!
//! Parameters live outside any graph. Each forward pass binds the whole
//! store into a graph as leaves ([`bind`]); after `backward` the gradients
//! are read back in store order into one flat buffer.
//!
//! On disk a store is a flat little-endian `f64` blob plus a JSON index
//! mapping parameter name to `{offset, shape}`, where `offset` counts
//! elements (not bytes) into the blob.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, NodeId};
use super::{NumericsError, Result, Tensor};

/// Handle to one named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct Param {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Flat collection of named `f64` parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    offset: usize,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "parameter {name}: shape/value mismatch"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Param { name, shape, values });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count across all parameters.
    pub fn flat_len(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// All values concatenated in store order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in &self.entries {
            out.extend_from_slice(&p.values);
        }
        out
    }

    /// Overwrite all values from a flat buffer in store order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut off = 0;
        for p in &mut self.entries {
            let len = p.values.len();
            p.values.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    /// Write the blob and its JSON index.
    pub fn save(&self, blob_path: &Path, index_path: &Path) -> Result<()> {
        let flat = self.to_flat();
        write_f64_blob(blob_path, &flat)?;
        let mut index = HashMap::new();
        let mut offset = 0;
        for p in &self.entries {
            index.insert(
                p.name.clone(),
                IndexEntry {
                    offset,
                    shape: p.shape.clone(),
                },
            );
            offset += p.values.len();
        }
        let json = serde_json::to_string_pretty(&index)
            .map_err(|e| NumericsError::Index(e.to_string()))?;
        fs::write(index_path, json)?;
        Ok(())
    }

    /// Load a store previously written by [`ParamStore::save`]. Entries are
    /// ordered by blob offset so layout round-trips exactly.
    pub fn load(blob_path: &Path, index_path: &Path) -> Result<Self> {
        let flat = read_f64_blob(blob_path)?;
        let json = fs::read_to_string(index_path)?;
        let index: HashMap<String, IndexEntry> =
            serde_json::from_str(&json).map_err(|e| NumericsError::Index(e.to_string()))?;
        let mut ordered: Vec<(String, IndexEntry)> = index.into_iter().collect();
        ordered.sort_by_key(|(_, e)| e.offset);
        let mut store = ParamStore::new();
        let mut expected_offset = 0;
        for (name, entry) in ordered {
            if entry.offset != expected_offset {
                return Err(NumericsError::Index(format!(
                    "parameter {name}: offset {} does not follow previous entry (expected {})",
                    entry.offset, expected_offset
                )));
            }
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len;
            if end > flat.len() {
                return Err(NumericsError::Index(format!(
                    "parameter {name}: blob too short ({} elements, need {end})",
                    flat.len()
                )));
            }
            store.add(name, entry.shape, flat[entry.offset..end].to_vec());
            expected_offset = end;
        }
        if expected_offset != flat.len() {
            return Err(NumericsError::Index(format!(
                "blob holds {} elements but index covers {expected_offset}",
                flat.len()
            )));
        }
        Ok(store)
    }
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(NumericsError::Index(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Per-graph leaf nodes for every parameter in a store, in store order.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    /// Gradients for all parameters, flattened in store order. Parameters
    /// unreachable from the loss contribute zeros.
    pub fn flat_grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.flat_len());
        for (i, &node) in self.nodes.iter().enumerate() {
            let len = store.values(ParamId(i)).len();
            match grads.get(node) {
                Some(buf) => out.extend_from_slice(buf),
                None => out.extend(std::iter::repeat(0.0).take(len)),
            }
        }
        out
    }
}

/// Bind every parameter as a gradient-tracking leaf of `g`.
pub fn bind(g: &mut Graph, store: &ParamStore) -> BoundParams {
    bind_with_grad(g, store, true)
}

/// Bind parameters without gradient tracking; forward-only graphs skip all
/// backward bookkeeping.
pub fn bind_frozen(g: &mut Graph, store: &ParamStore) -> BoundParams {
    bind_with_grad(g, store, false)
}

fn bind_with_grad(g: &mut Graph, store: &ParamStore, requires_grad: bool) -> BoundParams {
    let nodes = store
        .ids()
        .map(|id| {
            let t = Tensor::new(store.shape(id).to_vec(), store.values(id).to_vec())
                .expect("store entries are consistent");
            g.leaf(if requires_grad { t.with_grad() } else { t })
        })
        .collect();
    BoundParams { nodes }
}
