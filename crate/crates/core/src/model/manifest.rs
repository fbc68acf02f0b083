//! Model files: JSON manifest plus a flat little-endian `f32` weight blob.
//!
//! Manifest layout (version 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "input_shape": [2],
//!   "layers": [{"name": "fc", "kind": "dense", "in_dim": 2, "out_dim": 1}],
//!   "weights": [
//!     {"layer": "fc", "tensor": "W", "shape": [1, 2], "offset": 0},
//!     {"layer": "fc", "tensor": "b", "shape": [1], "offset": 8}
//!   ]
//! }
//! ```
//!
//! Offsets are byte positions into the blob; entries must tile it exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{validate_graph, LayerSpec, LayerWeights, NetworkGraph};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    weights: Vec<WeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    layer: String,
    tensor: TensorRole,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum TensorRole {
    W,
    #[serde(rename = "b")]
    B,
}

/// Parses a manifest and its weight blob into a validated graph.
pub fn load_model(manifest_bytes: &[u8], weight_bytes: &[u8]) -> Result<NetworkGraph> {
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version { found: manifest.version, supported: MANIFEST_VERSION });
    }

    // Entries must tile the blob exactly: in-bounds, no overlap, no slack.
    let mut spans: Vec<(usize, usize)> = manifest
        .weights
        .iter()
        .map(|e| {
            let elems: usize = e.shape.iter().product();
            (e.offset, elems * 4)
        })
        .collect();
    spans.sort_unstable();
    let mut cursor = 0usize;
    for (offset, len) in &spans {
        if *offset != cursor {
            return Err(Error::Shape(format!(
                "weight blob index is not contiguous at byte {cursor} (next entry at {offset})"
            )));
        }
        cursor += len;
    }
    if cursor != weight_bytes.len() {
        return Err(Error::Shape(format!(
            "weight blob has {} bytes, manifest indexes {cursor}",
            weight_bytes.len()
        )));
    }

    let mut pending: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    for entry in &manifest.weights {
        let tensor = decode_f32_tensor(weight_bytes, entry.offset, &entry.shape)?;
        let slot = pending.entry(entry.layer.clone()).or_default();
        let cell = match entry.tensor {
            TensorRole::W => &mut slot.0,
            TensorRole::B => &mut slot.1,
        };
        if cell.is_some() {
            return Err(Error::UnexpectedWeight(format!(
                "duplicate {:?} entry for layer '{}'",
                entry.tensor, entry.layer
            )));
        }
        *cell = Some(tensor);
    }

    let mut weights = BTreeMap::new();
    for layer in &manifest.layers {
        if !layer.kind.is_weighted() {
            continue;
        }
        let (w, b) = pending.remove(&layer.name).ok_or_else(|| {
            Error::MissingWeight(format!("layer '{}' has no blob entries", layer.name))
        })?;
        let weight = w.ok_or_else(|| Error::MissingWeight(format!("layer '{}' W", layer.name)))?;
        let bias = b.ok_or_else(|| Error::MissingWeight(format!("layer '{}' b", layer.name)))?;
        weights.insert(layer.name.clone(), LayerWeights { weight, bias });
    }
    if let Some(name) = pending.keys().next() {
        return Err(Error::UnexpectedWeight(format!(
            "blob entries for layer '{name}' which is absent or unweighted"
        )));
    }

    let g = NetworkGraph::new_unchecked(manifest.input_shape, manifest.layers, weights);
    let findings = validate_graph(&g);
    if !findings.is_empty() {
        return Err(Error::Shape(format!("invalid model: {}", findings.join("; "))));
    }
    Ok(g)
}

/// Serializes a graph into manifest JSON and the weight blob.
///
/// Weights are narrowed to `f32`; a load/save round trip is exact at that
/// storage precision.
pub fn save_model(g: &NetworkGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for layer in g.layers() {
        if !layer.kind.is_weighted() {
            continue;
        }
        let lw = g
            .layer_weights(&layer.name)
            .ok_or_else(|| Error::MissingWeight(format!("layer '{}'", layer.name)))?;
        for (role, tensor) in [(TensorRole::W, &lw.weight), (TensorRole::B, &lw.bias)] {
            entries.push(WeightEntry {
                layer: layer.name.clone(),
                tensor: role,
                shape: tensor.shape().to_vec(),
                offset: blob.len(),
            });
            for &v in tensor.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        input_shape: g.input_shape().to_vec(),
        layers: g.layers().to_vec(),
        weights: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
    Ok((json, blob))
}

fn decode_f32_tensor(blob: &[u8], offset: usize, shape: &[usize]) -> Result<Tensor> {
    let elems: usize = shape.iter().product();
    let end = offset
        .checked_add(elems * 4)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            Error::Shape(format!("weight entry at offset {offset} overruns the blob"))
        })?;
    let data = blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Weight blob path corresponding to a manifest path: same stem, `.bin`.
pub fn weight_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Loads a model from `<name>.json` and its sibling `<name>.bin`.
pub fn load_model_files(manifest_path: &Path) -> Result<NetworkGraph> {
    let manifest = std::fs::read(manifest_path)?;
    let blob = std::fs::read(weight_path_for(manifest_path))?;
    load_model(&manifest, &blob)
}

/// Writes `<name>.json` and `<name>.bin` next to each other.
pub fn save_model_files(g: &NetworkGraph, manifest_path: &Path) -> Result<()> {
    let (json, blob) = save_model(g)?;
    std::fs::write(manifest_path, json)?;
    std::fs::write(weight_path_for(manifest_path), blob)?;
    Ok(())
}
