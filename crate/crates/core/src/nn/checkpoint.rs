//! Model checkpoints: a JSON manifest plus one contiguous little-endian `f32`
//! parameter blob. The manifest records the byte range of every block.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerKind, NnError, Sequential, SgdConfig, Tensor};
use crate::util::write_atomic;

pub const FORMAT: &str = "gazekit-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub layers: Vec<LayerKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: String,
    pub seed: u64,
    pub training: Option<SgdConfig>,
    pub networks: Vec<NetworkEntry>,
    pub blocks: Vec<BlockEntry>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A named set of networks with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub seed: u64,
    pub training: Option<SgdConfig>,
    pub networks: Vec<(String, Sequential)>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: impl Into<String>, seed: u64) -> Self {
        Self { model: model.into(), seed, training: None, networks: Vec::new(), extra: BTreeMap::new() }
    }

    pub fn with_network(mut self, name: impl Into<String>, net: &Sequential) -> Self {
        self.networks.push((name.into(), net.clone()));
        self
    }

    pub fn network(&self, name: &str) -> Result<&Sequential, NnError> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net)
            .ok_or_else(|| NnError::Checkpoint(format!("checkpoint {} has no network {name:?}", self.model)))
    }

    /// Serializes into manifest bytes and blob bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>), NnError> {
        let mut blob = Vec::new();
        let mut blocks = Vec::new();
        let mut networks = Vec::new();
        for (name, net) in &self.networks {
            networks.push(NetworkEntry { name: name.clone(), layers: net.kinds() });
            for (block, tensor) in net.params() {
                let offset = blob.len();
                for v in tensor.data() {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                blocks.push(BlockEntry {
                    name: format!("{name}.{block}"),
                    shape: tensor.shape().to_vec(),
                    offset,
                    length: blob.len() - offset,
                });
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            model: self.model.clone(),
            seed: self.seed,
            training: self.training,
            networks,
            blocks,
            extra: self.extra.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        json.push(b'\n');
        Ok((json, blob))
    }

    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self, NnError> {
        let manifest: Manifest =
            serde_json::from_slice(manifest).map_err(|e| NnError::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(NnError::Checkpoint(format!("unsupported format {:?}", manifest.format)));
        }
        let blocks: BTreeMap<&str, &BlockEntry> = manifest.blocks.iter().map(|b| (b.name.as_str(), b)).collect();
        let mut networks = Vec::new();
        for entry in &manifest.networks {
            let mut layers = Vec::new();
            for (i, kind) in entry.layers.iter().enumerate() {
                let mut layer = Layer::zeroed(*kind);
                if layer.has_params() {
                    for (suffix, slot) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                        let key = format!("{}.{i}.{suffix}", entry.name);
                        let b = blocks
                            .get(key.as_str())
                            .ok_or_else(|| NnError::Checkpoint(format!("missing block {key}")))?;
                        if b.shape != slot.shape() {
                            return Err(NnError::Checkpoint(format!(
                                "block {key} has shape {:?}, layer expects {:?}",
                                b.shape,
                                slot.shape()
                            )));
                        }
                        let bytes = blob
                            .get(b.offset..b.offset + b.length)
                            .ok_or_else(|| NnError::Checkpoint(format!("block {key} outside blob")))?;
                        if bytes.len() != 4 * slot.len() {
                            return Err(NnError::Checkpoint(format!("block {key} has wrong length")));
                        }
                        let values = bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                            .collect();
                        *slot = Tensor::new(b.shape.clone(), values)?;
                    }
                }
                layers.push(layer);
            }
            networks.push((entry.name.clone(), Sequential::new(layers)));
        }
        Ok(Self {
            model: manifest.model,
            seed: manifest.seed,
            training: manifest.training,
            networks,
            extra: manifest.extra,
        })
    }

    /// Writes `manifest.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        let (manifest, blob) = self.encode()?;
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let blob = fs::read(dir.join(BLOB_FILE))?;
        Self::decode(&manifest, &blob)
    }

    /// Rounds every parameter to `f32`, the precision a saved checkpoint keeps.
    pub fn quantize(net: &mut Sequential) {
        for t in net.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
