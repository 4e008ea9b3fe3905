//! Named-tensor checkpoint archive.
//!
//! ```text
//! b"OVDETCKP"                      8-byte magic
//! u64 little-endian                manifest length in bytes
//! manifest                         JSON, see `Manifest`
//! f64 little-endian buffers        contiguous, at the manifest's offsets
//! ```
//!
//! Optimizer moments are stored as tensors named `optim.m.<param>` and
//! `optim.v.<param>`.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, ParamStore};
use crate::detector::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion;
use crate::scenes::SplitSpec;
use crate::tensor::Tensor;
use crate::textspace::CategorySpace;
use crate::trainer::{AdamW, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OVDETCKP";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the buffer section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: u8,
    pub iteration: usize,
    pub optimizer_steps: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub space: CategorySpace,
    /// How per-iteration random streams are derived; they carry no state.
    pub rng: String,
    pub provenance: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for e in state.model.params.entries() {
            tensors.push((e.name.clone(), e.value.clone()));
        }
        for (prefix, g) in [(M_PREFIX, &state.optimizer.m), (V_PREFIX, &state.optimizer.v)] {
            for (e, t) in state.model.params.entries().iter().zip(g.iter()) {
                tensors.push((format!("{prefix}{}", e.name), t.clone()));
            }
        }
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset,
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                stage: state.config.stage,
                iteration: state.iteration,
                optimizer_steps: state.optimizer.steps,
                model: state.model.config.clone(),
                // Where the file goes is not part of the state.
                train: TrainConfig {
                    checkpoint_path: None,
                    ..state.config.clone()
                },
                split: state.split.clone(),
                space: state.space.clone(),
                rng: "chacha8(splitmix(seed ^ splitmix(iteration ^ 0x69746572)))".into(),
                provenance: format!("ovdet {}", env!("CARGO_PKG_VERSION")),
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.tensors.iter().map(|t| t.1.len() * 8).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let eof = |what: &str| Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, what.to_string()));
        if bytes.len() < 16 {
            return Err(eof("checkpoint header truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Malformed("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| eof("checkpoint manifest truncated"))?;
        let probe: serde_json::Value =
            serde_json::from_slice(body).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
        let version = probe.get("format_version").and_then(|v| v.as_u64());
        if version != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::SchemaVersionMismatch {
                expected: FORMAT_VERSION,
                found: version.map_or_else(|| "missing".into(), |v| v.to_string()),
            });
        }
        let manifest: Manifest =
            serde_json::from_value(probe).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
        let data = &bytes[16 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n = e.rows * e.cols;
            let raw = data
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| eof(&format!("tensor {} truncated", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, values)));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| &t.1)
    }

    /// Model weights. Every parameter of the configured architecture must be
    /// present with its shape; fusion parameters are loaded when stored.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.manifest.model.clone())?;
        let has_fusion = self.tensors.iter().any(|t| fusion::is_fusion_param(&t.0));
        if has_fusion {
            model.enable_fusion(0);
        }
        load_into(&mut model.params, |n| self.tensor(n), "")?;
        let known: Vec<&str> = model.params.entries().iter().map(|e| e.name.as_str()).collect();
        for (name, _) in &self.tensors {
            let base = name
                .strip_prefix(M_PREFIX)
                .or_else(|| name.strip_prefix(V_PREFIX))
                .unwrap_or(name);
            if !known.contains(&base) {
                return Err(Error::CheckpointMismatch(format!("unexpected tensor {name}")));
            }
        }
        Ok(model)
    }

    /// Full training state for resuming.
    pub fn state(&self) -> Result<TrainState> {
        let model = self.model()?;
        let mut optimizer = AdamW::new(&model);
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for e in model.params.entries() {
            m.register(e.name.clone(), Tensor::zeros(e.value.rows(), e.value.cols()));
            v.register(e.name.clone(), Tensor::zeros(e.value.rows(), e.value.cols()));
        }
        load_into(&mut m, |n| self.tensor(n), M_PREFIX)?;
        load_into(&mut v, |n| self.tensor(n), V_PREFIX)?;
        optimizer.m = grads_from(&m);
        optimizer.v = grads_from(&v);
        optimizer.steps = self.manifest.optimizer_steps;
        Ok(TrainState {
            config: self.manifest.train.clone(),
            model,
            optimizer,
            space: self.manifest.space.clone(),
            split: self.manifest.split.clone(),
            iteration: self.manifest.iteration,
            last_loss: None,
        })
    }

    /// SHA-256 of the serialized archive.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn load_into<'a>(
    store: &mut ParamStore,
    lookup: impl Fn(&str) -> Option<&'a Tensor>,
    prefix: &str,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let t = lookup(&name).ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))?;
        let want = store.value(id).shape();
        if t.shape() != want {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name} has shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

fn grads_from(store: &ParamStore) -> Grads {
    let mut g = Grads::zeros_like(store);
    for id in store.ids() {
        *g.get_mut(id) = store.value(id).clone();
    }
    g
}
