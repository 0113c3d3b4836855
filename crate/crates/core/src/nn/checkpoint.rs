//! Checkpoints: an 8-byte magic, a JSON manifest, then every tensor as
//! little-endian f32 in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{f32_from_le, f32_le_bytes, read_container, write_container};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFFICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every head plus optimizer moments.
    Full,
    /// Encoder tensors only; the rest is discarded.
    Backbone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

/// Training randomness is re-derived from the run seed and epoch, so these
/// two numbers are the whole generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub config: AdamConfig,
    pub step_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub architecture: ModelConfig,
    pub num_classes: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    pub epoch: usize,
    pub rng_state: RngState,
    pub config_hash: Option<String>,
    pub optimizer: Option<OptimizerManifest>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl CheckpointManifest {
    pub fn payload_len(&self) -> usize {
        self.tensors
            .iter()
            .map(|t| t.offset + t.shape.iter().product::<usize>())
            .max()
            .unwrap_or(0)
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(prefix) && !t.name.contains("running_"))
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// Everything needed to resume or deploy a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: Model<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub epoch: usize,
    pub rng_state: RngState,
}

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

impl ModelState {
    pub fn new(model: Model<f32>, seed: u64) -> Self {
        Self {
            model,
            optimizer: None,
            epoch: 0,
            rng_state: RngState { seed, epoch: 0 },
        }
    }

    fn collect(&self, kind: CheckpointKind) -> Vec<(String, &Tensor<f32>)> {
        let keep = |n: &str| kind == CheckpointKind::Full || n.starts_with("backbone.");
        let model = &self.model;
        model
            .named_params()
            .into_iter()
            .chain(model.named_buffers())
            .filter(|(n, _)| keep(n))
            .collect()
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        kind: CheckpointKind,
        config_hash: Option<&str>,
        metadata: serde_json::Value,
    ) -> Result<CheckpointManifest> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for (name, t) in self.collect(kind) {
            push(name, t.shape(), t.data());
        }
        let optimizer = match (&self.optimizer, kind) {
            (Some(opt), CheckpointKind::Full) => {
                for (name, (m, v)) in &opt.moments {
                    push(format!("{M_PREFIX}{name}"), &[m.len()], m);
                    push(format!("{V_PREFIX}{name}"), &[v.len()], v);
                }
                Some(OptimizerManifest {
                    config: opt.config,
                    step_count: opt.step_count,
                })
            }
            _ => None,
        };
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_VERSION,
            kind,
            architecture: self.model.config.clone(),
            num_classes: match kind {
                CheckpointKind::Full => self.model.num_classes(),
                CheckpointKind::Backbone => None,
            },
            tensors,
            epoch: self.epoch,
            rng_state: self.rng_state,
            config_hash: config_hash.map(str::to_owned),
            optimizer,
            metadata,
        };
        let mut w = BufWriter::new(File::create(path)?);
        write_container(&mut w, CHECKPOINT_MAGIC, &serde_json::to_vec(&manifest)?)?;
        w.write_all(&f32_le_bytes(&payload))?;
        w.flush()?;
        Ok(manifest)
    }

    pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let mut r = BufReader::new(File::open(path)?);
        Self::parse_manifest(&mut r)
    }

    fn parse_manifest(r: &mut impl Read) -> Result<CheckpointManifest> {
        let header = read_container(r, CHECKPOINT_MAGIC)?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&header).map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    /// Rebuild a model from disk. Tensors absent from a backbone checkpoint
    /// keep their seeded initial values.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let mut r = BufReader::new(File::open(path)?);
        let manifest = Self::parse_manifest(&mut r)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.payload_len() * 4 {
            return Err(Error::format(format!(
                "checkpoint payload has {} bytes, manifest describes {}",
                bytes.len(),
                manifest.payload_len() * 4
            )));
        }
        let payload = f32_from_le(&bytes);

        let seed = manifest.rng_state.seed;
        let mut model = Model::<f32>::new(manifest.architecture.clone(), seed)?;
        if let Some(c) = manifest.num_classes {
            model.attach_classifier(c, seed)?;
        }
        let mut optimizer = manifest.optimizer.as_ref().map(|o| {
            let mut a = Adam::new(o.config);
            a.step_count = o.step_count;
            a
        });

        let mut expected: Vec<String> = {
            let mut slots = model.named_state_mut();
            let mut found = 0;
            for entry in &manifest.tensors {
                let len: usize = entry.shape.iter().product();
                let data = &payload[entry.offset..entry.offset + len];
                if let Some(name) = entry.name.strip_prefix(M_PREFIX).or(entry.name.strip_prefix(V_PREFIX)) {
                    let opt = optimizer
                        .as_mut()
                        .ok_or_else(|| Error::format("optimizer moments without optimizer settings"))?;
                    let slot = opt.moments.entry(name.to_owned()).or_default();
                    if entry.name.starts_with(M_PREFIX) {
                        slot.0 = data.to_vec();
                    } else {
                        slot.1 = data.to_vec();
                    }
                    continue;
                }
                let (_, t) = slots
                    .iter_mut()
                    .find(|(n, _)| *n == entry.name)
                    .ok_or_else(|| Error::format(format!("unknown tensor {}", entry.name)))?;
                if t.shape() != entry.shape.as_slice() {
                    return Err(Error::format(format!(
                        "tensor {} has shape {:?}, architecture expects {:?}",
                        entry.name,
                        entry.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(data);
                found += 1;
            }
            let names: Vec<String> = slots.iter().map(|(n, _)| n.clone()).collect();
            if manifest.kind == CheckpointKind::Full && found != names.len() {
                return Err(Error::format(format!(
                    "full checkpoint holds {found} of {} model tensors",
                    names.len()
                )));
            }
            names
        };
        expected.retain(|n| n.starts_with("backbone."));
        if let Some(missing) = expected
            .iter()
            .find(|n| !manifest.tensors.iter().any(|t| &t.name == *n))
        {
            return Err(Error::format(format!("checkpoint lacks {missing}")));
        }
        if let Some(opt) = &optimizer {
            if opt.moments.values().any(|(m, v)| m.len() != v.len()) {
                return Err(Error::format("optimizer moments are incomplete"));
            }
        }
        if !model.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite values".into()));
        }
        Ok((
            Self {
                model,
                optimizer,
                epoch: manifest.epoch,
                rng_state: manifest.rng_state,
            },
            manifest,
        ))
    }
}
