//! Checkpoint serialization.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! 8 bytes   magic "CPIPCKPT"
//! 4 bytes   schema version (u32)
//! 8 bytes   header length in bytes (u64)
//! N bytes   UTF-8 JSON header: model spec, class names, preprocessing
//!           snapshot, config snapshot, tensor directory (name/shape/offset)
//! M bytes   contiguous f32 tensor blobs, in directory order
//! 32 bytes  SHA-256 of everything above
//! ```
//!
//! Loading verifies the digest before constructing anything, so a corrupt
//! or truncated file never yields a partial model. A reloaded checkpoint
//! reproduces eval-mode forward passes bit-identically.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::annotations::DatasetMode;
use crate::audio::MixdownPolicy;
use crate::dsp::PreprocessConfig;
use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelSpec, Tensor};
use crate::optim::{OptimState, OptimizerKind, SlotView};

const MAGIC: &[u8; 8] = b"CPIPCKPT";
pub const SCHEMA_VERSION: u32 = 1;

/// Channel-reduction policy in serializable form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixdownSpec {
    Average,
    Select { channel: usize },
}

impl MixdownSpec {
    pub fn policy(self) -> MixdownPolicy {
        match self {
            MixdownSpec::Average => MixdownPolicy::Average,
            MixdownSpec::Select { channel } => MixdownPolicy::SelectChannel(channel),
        }
    }
}

/// Everything inference needs to reproduce training preprocessing and
/// window labeling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessSnapshot {
    pub sample_rate: u32,
    pub segment_len_s: f64,
    pub mixdown: MixdownSpec,
    pub pipeline: PreprocessConfig,
    pub dataset_mode: DatasetMode,
    pub overlap_threshold: f64,
}

impl PreprocessSnapshot {
    /// Samples per window at the training rate.
    pub fn segment_samples(&self) -> usize {
        (self.segment_len_s * self.sample_rate as f64).round() as usize
    }
}

/// Serializable optimizer state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerMeta {
    pub kind: String,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr0: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub epochs_completed: u64,
    /// (parameter name, Adam step count) for parameters with live slots.
    pub adam_steps: Vec<(String, u64)>,
}

/// A complete training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub class_names: Vec<String>,
    pub preprocess: PreprocessSnapshot,
    /// Resolved configuration snapshot, serialized.
    pub config_yaml: String,
    pub epoch: u64,
    pub best_metric: f64,
    pub optimizer: Option<(OptimizerMeta, Vec<OptimSlotData>)>,
}

/// Owned copy of one optimizer slot, aligned with the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimSlotData {
    None,
    Sgd { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, step: u64 },
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    model_spec: ModelSpec,
    class_names: Vec<String>,
    preprocess: PreprocessSnapshot,
    config_yaml: String,
    epoch: u64,
    best_metric: f64,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Captures the live optimizer state into the checkpoint.
    pub fn with_optimizer(mut self, state: &OptimState, model: &Model) -> Checkpoint {
        let (kind, momentum, beta1, beta2, eps) = match state.kind {
            OptimizerKind::Sgd { momentum } => ("sgd", momentum, 0.0, 0.0, 0.0),
            OptimizerKind::Adam { beta1, beta2, eps } => ("adam", 0.0, beta1, beta2, eps),
        };
        let mut adam_steps = Vec::new();
        let mut slots = Vec::with_capacity(model.params.len());
        for (i, p) in model.params.iter().enumerate() {
            slots.push(match state.slot_view(i) {
                None => OptimSlotData::None,
                Some(SlotView::Sgd { velocity }) => {
                    OptimSlotData::Sgd { velocity: velocity.to_vec() }
                }
                Some(SlotView::Adam { m, v, step }) => {
                    adam_steps.push((p.name.clone(), step));
                    OptimSlotData::Adam { m: m.to_vec(), v: v.to_vec(), step }
                }
            });
        }
        self.optimizer = Some((
            OptimizerMeta {
                kind: kind.into(),
                momentum,
                beta1,
                beta2,
                eps,
                lr0: state.lr0,
                gamma: state.gamma,
                weight_decay: state.weight_decay,
                epochs_completed: state.epochs_completed(),
                adam_steps,
            },
            slots,
        ));
        self
    }

    /// Rebuilds an [`OptimState`] from the stored optimizer section.
    pub fn restore_optimizer(&self) -> Option<OptimState> {
        let (meta, slots) = self.optimizer.as_ref()?;
        let kind = match meta.kind.as_str() {
            "sgd" => OptimizerKind::Sgd { momentum: meta.momentum },
            _ => OptimizerKind::Adam { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps },
        };
        let mut state = OptimState::new(kind, meta.lr0, meta.gamma, self.model.params.len());
        state.weight_decay = meta.weight_decay;
        state.set_epochs_completed(meta.epochs_completed);
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                OptimSlotData::None => {}
                OptimSlotData::Sgd { velocity } => state.set_slot_sgd(i, velocity.clone()),
                OptimSlotData::Adam { m, v, step } => {
                    state.set_slot_adam(i, m.clone(), v.clone(), *step)
                }
            }
        }
        Some(state)
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    // Assemble the tensor directory: parameters, batch-norm buffers, then
    // optimizer moments.
    let mut entries: Vec<TensorEntry> = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[f32], blobs: &mut Vec<u8>, entries: &mut Vec<TensorEntry>| {
        entries.push(TensorEntry {
            name,
            shape,
            offset: blobs.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    };

    for p in &ckpt.model.params {
        push(p.name.clone(), p.value.shape().to_vec(), p.value.data(), &mut blobs, &mut entries);
    }
    for b in &ckpt.model.bn_buffers {
        push(format!("{}.running_mean", b.name), vec![b.mean.len()], &b.mean, &mut blobs, &mut entries);
        push(format!("{}.running_var", b.name), vec![b.var.len()], &b.var, &mut blobs, &mut entries);
    }
    if let Some((_, slots)) = &ckpt.optimizer {
        for (slot, p) in slots.iter().zip(&ckpt.model.params) {
            match slot {
                OptimSlotData::None => {}
                OptimSlotData::Sgd { velocity } => {
                    push(format!("optim.vel.{}", p.name), vec![velocity.len()], velocity, &mut blobs, &mut entries);
                }
                OptimSlotData::Adam { m, v, .. } => {
                    push(format!("optim.m.{}", p.name), vec![m.len()], m, &mut blobs, &mut entries);
                    push(format!("optim.v.{}", p.name), vec![v.len()], v, &mut blobs, &mut entries);
                }
            }
        }
    }

    let header = Header {
        model_spec: ckpt.model.spec.clone(),
        class_names: ckpt.class_names.clone(),
        preprocess: ckpt.preprocess.clone(),
        config_yaml: ckpt.config_yaml.clone(),
        epoch: ckpt.epoch,
        best_metric: ckpt.best_metric,
        optimizer: ckpt.optimizer.as_ref().map(|(meta, _)| meta.clone()),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;

    let mut out = Vec::with_capacity(20 + header_json.len() + blobs.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads and verifies a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[0..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {version} (this build reads {SCHEMA_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize.checked_add(header_len).ok_or_else(|| Error::Checkpoint("bad header length".into()))?;
    if bytes.len() < header_end + 32 {
        return Err(Error::Checkpoint("truncated header".into()));
    }

    let digest_start = bytes.len() - 32;
    let expected = Sha256::digest(&bytes[..digest_start]);
    if expected.as_slice() != &bytes[digest_start..] {
        return Err(Error::Checkpoint("integrity check failed (corrupt file)".into()));
    }

    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let blob_bytes: usize = header.tensors.iter().map(|t| t.len as usize * 4).sum();
    if digest_start != header_end + blob_bytes {
        return Err(Error::Checkpoint("truncated tensor data".into()));
    }
    let blobs = &bytes[header_end..digest_start];

    let read_tensor = |entry: &TensorEntry| -> Result<Vec<f32>> {
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 4;
        if end > blobs.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` out of bounds", entry.name)));
        }
        Ok(blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    // Rebuild the skeleton from the spec, then overwrite every tensor; this
    // cross-checks names and shapes against the architecture.
    let mut model = build_model(&header.model_spec, 0)
        .map_err(|e| Error::Checkpoint(format!("invalid model spec: {e}")))?;
    let find = |name: &str| -> Result<&TensorEntry> {
        header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    };
    for p in &mut model.params {
        let entry = find(&p.name)?;
        if entry.shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                p.name,
                entry.shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::from_vec(&entry.shape, read_tensor(entry)?)?;
        p.grad = None;
        p.trainable = true;
    }
    for b in &mut model.bn_buffers {
        b.mean = read_tensor(find(&format!("{}.running_mean", b.name))?)?;
        b.var = read_tensor(find(&format!("{}.running_var", b.name))?)?;
    }

    let optimizer = match header.optimizer {
        None => None,
        Some(meta) => {
            let mut slots = Vec::with_capacity(model.params.len());
            for p in &model.params {
                let slot = if meta.kind == "sgd" {
                    match header.tensors.iter().find(|t| t.name == format!("optim.vel.{}", p.name)) {
                        Some(entry) => OptimSlotData::Sgd { velocity: read_tensor(entry)? },
                        None => OptimSlotData::None,
                    }
                } else {
                    let m = header.tensors.iter().find(|t| t.name == format!("optim.m.{}", p.name));
                    let v = header.tensors.iter().find(|t| t.name == format!("optim.v.{}", p.name));
                    match (m, v) {
                        (Some(m), Some(v)) => {
                            let step = meta
                                .adam_steps
                                .iter()
                                .find(|(n, _)| n == &p.name)
                                .map_or(0, |(_, s)| *s);
                            OptimSlotData::Adam { m: read_tensor(m)?, v: read_tensor(v)?, step }
                        }
                        _ => OptimSlotData::None,
                    }
                };
                slots.push(slot);
            }
            Some((meta, slots))
        }
    };

    Ok(Checkpoint {
        model,
        class_names: header.class_names,
        preprocess: header.preprocess,
        config_yaml: header.config_yaml,
        epoch: header.epoch,
        best_metric: header.best_metric,
        optimizer,
    })
}
