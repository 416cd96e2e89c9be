//! Single-file checkpoints.
//!
//! Layout: the magic bytes `VISTACKP`, a little-endian u64 giving the length
//! of a UTF-8 JSON metadata block, the metadata, then every tensor as raw
//! little-endian f32 in row-major order. The metadata carries the model
//! config, vocabulary, a table of contents (name, shape, offset, trainable)
//! and, for checkpoints written mid-training, the trainer config, step and
//! AdamW moment buffers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Layout, ModelParams};
use crate::tokenizer::Vocab;
use crate::train::{OptimizerState, Stage, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"VISTACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TocEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// In f32 values from the start of the data block.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingMeta {
    config: TrainConfig,
    step: usize,
    adam_t: u64,
    /// Offsets of the first and second moment buffers.
    m_offset: usize,
    v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    model_config: ModelConfig,
    vocab: Vocab,
    completed_stages: Vec<Stage>,
    arrays: Vec<TocEntry>,
    training: Option<TrainingMeta>,
}

/// Trainer state stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: usize,
    pub opt: OptimizerState<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Stages run to completion, oldest first.
    pub completed_stages: Vec<Stage>,
    pub training: Option<TrainingState>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Checkpoint { model, completed_stages: Vec::new(), training: None }
    }

    /// Snapshot of a trainer; a finished trainer is recorded as a
    /// completed stage.
    pub fn from_trainer(trainer: &Trainer<f32>, mut completed_stages: Vec<Stage>) -> Self {
        if trainer.done() {
            completed_stages.push(trainer.cfg.stage);
        }
        Checkpoint {
            model: trainer.model.clone(),
            completed_stages,
            training: Some(TrainingState { config: trainer.cfg.clone(), step: trainer.step, opt: trainer.opt.clone() }),
        }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }

    pub fn toc(&self) -> Vec<TocEntry> {
        let p = &self.model.params;
        p.layout()
            .ids()
            .map(|id| {
                let s = p.layout().spec(id);
                TocEntry { name: s.name.clone(), shape: s.shape.clone(), offset: s.offset, trainable: p.is_trainable(id) }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.model.params.data().len();
        let training = self.training.as_ref().map(|t| TrainingMeta {
            config: t.config.clone(),
            step: t.step,
            adam_t: t.opt.t,
            m_offset: n,
            v_offset: 2 * n,
        });
        let meta = Metadata {
            format_version: FORMAT_VERSION,
            model_config: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            completed_stages: self.completed_stages.clone(),
            arrays: self.toc(),
            training,
        };
        let json = serde_json::to_vec(&meta).expect("metadata always serializes");
        let values = n * if self.training.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(16 + json.len() + 4 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(self.model.params.data());
        if let Some(t) = &self.training {
            put(&t.opt.m);
            put(&t.opt.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let meta_end = 16usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated metadata"))?;
        let meta: Metadata =
            serde_json::from_slice(&bytes[16..meta_end]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        meta.model_config.validate()?;
        let layout = Layout::new(&meta.model_config)?;
        if meta.arrays.len() != layout.arrays().len() {
            return Err(Error::Checkpoint(format!("{} arrays stored, model needs {}", meta.arrays.len(), layout.arrays().len())));
        }
        for (e, s) in meta.arrays.iter().zip(layout.arrays()) {
            if e.name != s.name || e.shape != s.shape || e.offset != s.offset {
                return Err(Error::Checkpoint(format!("array {} does not match the model layout", e.name)));
            }
        }
        let n = layout.total();
        let blocks = if meta.training.is_some() { 3 } else { 1 };
        let blob = &bytes[meta_end..];
        if blob.len() != 4 * n * blocks {
            return Err(Error::Checkpoint(format!("data block has {} bytes, expected {}", blob.len(), 4 * n * blocks)));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let trainable = meta.arrays.iter().map(|e| e.trainable).collect();
        let params = ModelParams::from_parts(layout, floats[..n].to_vec(), trainable)?;
        let model = Model::from_params(meta.model_config, meta.vocab, params)?;
        let training = match meta.training {
            None => None,
            Some(t) => {
                if t.m_offset != n || t.v_offset != 2 * n {
                    return Err(err("optimizer buffers at unexpected offsets"));
                }
                let opt = OptimizerState { t: t.adam_t, m: floats[n..2 * n].to_vec(), v: floats[2 * n..].to_vec() };
                Some(TrainingState { config: t.config, step: t.step, opt })
            }
        };
        Ok(Checkpoint { model, completed_stages: meta.completed_stages, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A trainer that continues exactly where this checkpoint stopped.
    pub fn resume_trainer(self) -> Result<Trainer<f32>> {
        let t = self.training.ok_or_else(|| Error::Checkpoint("checkpoint holds no trainer state".into()))?;
        Trainer::resume(self.model, t.config, t.opt, t.step)
    }
}

/// Lowercase hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(digest(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}
