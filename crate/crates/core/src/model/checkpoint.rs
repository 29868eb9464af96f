//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPBL" | version: u32 | header_len: u32 | header: UTF-8 JSON | payloads: f32...
//! ```
//!
//! The header lists every array (name and shape) in payload order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, InputNorm, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPBL";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Optimizer bookkeeping stored alongside the model when a checkpoint is
/// written mid-training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_done: usize,
    pub global_step: u64,
    pub adam_t: u64,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub normalization: InputNorm,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingMeta>,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payloads: Vec<Vec<f32>>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&[f32]> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.payloads[i].as_slice())
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.arrays.push(ArraySpec {
            name: name.into(),
            shape,
        });
        self.payloads.push(data);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::param(format!("cannot encode checkpoint header: {e}")))?;
        let payload_len: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * payload_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.payloads {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(format_err(bytes.len(), "file shorter than the fixed preamble"));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(format_err(0, format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = PREAMBLE + header_len;
        if bytes.len() < header_end {
            return Err(format_err(bytes.len(), "truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| format_err(PREAMBLE, format!("invalid header: {e}")))?;
        let mut offset = header_end;
        let mut payloads = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let len = spec.numel() * 4;
            if bytes.len() < offset + len {
                return Err(format_err(
                    bytes.len(),
                    format!("truncated payload for array `{}` starting at byte {offset}", spec.name),
                ));
            }
            let data = bytes[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            payloads.push(data);
            offset += len;
        }
        if offset != bytes.len() {
            return Err(format_err(offset, "trailing bytes after the last array"));
        }
        Ok(Checkpoint { header, payloads })
    }

    /// Writes through a temporary sibling file so a failed write never leaves
    /// a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Model {
    /// Every trainable array plus batch-norm running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let (eps, mom) = self
            .units
            .iter()
            .find_map(|u| u.bn.as_ref().map(|b| (b.epsilon, b.momentum)))
            .unwrap_or((crate::tensor::BN_EPSILON, crate::tensor::BN_MOMENTUM));
        let mut ck = Checkpoint {
            header: CheckpointHeader {
                config: self.config,
                init_seed: self.seed,
                normalization: self.norm,
                bn_epsilon: eps,
                bn_momentum: mom,
                training: None,
                arrays: Vec::new(),
            },
            payloads: Vec::new(),
        };
        for u in &self.units {
            let ws = u.conv.weights.shape();
            ck.push_array(
                format!("{}.weight", u.name),
                vec![ws.n, ws.c, ws.h, ws.w],
                u.conv.weights.data().to_vec(),
            );
            ck.push_array(format!("{}.bias", u.name), vec![ws.n], u.conv.bias.clone());
            if let Some(bn) = &u.bn {
                let c = bn.channels();
                ck.push_array(format!("{}.bn.scale", u.name), vec![c], bn.scale.clone());
                ck.push_array(format!("{}.bn.shift", u.name), vec![c], bn.shift.clone());
                ck.push_array(format!("{}.bn.running_mean", u.name), vec![c], bn.running_mean.clone());
                ck.push_array(format!("{}.bn.running_var", u.name), vec![c], bn.running_var.clone());
            }
        }
        ck
    }

    /// Rebuilds the model the checkpoint describes. Arrays not belonging to
    /// the model (e.g. optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let h = &ck.header;
        let mut model =
            build_model(h.config, h.init_seed).map_err(|e| format_err(PREAMBLE, format!("unusable config: {e}")))?;
        model.norm = h.normalization;
        let fetch = |name: String, expect: &[usize]| -> Result<Vec<f32>> {
            let i = h
                .arrays
                .iter()
                .position(|a| a.name == name)
                .ok_or_else(|| format_err(PREAMBLE, format!("missing array `{name}`")))?;
            if h.arrays[i].shape != expect {
                return Err(format_err(
                    PREAMBLE,
                    format!("array `{name}` has shape {:?}, expected {expect:?}", h.arrays[i].shape),
                ));
            }
            Ok(ck.payloads[i].clone())
        };
        for u in &mut model.units {
            let ws = u.conv.weights.shape();
            let w = fetch(format!("{}.weight", u.name), &[ws.n, ws.c, ws.h, ws.w])?;
            u.conv.weights = Tensor4::from_vec(ws, w)?;
            u.conv.bias = fetch(format!("{}.bias", u.name), &[ws.n])?;
            if let Some(bn) = &mut u.bn {
                let c = [bn.channels()];
                bn.scale = fetch(format!("{}.bn.scale", u.name), &c)?;
                bn.shift = fetch(format!("{}.bn.shift", u.name), &c)?;
                bn.running_mean = fetch(format!("{}.bn.running_mean", u.name), &c)?;
                bn.running_var = fetch(format!("{}.bn.running_var", u.name), &c)?;
                bn.epsilon = h.bn_epsilon;
                bn.momentum = h.bn_momentum;
            }
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}
