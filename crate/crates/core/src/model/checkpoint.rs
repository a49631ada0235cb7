//! Checkpoint files: one JSON header line (config, step, dtype, byte order,
//! tensor manifest) followed by raw little-endian `f32` tensor data. The
//! parameter group comes first, then the optional optimizer moment groups,
//! each in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamSettings, AdamW};
use super::{ModelConfig, Parameters};
use crate::error::{LabError, Result};

pub const CHECKPOINT_FORMAT: &str = "cotlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: Parameters<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    settings: AdamSettings,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    step: usize,
    dtype: String,
    byte_order: String,
    groups: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn append_group(out: &mut Vec<u8>, params: &Parameters<f32>) {
    for (_, t) in params.tensors() {
        for &x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            step: self.step,
            dtype: "f32".into(),
            byte_order: "little-endian".into(),
            groups: if self.optimizer.is_some() {
                vec!["params".into(), "adam_m".into(), "adam_v".into()]
            } else {
                vec!["params".into()]
            },
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                settings: o.settings,
                t: o.t,
            }),
            tensors: self
                .params
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        append_group(&mut out, &self.params);
        if let Some(o) = &self.optimizer {
            append_group(&mut out, &o.m);
            append_group(&mut out, &o.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| LabError::format(origin, reason);
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        if header.dtype != "f32" || header.byte_order != "little-endian" {
            return Err(bad(format!(
                "unsupported encoding {} / {}",
                header.dtype, header.byte_order
            )));
        }
        let template = Parameters::<f32>::init(&header.config)?;
        let manifest: Vec<(String, Vec<usize>)> = template
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let declared: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect();
        if manifest != declared {
            return Err(bad("tensor manifest does not match the config".into()));
        }
        let group_len: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let payload = &bytes[split + 1..];
        if payload.len() != header.groups.len() * group_len * 4 {
            return Err(bad(format!(
                "expected {} payload bytes, found {}",
                header.groups.len() * group_len * 4,
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut read_group = || {
            let mut p = template.clone();
            for (_, mut t) in p.tensors_mut() {
                for x in t.iter_mut() {
                    *x = floats.next().expect("payload length checked");
                }
            }
            p
        };
        let params = read_group();
        let optimizer = match header.optimizer {
            Some(o) if header.groups.len() == 3 => {
                let m = read_group();
                let v = read_group();
                Some(AdamW {
                    settings: o.settings,
                    m,
                    v,
                    t: o.t,
                })
            }
            None if header.groups.len() == 1 => None,
            _ => return Err(bad("optimizer header and groups disagree".into())),
        };
        Ok(Checkpoint {
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
