//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "BURSTCK\0"
//! version  u32 LE
//! hlen     u64 LE
//! header   hlen bytes of UTF-8 JSON
//! payload  f32 LE: each tensor in header order, then normaliser mean and std
//! ```
//!
//! The header carries the variant number, model config, speaker list,
//! feature config, seed, epoch, and each tensor's name and shape. All float
//! data lives in the payload, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_layout, Model, ModelConfig, ParamStore, VariantSpec};
use crate::autodiff::Tensor;
use crate::dsp::{FeatureConfig, Normaliser};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BURSTCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normaliser: Normaliser,
    pub features: FeatureConfig,
    /// Training speakers in label order.
    pub speakers: Vec<String>,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: u8,
    model: ModelConfig,
    n_speakers: usize,
    speakers: Vec<String>,
    features: FeatureConfig,
    seed: u64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn format_err(field: &'static str, message: impl Into<String>) -> Error {
    Error::Format {
        field,
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            variant: self.model.variant.number(),
            model: self.model.config.clone(),
            n_speakers: self.model.n_speakers,
            speakers: self.speakers.clone(),
            features: self.features.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let floats = self
            .model
            .params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .chain([&self.normaliser.mean, &self.normaliser.std]);
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format_err("magic", "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(
                "version",
                format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(format_err("header", "header length exceeds file size"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| format_err("header", e.to_string()))?;
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err(format_err("payload", "length is not a multiple of 4 bytes"));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>()
            + 2;
        if expected != payload.len() / 4 {
            return Err(format_err(
                "payload",
                format!("holds {} floats, header describes {expected}", payload.len() / 4),
            ));
        }

        let variant = VariantSpec::from_number(header.variant)?;
        let mut params = ParamStore::default();
        for entry in header.tensors {
            let n = entry.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        let mut next = || floats.next().expect("payload length checked above");
        let (mean, std) = (next(), next());

        // The stored registry must be exactly what this variant builds.
        header.model.validate()?;
        let expected_layout: Vec<(String, Vec<usize>)> = param_layout(variant, &header.model, header.n_speakers)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let stored: Vec<(String, Vec<usize>)> =
            params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
        if expected_layout != stored {
            return Err(format_err(
                "tensors",
                format!("parameter layout does not match variant {}", variant.number()),
            ));
        }
        Ok(Checkpoint {
            model: Model {
                variant,
                config: header.model,
                n_speakers: header.n_speakers,
                params,
            },
            normaliser: Normaliser { mean, std },
            features: header.features,
            speakers: header.speakers,
            seed: header.seed,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_bytes(&bytes)
    }
}
