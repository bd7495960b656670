//! Single-file named-tensor container.
//!
//! Layout: `u64` little-endian header length, a JSON header padded with
//! spaces to a multiple of 8 bytes, then the raw little-endian tensor blobs.
//! The header maps each tensor name to `{dtype, shape, data_offsets}` and
//! carries a `__metadata__` object with the model configuration, vocabulary
//! and training record.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::model::{ModelConfig, ToyModel};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Base,
    Dreambooth,
    #[serde(rename = "dreambooth+ppl")]
    DreamboothPpl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub steps: usize,
    pub ppl_weight: f64,
    pub seed: u64,
    pub initial_running_loss: f64,
    pub final_running_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ToyModel,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

const METADATA: &str = "__metadata__";

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut header = Map::new();
        header.insert(
            METADATA.into(),
            json!({
                "model": self.model.config,
                "vocabulary": self.model.vocab.tokens(),
                "training": self.meta,
            }),
        );
        let mut blob = Vec::new();
        for (name, t) in &self.model.params {
            let start = blob.len();
            for &v in t.data() {
                match dtype {
                    Dtype::F64 => blob.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => blob.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            header.insert(
                name.clone(),
                json!({
                    "dtype": dtype.name(),
                    "shape": t.shape(),
                    "data_offsets": [start, blob.len()],
                }),
            );
        }
        let mut text = serde_json::to_vec(&Value::Object(header))?;
        while text.len() % 8 != 0 {
            text.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + blob.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| ck_err("file shorter than the length prefix"))?
            .try_into()
            .expect("eight bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| ck_err("header length overflows"))?;
        let header_end = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ck_err("header extends past end of file"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])?;
        let blob = &bytes[header_end..];

        let meta = header
            .get(METADATA)
            .ok_or_else(|| ck_err("missing metadata"))?;
        let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(meta["vocabulary"].clone())?;
        let training: CheckpointMeta = serde_json::from_value(meta["training"].clone())?;
        let vocab = Vocabulary::from_tokens(tokens)?;

        // shapes and names come from a fresh model of the same configuration
        let mut model = ToyModel::new(config, vocab, &mut Rng::new(0))?;
        let expected = header.len() - 1;
        if expected != model.params.len() {
            return Err(ck_err(format!(
                "{expected} tensors stored, model has {}",
                model.params.len()
            )));
        }
        for (name, slot) in model.params.iter_mut() {
            let entry = header
                .get(name)
                .ok_or_else(|| ck_err(format!("missing tensor {name}")))?;
            let dtype = match entry["dtype"].as_str() {
                Some("F64") => Dtype::F64,
                Some("F32") => Dtype::F32,
                other => return Err(ck_err(format!("{name}: unsupported dtype {other:?}"))),
            };
            let shape: Vec<usize> = serde_json::from_value(entry["shape"].clone())?;
            let offsets: [usize; 2] = serde_json::from_value(entry["data_offsets"].clone())?;
            if shape != slot.shape() {
                return Err(ck_err(format!(
                    "{name}: stored shape {shape:?}, expected {:?}",
                    slot.shape()
                )));
            }
            let [start, end] = offsets;
            let n: usize = shape.iter().product();
            if end < start || end > blob.len() || end - start != n * dtype.width() {
                return Err(ck_err(format!("{name}: bad data offsets {offsets:?}")));
            }
            let raw = &blob[start..end];
            let data: Vec<f64> = match dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            *slot = Tensor::new(shape, data)?;
        }
        Ok(Self {
            model,
            meta: training,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes(Dtype::F64)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_ck() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 8,
            heads: 2,
            head_dim: 4,
            d_cond: 8,
            time_dim: 8,
            ..ModelConfig::default()
        };
        Checkpoint {
            model: ToyModel::new(cfg, Vocabulary::default(), &mut Rng::new(9)).unwrap(),
            meta: CheckpointMeta {
                mode: TrainMode::DreamboothPpl,
                steps: 12,
                ppl_weight: 0.75,
                seed: 9,
                initial_running_loss: 1.0 / 3.0,
                final_running_loss: 0.1,
            },
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample_ck();
        let a = ck.to_bytes(Dtype::F64).unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_bytes(Dtype::F64).unwrap(), a);
        assert_eq!(u64::from_le_bytes(a[..8].try_into().unwrap()) % 8, 0);
    }

    #[test]
    fn f32_storage_loads() {
        let ck = sample_ck();
        let back = Checkpoint::from_bytes(&ck.to_bytes(Dtype::F32).unwrap()).unwrap();
        for (k, t) in &ck.model.params {
            assert!(t.max_abs_diff(&back.model.params[k]) < 1e-6);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample_ck().to_bytes(Dtype::F64).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..4]), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut big = bytes.clone();
        big[..8].copy_from_slice(&(1u64 << 40).to_le_bytes());
        assert!(Checkpoint::from_bytes(&big).is_err());
    }
}
