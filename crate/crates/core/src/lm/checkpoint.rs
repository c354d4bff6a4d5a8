//! Checkpoint file: one JSON header line, then raw little-endian `f32`
//! arrays in the order the header lists them.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::optim::AdamState;
use super::params::{Layout, ModelParams, TrainableFlags};
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "decipher-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    config: ModelConfig,
    step: usize,
    boundary: usize,
    trainable: TrainableFlags,
    optimizer_step: Option<usize>,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub step: usize,
    /// Free-form run metadata (regime, seeds, loss traces, ...).
    pub meta: serde_json::Value,
}

fn write_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], len: usize, at: &mut usize) -> Result<Vec<f32>> {
    let end = *at + 4 * len;
    let chunk = bytes
        .get(*at..end)
        .ok_or_else(|| Error::CheckpointMismatch("truncated array data".into()))?;
    *at = end;
    Ok(chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.params.data.len();
        let mut arrays = vec![ArrayEntry {
            name: "params".into(),
            len: n,
        }];
        if self.optimizer.is_some() {
            arrays.push(ArrayEntry {
                name: "adam_m".into(),
                len: n,
            });
            arrays.push(ArrayEntry {
                name: "adam_v".into(),
                len: n,
            });
        }
        let header = Header {
            schema: CHECKPOINT_SCHEMA.into(),
            config: self.params.config.clone(),
            step: self.step,
            boundary: self.params.boundary,
            trainable: self.params.trainable,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            arrays,
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        write_f32s(&mut out, &self.params.data);
        if let Some(o) = &self.optimizer {
            write_f32s(&mut out, &o.m);
            write_f32s(&mut out, &o.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CheckpointMismatch("missing header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])?;
        if header.schema != CHECKPOINT_SCHEMA {
            return Err(Error::CheckpointMismatch(format!("unknown schema {}", header.schema)));
        }
        let layout = Layout::new(&header.config);
        let mut at = nl + 1;
        let mut params = None;
        let mut m = None;
        let mut v = None;
        for entry in &header.arrays {
            if entry.len != layout.total {
                return Err(Error::CheckpointMismatch(format!(
                    "array {} has {} values, config implies {}",
                    entry.name, entry.len, layout.total
                )));
            }
            let data = read_f32s(bytes, entry.len, &mut at)?;
            match entry.name.as_str() {
                "params" => params = Some(data),
                "adam_m" => m = Some(data),
                "adam_v" => v = Some(data),
                other => return Err(Error::CheckpointMismatch(format!("unknown array {other}"))),
            }
        }
        if at != bytes.len() {
            return Err(Error::CheckpointMismatch("trailing bytes".into()));
        }
        let data = params.ok_or_else(|| Error::CheckpointMismatch("no params array".into()))?;
        let optimizer = match (m, v, header.optimizer_step) {
            (Some(m), Some(v), Some(step)) => Some(AdamState { m, v, step }),
            (None, None, None) => None,
            _ => return Err(Error::CheckpointMismatch("incomplete optimizer state".into())),
        };
        Ok(Checkpoint {
            params: ModelParams {
                config: header.config,
                layout,
                boundary: header.boundary,
                trainable: header.trainable,
                data,
            },
            optimizer,
            step: header.step,
            meta: header.meta,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn sample() -> Checkpoint {
        let mut params = ModelParams::init(ModelConfig::tiny(24), 12, 5).unwrap();
        params.trainable = TrainableFlags::TARGET_ONLY;
        let mut opt = AdamState::new(params.num_params());
        opt.m[3] = -1.5e-7;
        opt.v[4] = f32::MIN_POSITIVE;
        opt.step = 17;
        Checkpoint {
            params,
            optimizer: Some(opt),
            step: 17,
            meta: serde_json::json!({"regime": "joint"}),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut ck = sample();
        ck.optimizer = None;
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
