//! Versioned, self-describing checkpoint container.
//!
//! Layout: 8-byte magic `VARCKPT\0`, little-endian `u32` format version,
//! little-endian `u64` header length, a JSON header, then every array listed
//! in the header as little-endian `f64` values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Real};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VARCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_ARRAY: &str = "params";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub seed: u64,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    pub arrays: Vec<ArrayInfo>,
    /// Free-form provenance (training configuration and the like).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub arrays: Vec<(String, Vec<f64>)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ModelParams<T>) -> Self {
        Self {
            model: *params.config(),
            seed: params.seed(),
            step: 0,
            arrays: vec![(PARAMS_ARRAY.to_string(), params.values().iter().map(|v| v.f64()).collect())],
            meta: serde_json::Value::Null,
        }
    }

    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn params<T: Real>(&self) -> Result<ModelParams<T>> {
        let values = self
            .array(PARAMS_ARRAY)
            .ok_or_else(|| Error::Format("checkpoint has no parameter array".into()))?;
        ModelParams::from_values(self.model, self.seed, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model,
            seed: self.seed,
            step: self.step,
            arrays: self.arrays.iter().map(|(name, v)| ArrayInfo { name: name.clone(), len: v.len() }).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, values) in &self.arrays {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let header_len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; header_len];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for info in header.arrays {
            let mut values = Vec::with_capacity(info.len);
            for _ in 0..info.len {
                r.read_exact(&mut b8)?;
                values.push(f64::from_le_bytes(b8));
            }
            arrays.push((info.name, values));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint arrays", rest.len())));
        }
        Ok(Self { model: header.model, seed: header.seed, step: header.step, arrays, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { bins: 5, dim: 8, heads: 2, kernel: 3, layers: 1 }
    }

    #[test]
    fn round_trip_preserves_params() {
        let params = ModelParams::<f32>::init(tiny(), 11).unwrap();
        let mut ckpt = Checkpoint::from_params(&params);
        ckpt.step = 17;
        ckpt.arrays.push(("extra".into(), vec![1.5, -2.0]));
        ckpt.meta = serde_json::json!({"note": "x"});
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let restored: ModelParams<f32> = back.params().unwrap();
        assert_eq!(restored.values(), params.values());
    }

    #[test]
    fn rejects_corrupt_files() {
        let params = ModelParams::<f64>::init(tiny(), 1).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_params(&params).write_to(&mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read_from(&mut bad_magic.as_slice()).is_err());
        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(Checkpoint::read_from(&mut bad_version.as_slice()).is_err());
        let truncated = &buf[..buf.len() - 4];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(Checkpoint::read_from(&mut trailing.as_slice()).is_err());
    }
}
