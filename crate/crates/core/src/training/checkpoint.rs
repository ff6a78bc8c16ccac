//! Binary checkpoint format.
//!
//! ```text
//! "A2N1"                       4 bytes magic
//! u32 LE                       length of the JSON config blob
//! JSON (UTF-8)                 {"model": ModelConfig, "train": TrainConfig}
//! u64 LE                       step counter
//! u32 LE                       number of parameter arrays
//! per array, in model parameter order:
//!   u32 LE + UTF-8             name
//!   4 x u32 LE                 shape
//!   values                     f32 or f64 LE, per train.precision
//! u32 LE                       CRC-32 of every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Shape;

pub const MAGIC: &[u8; 4] = b"A2N1";

#[derive(Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Shape,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: Vec<ParamArray>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, step: u64) -> Self {
        Checkpoint {
            model: model.config().clone(),
            train: train.clone(),
            step,
            params: model
                .params()
                .iter()
                .map(|p| ParamArray {
                    name: p.name.clone(),
                    shape: p.tensor.shape(),
                    values: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = serde_json::to_vec(&ConfigBlob {
            model: self.model.clone(),
            train: self.train.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            for d in p.shape.0 {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match self.train.precision {
                Precision::F64 => p
                    .values
                    .iter()
                    .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Precision::F32 => p
                    .values
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::CorruptCheckpoint("file truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::CorruptCheckpoint(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }

        let mut r = Reader { buf: body, pos: 4 };
        let blob_len = r.u32()? as usize;
        let blob: ConfigBlob = serde_json::from_slice(r.take(blob_len)?)
            .map_err(|e| Error::CorruptCheckpoint(format!("config blob: {e}")))?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let width = match blob.train.precision {
            Precision::F64 => 8,
            Precision::F32 => 4,
        };
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let shape = Shape([
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            ]);
            let raw = r.take(shape.numel().checked_mul(width).ok_or_else(|| {
                Error::CorruptCheckpoint(format!("shape {shape} of {name} overflows"))
            })?)?;
            let values = match blob.train.precision {
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            params.push(ParamArray {
                name,
                shape,
                values,
            });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: blob.model,
            train: blob.train,
            step,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Builds the model described by the checkpoint.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::zeros(self.model.clone())?;
        self.copy_params_into(&mut model)?;
        Ok(model)
    }

    /// Loads the parameters into an existing model after checking that its
    /// configuration matches.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let fields = config_differences(model.config(), &self.model)?;
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
        self.copy_params_into(model)
    }

    fn copy_params_into(&self, model: &mut Model) -> Result<()> {
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} parameter arrays, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, saved) in store.iter_mut().zip(&self.params) {
            if p.name != saved.name || p.tensor.shape() != saved.shape {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {} {} does not match model parameter {} {}",
                    saved.name,
                    saved.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            if saved.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("{} holds non-finite values", saved.name)));
            }
            p.tensor.data_mut().copy_from_slice(&saved.values);
            p.grad = None;
        }
        Ok(())
    }
}

/// Top-level fields of two model configs that differ.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Result<Vec<String>> {
    let (va, vb) = (serde_json::to_value(a)?, serde_json::to_value(b)?);
    let (Some(oa), Some(ob)) = (va.as_object(), vb.as_object()) else {
        return Ok(Vec::new());
    };
    Ok(oa
        .iter()
        .filter(|(k, v)| ob.get(*k) != Some(v))
        .map(|(k, v)| format!("{k} (model {v}, checkpoint {})", ob.get(k).cloned().unwrap_or_default()))
        .collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Model, TrainConfig) {
        let model = Model::new(ModelConfig::desk(2, 8, 2), 1).unwrap();
        (model, TrainConfig::default())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, train) = sample();
        let ck = Checkpoint::from_model(&model, &train, 42);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.to_model().unwrap();
        for (a, b) in restored.params().iter().zip(model.params().iter()) {
            let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.tensor.data()), bits(b.tensor.data()));
        }
    }

    #[test]
    fn every_corrupted_byte_is_detected() {
        let (model, train) = sample();
        let bytes = Checkpoint::from_model(&model, &train, 7).to_bytes().unwrap();
        for pos in (0..bytes.len()).step_by(97).chain([4, 8, bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x5a;
            assert!(
                matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptCheckpoint(_))),
                "byte {pos}"
            );
        }
    }

    #[test]
    fn truncation_and_magic() {
        let (model, train) = sample();
        let bytes = Checkpoint::from_model(&model, &train, 7).to_bytes().unwrap();
        for len in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..len]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = Checkpoint::from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn mismatched_config_lists_fields() {
        let (model, train) = sample();
        let ck = Checkpoint::from_model(&model, &train, 0);
        let mut cfg = ModelConfig::desk(3, 8, 3);
        cfg.upsample_channels = 8;
        let mut other = Model::zeros(cfg).unwrap();
        match ck.load_into(&mut other) {
            Err(Error::ConfigMismatch { fields }) => {
                assert_eq!(fields.len(), 2, "{fields:?}");
                assert!(fields[0].starts_with("n_blocks"));
                assert!(fields[1].starts_with("scale"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut same = Model::zeros(model.config().clone()).unwrap();
        ck.load_into(&mut same).unwrap();
    }

    #[test]
    fn single_precision_round_trip() {
        let (mut model, mut train) = sample();
        train.precision = Precision::F32;
        super::super::round_to_precision(model.params_mut(), Precision::F32);
        let ck = Checkpoint::from_model(&model, &train, 3);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
    }
}
