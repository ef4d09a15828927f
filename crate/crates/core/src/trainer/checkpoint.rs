//! Binary checkpoint format.
//!
//! ```text
//! "VFDC" | version u32 LE | config length u64 LE | config JSON (UTF-8)
//! then per tensor: name length u16 LE | name | rank u8 | dims u64 LE × rank | f32 LE values
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delta_model::{DeltaModel, ModelConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"VFDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: expected \"VFDC\"")]
    BadMagic,
    #[error("unsupported version {version} at offset 4 (expected {VERSION})")]
    UnsupportedVersion { version: u32 },
    #[error("truncated file at offset {offset}: expected {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("invalid config JSON at offset {offset}: {message}")]
    Config { offset: u64, message: String },
    #[error("invalid tensor record at offset {offset}: {message}")]
    Tensor { offset: u64, message: String },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("checkpoint max_len {checkpoint} does not match runtime max_len {runtime}")]
    MaxLenMismatch { checkpoint: usize, runtime: usize },
}

/// Everything besides the weights needed to reproduce predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Context window the model was trained with.
    pub k: usize,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: DeltaModel<f32>,
}

impl Checkpoint {
    /// Fail when the model was built for a different sequence length.
    pub fn check_max_len(&self, runtime: usize) -> Result<(), CheckpointError> {
        let checkpoint = self.meta.model.encoder.max_len;
        if checkpoint != runtime {
            return Err(CheckpointError::MaxLenMismatch { checkpoint, runtime });
        }
        Ok(())
    }
}

pub fn to_bytes(meta: &CheckpointMeta, model: &DeltaModel<f32>) -> Vec<u8> {
    let config = serde_json::to_vec(meta).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    model.visit(|name, t| {
        let name = name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

pub fn save_checkpoint(meta: &CheckpointMeta, model: &DeltaModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(meta, model))?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos as u64,
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { version });
    }
    let len = u64::from_le_bytes(r.array("config length")?);
    let config_offset = r.offset();
    let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated {
        offset: config_offset,
        what: "config JSON",
    })?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(len, "config JSON")?).map_err(|e| CheckpointError::Config {
            offset: config_offset,
            message: e.to_string(),
        })?;
    let mut model = DeltaModel::<f32>::init(meta.model, 0).map_err(|e| CheckpointError::Config {
        offset: config_offset,
        message: e.to_string(),
    })?;

    let mut tensors: BTreeMap<String, (u64, Tensor<f32>)> = BTreeMap::new();
    while r.pos < buf.len() {
        let start = r.offset();
        let name_len = u16::from_le_bytes(r.array("tensor name length")?) as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Tensor {
                offset: start,
                message: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.array::<1>("tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array("tensor dimension")?);
            shape.push(usize::try_from(d).map_err(|_| CheckpointError::Tensor {
                offset: start,
                message: format!("dimension {d} too large"),
            })?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Tensor {
                offset: start,
                message: "tensor size overflows".into(),
            })?;
        let data = r
            .take(count, "tensor values")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        if tensors.insert(name.clone(), (start, Tensor { shape, data })).is_some() {
            return Err(CheckpointError::Tensor {
                offset: start,
                message: format!("duplicate tensor `{name}`"),
            });
        }
    }

    let mut failure = None;
    model.visit_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(&name) {
            None => failure = Some(CheckpointError::MissingTensor(name)),
            Some((offset, loaded)) if loaded.shape != t.shape => {
                failure = Some(CheckpointError::Tensor {
                    offset,
                    message: format!("`{name}` has shape {:?}, config implies {:?}", loaded.shape, t.shape),
                })
            }
            Some((_, loaded)) => *t = loaded,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some((name, (offset, _))) = tensors.into_iter().next() {
        return Err(CheckpointError::Tensor {
            offset,
            message: format!("unexpected tensor `{name}`"),
        });
    }
    Ok(Checkpoint { meta, model })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::change_builder::Variant;
    use crate::encoder::EncoderConfig;

    fn sample(variant: Variant) -> (CheckpointMeta, DeltaModel<f32>) {
        let enc = EncoderConfig {
            vocab_size: 261,
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_len: 12,
        };
        let cfg = ModelConfig::new(variant, enc);
        let meta = CheckpointMeta {
            model: cfg,
            k: 3,
            vocab: Vocabulary::bytes_only(),
        };
        (meta, DeltaModel::init(cfg, 11).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let (meta, model) = sample(v);
            let bytes = to_bytes(&meta, &model);
            let ck = from_bytes(&bytes).unwrap();
            assert_eq!(ck.meta, meta);
            let mut a = Vec::new();
            let mut b = Vec::new();
            model.visit(|_, t| a.extend(t.data.iter().map(|x| x.to_bits())));
            ck.model.visit(|_, t| b.extend(t.data.iter().map(|x| x.to_bits())));
            assert_eq!(a, b);
            assert_eq!(to_bytes(&ck.meta, &ck.model), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let (meta, model) = sample(Variant::CodeConcat);
        let bytes = to_bytes(&meta, &model);
        assert_eq!(&bytes[..4], b"VFDC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(json["k"], 3);
        let name_len = u16::from_le_bytes(bytes[16 + len..18 + len].try_into().unwrap()) as usize;
        assert_eq!(&bytes[18 + len..18 + len + name_len], b"encoder.tok_emb");
        assert_eq!(bytes[18 + len + name_len], 2);
    }

    #[test]
    fn corrupt_inputs_name_offsets() {
        let (meta, model) = sample(Variant::EmbedSubtractDuo);
        let bytes = to_bytes(&meta, &model);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::UnsupportedVersion { version: 9 })));

        let cut = bytes.len() - 3;
        match from_bytes(&bytes[..cut]) {
            Err(CheckpointError::Truncated { offset, .. }) => assert!(offset < cut as u64),
            other => panic!("{other:?}"),
        }
        assert!(from_bytes(&bytes[..10]).unwrap_err().to_string().contains("offset 8"));
        assert!(matches!(from_bytes(b""), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn max_len_mismatch_is_rejected() {
        let (meta, model) = sample(Variant::RawGitDiff);
        let ck = from_bytes(&to_bytes(&meta, &model)).unwrap();
        assert!(ck.check_max_len(12).is_ok());
        assert!(matches!(
            ck.check_max_len(64),
            Err(CheckpointError::MaxLenMismatch { checkpoint: 12, runtime: 64 })
        ));
    }
}
