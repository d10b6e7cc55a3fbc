//! Binary checkpoint files.
//!
//! All integers little endian.
//!
//! | field          | encoding                                            |
//! |----------------|-----------------------------------------------------|
//! | magic          | 8 bytes `AUXCTCK\0`                                 |
//! | version        | u32, currently 1                                    |
//! | dtype          | u8, bytes per value (4 or 8)                        |
//! | config         | u32 length + UTF-8 JSON of the model config         |
//! | config hash    | 32 bytes, SHA-256 of the config JSON                |
//! | label-map hash | u32 length + UTF-8 hex string (may be empty)        |
//! | step, epoch    | u64, u64                                            |
//! | tensors        | u32 count, then per tensor: u16 name length, name,  |
//! |                | u8 rank, u32 per dim, values                        |
//! | checksum       | 32 bytes, SHA-256 of everything above               |

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::net::{param_shapes, Model, ModelConfig, Real, Tensor};

const MAGIC: &[u8; 8] = b"AUXCTCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch (file is corrupt)")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("stored config hash does not match the stored config")]
    ConfigHash,
    #[error("checkpoint holds {found}-byte values, expected {expected}")]
    Dtype { found: u8, expected: usize },
    #[error("label map hash mismatch: checkpoint {found}, expected {expected}")]
    LabelMap { found: String, expected: String },
    #[error("checkpoint {} a row head, but the requested mode {}", if *.has_row_head { "has" } else { "lacks" }, if *.has_row_head { "is baseline" } else { "is proposed" })]
    HeadMismatch { has_row_head: bool },
    #[error("tensor {index} ({name}) has shape {found:?}, config implies {expected:?}")]
    Shape {
        index: usize,
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("bad config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Checks applied when loading.
#[derive(Debug, Clone, Default)]
pub struct LoadExpectations<'a> {
    pub label_map_hash: Option<&'a str>,
    /// `Some(true)` requires a row head, `Some(false)` forbids one.
    pub row_head: Option<bool>,
}

pub fn config_hash(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

pub fn to_bytes<F: Real>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(F::BYTES as u8);
    let json = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&Sha256::digest(&json));
    out.extend_from_slice(&(model.label_map_hash.len() as u32).to_le_bytes());
    out.extend_from_slice(model.label_map_hash.as_bytes());
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&model.epoch.to_le_bytes());
    let named = model.params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes<F: Real>(
    bytes: &[u8],
    expect: &LoadExpectations<'_>,
) -> Result<Model<F>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(CheckpointError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let dtype = r.u8()?;
    if dtype as usize != F::BYTES {
        return Err(CheckpointError::Dtype {
            found: dtype,
            expected: F::BYTES,
        });
    }
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    if Sha256::digest(json).as_slice() != r.take(32)? {
        return Err(CheckpointError::ConfigHash);
    }
    let config: ModelConfig =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let len = r.u32()? as usize;
    let label_map_hash = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    if let Some(expected) = expect.label_map_hash {
        if expected != label_map_hash {
            return Err(CheckpointError::LabelMap {
                found: label_map_hash,
                expected: expected.to_string(),
            });
        }
    }
    if let Some(want) = expect.row_head {
        if want != config.aux_head {
            return Err(CheckpointError::HeadMismatch {
                has_row_head: config.aux_head,
            });
        }
    }
    let step = r.u64()?;
    let epoch = r.u64()?;

    let mut model =
        Model::<F>::new(config.clone()).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let shapes = param_shapes(&config);
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(CheckpointError::Config(format!(
            "{count} tensors stored, config implies {}",
            shapes.len()
        )));
    }
    let mut targets = model.params.tensors_mut();
    for (index, expected) in shapes.into_iter().enumerate() {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != expected {
            return Err(CheckpointError::Shape {
                index,
                name,
                found: shape,
                expected,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * F::BYTES)?;
        let t: &mut Tensor<F> = targets[index];
        for (dst, chunk) in t.data.iter_mut().zip(raw.chunks_exact(F::BYTES)) {
            *dst = F::read_le(chunk);
        }
    }
    drop(targets);
    if r.pos != body.len() {
        return Err(CheckpointError::Config("trailing bytes after tensors".into()));
    }
    model.step = step;
    model.epoch = epoch;
    model.label_map_hash = label_map_hash;
    Ok(model)
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<F: Real>(
    path: impl AsRef<Path>,
    expect: &LoadExpectations<'_>,
) -> Result<Model<F>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes, expect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphs::Bitmap;

    fn model(aux: bool) -> Model<f32> {
        let mut m = Model::<f32>::new(ModelConfig::standard(6, 3, aux, 17))
            .unwrap()
            .with_label_map_hash("abc123");
        m.step = 41;
        m.epoch = 2;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model(true);
        let back: Model<f32> = from_bytes(&to_bytes(&m), &LoadExpectations::default()).unwrap();
        assert_eq!(back, m);
        let img = Bitmap::new(32, 64, (0..2048).map(|i| (i % 251) as u8).collect());
        assert_eq!(back.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn guards() {
        let bytes = to_bytes(&model(false));
        let strict = LoadExpectations {
            label_map_hash: Some("other"),
            row_head: None,
        };
        assert!(matches!(
            from_bytes::<f32>(&bytes, &strict),
            Err(CheckpointError::LabelMap { .. })
        ));
        let proposed = LoadExpectations {
            label_map_hash: Some("abc123"),
            row_head: Some(true),
        };
        assert!(matches!(
            from_bytes::<f32>(&bytes, &proposed),
            Err(CheckpointError::HeadMismatch { has_row_head: false })
        ));
        assert!(matches!(
            from_bytes::<f64>(&bytes, &LoadExpectations::default()),
            Err(CheckpointError::Dtype { found: 4, expected: 8 })
        ));

        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x10;
        assert!(matches!(
            from_bytes::<f32>(&corrupt, &LoadExpectations::default()),
            Err(CheckpointError::Checksum)
        ));

        let mut future = bytes.clone();
        future[8] = 9;
        assert!(matches!(
            from_bytes::<f32>(&future, &LoadExpectations::default()),
            Err(CheckpointError::Version { found: 9 })
        ));
        assert!(matches!(
            from_bytes::<f32>(b"garbage!", &LoadExpectations::default()),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(true);
        save_checkpoint(&m, &path).unwrap();
        let back: Model<f32> = load_checkpoint(&path, &LoadExpectations::default()).unwrap();
        assert_eq!(back, m);
    }
}
