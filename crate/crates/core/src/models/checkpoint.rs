//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic (8 bytes) | version u32 | config JSON (u64 length + bytes) |
//! metadata text (u64 length + bytes) | tensor count u64 | per tensor:
//! name (u32 length + bytes), rank u32, extents u64 each, values f64 each.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ICLLAB\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

/// Serializes a model plus free-form metadata (typically the training
/// configuration) into checkpoint bytes.
pub fn encode_checkpoint(model: &Model, metadata: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, serde_json::to_string(&model.config)?.as_bytes());
    put_bytes(&mut out, metadata.as_bytes());
    out.extend_from_slice(&(model.params.tensors.len() as u64).to_le_bytes());
    for (name, t) in &model.params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let n = r.len()?;
    let config: ModelConfig = serde_json::from_str(&r.string(n)?)?;
    let n = r.len()?;
    let metadata = r.string(n)?;
    let count = r.len()?;
    let mut params = ModelParams::default();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &s| a.checked_mul(s))
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let raw = r.take(
            len.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((Model::from_parts(config, params)?, metadata))
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: &str) -> Result<()> {
    let bytes = encode_checkpoint(model, metadata)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
