//! Versioned binary checkpoints: header, TOML spec, named tensors, SHA-256
//! trailer over everything before it.

use std::path::Path;

use indexmap::IndexMap;
use megphone_tensor::Tensor;
use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEGPHCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: u8 = 0;
const BUFFER: u8 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let spec = toml::to_string(model.spec()).map_err(|e| Error::Checkpoint(format!("serializing spec: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
    out.extend_from_slice(spec.as_bytes());
    out.extend_from_slice(&((model.params().len() + model.buffers().len()) as u32).to_le_bytes());
    for (name, t) in model.params() {
        put_tensor(&mut out, name, PARAM, t);
    }
    for (name, t) in model.buffers() {
        put_tensor(&mut out, name, BUFFER, t);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically through a sibling temporary file.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let head = CHECKPOINT_MAGIC.len() + 4;
    if bytes.len() < head || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[CHECKPOINT_MAGIC.len()..head].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < head + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let mut c = Cursor { buf: body, pos: head };
    let spec_len = c.u64()? as usize;
    let spec_text =
        std::str::from_utf8(c.take(spec_len)?).map_err(|_| Error::Checkpoint("spec is not UTF-8".into()))?;
    let spec: ModelSpec = toml::from_str(spec_text).map_err(|e| Error::Checkpoint(format!("spec: {e}")))?;
    let count = c.u32()?;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let kind = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        match kind {
            PARAM => params.insert(name, t),
            BUFFER => buffers.insert(name, t),
            other => return Err(Error::Checkpoint(format!("unknown tensor kind {other}"))),
        };
    }
    if c.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Model::from_parts(spec, params, buffers)
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
