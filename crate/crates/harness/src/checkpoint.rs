//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "DJSC" | version u32 | kind u32 | tensor count u32
//! per tensor: name length u32 | name utf-8 | dtype u8 | rank u8 | dims u32 x rank | payload f32 x numel
//! crc32 of every preceding byte, u32
//! ```

use std::path::Path;

use djscc_autodiff::{ParamStore, Tensor};
use thiserror::Error;

use crate::error::{io_err, Result};

pub const MAGIC: &[u8; 4] = b"DJSC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Jscc,
    Latent,
    Denoiser,
}

impl ModelKind {
    pub fn tag(self) -> u32 {
        match self {
            Self::Jscc => 1,
            Self::Latent => 2,
            Self::Denoiser => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::Jscc),
            2 => Some(Self::Latent),
            3 => Some(Self::Denoiser),
            _ => None,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Jscc => "jscc.ckpt",
            Self::Latent => "latent.ckpt",
            Self::Denoiser => "denoiser.ckpt",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("unknown model kind tag {0}")]
    UnknownKind(u32),
    #[error("checkpoint holds {found:?}, expected {expected:?}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("malformed tensor entry: {0}")]
    Malformed(String),
    #[error("tensor {0} missing from checkpoint")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode(kind: ModelKind, store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.tag().to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.value.shape().len() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 20 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed });
    }
    let tag = r.u32()?;
    let kind = ModelKind::from_tag(tag).ok_or(CheckpointError::UnknownKind(tag))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Dtype(dtype));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>, CheckpointError>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
        let payload = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes after tensor table".into()));
    }
    Ok(Checkpoint { kind, tensors })
}

/// Copies checkpoint tensors into a freshly built store of the same layout.
pub fn restore(ckpt: &Checkpoint, kind: ModelKind, store: &mut ParamStore<f32>) -> Result<(), CheckpointError> {
    if ckpt.kind != kind {
        return Err(CheckpointError::KindMismatch {
            expected: kind,
            found: ckpt.kind,
        });
    }
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let (_, t) = ckpt
            .tensors
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        let id = store.find(&name).expect("name taken from the store");
        let target = store.get_mut(id);
        if target.shape() != t.shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: target.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        *target = t.clone();
    }
    Ok(())
}

pub fn save(path: &Path, kind: ModelKind, store: &ParamStore<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, encode(kind, store)).map_err(io_err(path))
}

pub fn load(path: &Path, kind: ModelKind, store: &mut ParamStore<f32>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    restore(&decode(&bytes)?, kind, store)?;
    Ok(())
}
