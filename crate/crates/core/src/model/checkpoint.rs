//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSRG" | version: u32 | count: u32 |
//!   count × ( name_len: u16 | name: utf-8 | dtype: u8 (0 = f32) | rank: u8 | dims: u32 × rank | payload: f32 × Π dims )
//! | crc32: u32
//! ```
//!
//! The CRC32 covers the tensor records, from the first `name_len` to the
//! end of the last payload.

use std::path::Path;

use super::ModelGraph;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSRG";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: String, dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        NamedTensor { name, dims, data }
    }

    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        NamedTensor::new(name.into(), vec![1], vec![value])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: {what} at byte {} needs {n} bytes", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Insert or replace by name.
    pub fn push(&mut self, t: NamedTensor) {
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = NamedTensor>) {
        items.into_iter().for_each(|t| self.push(t));
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a NamedTensor)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |t| t.name.strip_prefix(prefix).map(|rest| (rest, t)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| Error::Format(format!("rank too large for `{}`", t.name)))?;
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!("dims of `{}` do not match its data", t.name)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in `{}`", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes, not an SSRG checkpoint".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not utf-8")))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let payload = r.take(numel.saturating_mul(4), "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let end = r.pos;
        let stored = r.u32("crc32")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let actual = crc32fast::hash(&bytes[HEADER_LEN..end]);
        if stored != actual {
            return Err(Error::Format(format!(
                "crc32 mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Write a model, plus any extra records such as optimizer state.
pub fn save_checkpoint(model: &ModelGraph, extra: &[NamedTensor], path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    ckpt.extend(extra.iter().cloned());
    ckpt.save(path)
}

/// Rebuild the model stored at `path`; the full archive is returned so
/// callers can pick up optimizer and training state.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelGraph, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ModelGraph::from_checkpoint(&ckpt)?;
    Ok((model, ckpt))
}
