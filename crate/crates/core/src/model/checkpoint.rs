//! The tensor container shared by checkpoints and dataset caches.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "VMF1" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 | rank u8 | extents u32×rank | payload
//! ```
//!
//! dtype 0 is f32 and 1 is f64. dtype 2 holds raw bytes (rank 1) and carries
//! text such as the model config.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"VMF1";
pub const VERSION: u32 = 1;
const BYTES_TAG: u8 = 2;
pub(crate) const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(t.cast()),
            DType::F64 => Payload::F64(t.cast()),
        }
    }

    /// The payload as a float tensor of element type `T`; `None` for bytes.
    pub fn to_tensor<T: Scalar>(&self) -> Option<Tensor<T>> {
        match self {
            Payload::F32(t) => Some(t.cast()),
            Payload::F64(t) => Some(t.cast()),
            Payload::Bytes(_) => None,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Payload::F32(t) => t.shape().to_vec(),
            Payload::F64(t) => t.shape().to_vec(),
            Payload::Bytes(b) => vec![b.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

impl Entry {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Self {
            name: name.into(),
            payload,
        }
    }
}

/// Encoded size of one entry.
pub fn entry_len(name: &str, shape: &[usize], elem_size: usize) -> usize {
    2 + name.len() + 2 + 4 * shape.len() + elem_size * shape.iter().product::<usize>()
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(
        &u32::try_from(entries.len())
            .map_err(|_| too_big("tensor count"))?
            .to_le_bytes(),
    );
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| too_big("name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = e.payload.shape();
        let tag = match &e.payload {
            Payload::F32(_) => DType::F32.tag(),
            Payload::F64(_) => DType::F64.tag(),
            Payload::Bytes(_) => BYTES_TAG,
        };
        out.push(tag);
        out.push(u8::try_from(shape.len()).map_err(|_| too_big("rank"))?);
        for &d in &shape {
            out.extend_from_slice(
                &u32::try_from(d)
                    .map_err(|_| too_big("extent"))?
                    .to_le_bytes(),
            );
        }
        match &e.payload {
            Payload::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Payload::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            Payload::Bytes(b) => out.extend_from_slice(b),
        }
    }
    Ok(out)
}

fn too_big(what: &str) -> Error {
    Error::Checkpoint(format!("{what} too large for the format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
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

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a VMF1 file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        let tag = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        if shape.contains(&0) {
            return Err(Error::Checkpoint(format!(
                "{name}: zero extent in {shape:?}"
            )));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
        let elem = match tag {
            0 => 4,
            1 => 8,
            BYTES_TAG if rank == 1 => 1,
            BYTES_TAG => {
                return Err(Error::Checkpoint(format!(
                    "{name}: byte tensor must be rank 1"
                )))
            }
            t => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {t}"))),
        };
        let size = numel
            .checked_mul(elem)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload size overflows")))?;
        let raw = r.take(size, &format!("payload of {name}"))?;
        let payload = match tag {
            0 => Payload::F32(Tensor::new(
                shape,
                raw.chunks_exact(4).map(f32::read_le).collect(),
            )?),
            1 => Payload::F64(Tensor::new(
                shape,
                raw.chunks_exact(8).map(f64::read_le).collect(),
            )?),
            _ => Payload::Bytes(raw.to_vec()),
        };
        entries.push(Entry { name, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}
