//! BVNX binary container.
//!
//! Single tensor:
//!
//! ```text
//! "BVNX" | version: u16 | rank: u16 (1..=4) | dims: u32 × rank | f32 × numel
//! ```
//!
//! Named bundle (weights, pool indices): the rank slot holds [`BUNDLE_TAG`],
//! followed by
//!
//! ```text
//! count: u32 | entries × count
//! entry = name_len: u16 | name: utf-8 | kind: u8 (0 = f32, 1 = u32)
//!       | rank: u16 | dims: u32 × rank | payload (kind-typed) × numel
//! ```
//!
//! Every integer and float is little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"BVNX";
pub const VERSION: u16 = 1;
pub const BUNDLE_TAG: u16 = 0xFFFF;

/// Integer table stored alongside tensors in a bundle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct U32Table {
    pub dims: Vec<usize>,
    pub data: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor),
    U32(U32Table),
}

/// Ordered name → entry map; names sort lexicographically on disk so
/// identical bundles always serialize to identical bytes.
pub type Bundle = BTreeMap<String, Entry>;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_f32_record(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let rank = r.header()?;
    if rank == BUNDLE_TAG {
        return Err(Error::format(6, "file is a bundle, not a single tensor"));
    }
    let t = r.f32_body(rank)?;
    r.finish()?;
    Ok(t)
}

pub fn encode_bundle(bundle: &Bundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&BUNDLE_TAG.to_le_bytes());
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (name, entry) in bundle {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match entry {
            Entry::F32(t) => {
                out.push(0);
                put_f32_record(&mut out, t);
            }
            Entry::U32(t) => {
                out.push(1);
                put_dims(&mut out, &t.dims);
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut r = Reader::new(bytes);
    let tag = r.header()?;
    if tag != BUNDLE_TAG {
        return Err(Error::format(6, format!("expected bundle tag, found rank {tag}")));
    }
    let count = r.u32()? as usize;
    let mut bundle = Bundle::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at + 2, "entry name is not utf-8"))?
            .to_owned();
        let kind_at = r.pos;
        let entry = match r.u8()? {
            0 => {
                let rank = r.u16()?;
                Entry::F32(r.f32_body(rank)?)
            }
            1 => {
                let rank = r.u16()?;
                let dims = r.dims(rank)?;
                let numel: usize = dims.iter().product();
                let data = (0..numel).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                Entry::U32(U32Table { dims, data })
            }
            k => return Err(Error::format(kind_at, format!("unknown entry kind {k}"))),
        };
        if bundle.insert(name.clone(), entry).is_some() {
            return Err(Error::format(at, format!("duplicate entry name {name:?}")));
        }
    }
    r.finish()?;
    Ok(bundle)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn write_bundle(path: impl AsRef<Path>, bundle: &Bundle) -> Result<()> {
    std::fs::write(path, encode_bundle(bundle))?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    decode_bundle(&std::fs::read(path)?)
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn put_f32_record(out: &mut Vec<u8>, t: &Tensor) {
    put_dims(out, t.dims());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated file: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Validates magic and version; returns the rank / tag slot.
    fn header(&mut self) -> Result<u16> {
        if self.bytes.len() < 4 || &self.bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"BVNX\""));
        }
        self.pos = 4;
        let version = self.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        self.u16()
    }

    fn dims(&mut self, rank: u16) -> Result<Vec<usize>> {
        let rank = rank as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(self.pos - 2, format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        (0..rank)
            .map(|_| {
                let at = self.pos;
                match self.u32()? {
                    0 => Err(Error::format(at, "zero-sized dimension")),
                    d => Ok(d as usize),
                }
            })
            .collect()
    }

    fn f32_body(&mut self, rank: u16) -> Result<Tensor> {
        let dims = self.dims(rank)?;
        let numel: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(self.pos, "dimension product overflows"))?;
        let at = self.pos;
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::format(at, "payload too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new_finite(dims, data).map_err(|e| Error::format(at, e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos, "trailing bytes after payload"));
        }
        Ok(())
    }
}
