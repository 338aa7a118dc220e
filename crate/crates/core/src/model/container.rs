//! VLTC tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "VLTC"
//! version  u16            (currently 1)
//! count    u64            number of table entries
//! table    count × entry
//!   name_len u32, name UTF-8 bytes
//!   dtype    u8           0 = f32, 1 = f64
//!   rank     u8
//!   dims     u64 × rank
//!   offset   u64          absolute byte offset of the payload in the file
//! payloads raw row-major little-endian values
//! ```
//!
//! f32 payloads are widened to f64 on read.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VLTC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Serialises named tensors. Payloads follow the table in the given order.
pub fn encode<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: DType,
) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Tensor)> = tensors.into_iter().collect();
    let mut header_len = 4 + 2 + 8;
    for (name, t) in &tensors {
        if t.rank() > u8::MAX as usize {
            return Err(Error::Shape(format!("tensor `{name}` has rank above 255")));
        }
        header_len += 4 + name.len() + 1 + 1 + 8 * t.rank() + 8;
    }

    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    let mut offset = header_len as u64;
    for (name, t) in &tensors {
        let name_len = u32::try_from(name.len())
            .map_err(|_| Error::Shape(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * dtype.size()) as u64;
    }
    debug_assert_eq!(out.len(), header_len);
    for (_, t) in &tensors {
        match dtype {
            DType::F64 => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data()
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Load(format!("container truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a container. Duplicate names are an error.
pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Load("bad magic: not a VLTC container".into()));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Load(format!(
            "unsupported VLTC version {version} (expected {VERSION})"
        )));
    }
    let count = cur.u64("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
            .to_string();
        let code = cur.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Load(format!("tensor `{name}` has unknown dtype code {code}")))?;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("dims")? as usize);
        }
        let offset = cur.u64("offset")? as usize;
        let count: usize = shape.iter().product();
        let size = count
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Load(format!("tensor `{name}` is too large")))?;
        let payload = offset
            .checked_add(size)
            .and_then(|end| bytes.get(offset..end))
            .ok_or_else(|| Error::Load(format!("payload of `{name}` lies outside the file")))?;
        let data: Vec<f64> = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Load(format!("tensor `{name}`: {e}")))?;
        if out.insert(name.clone(), tensor).is_some() {
            return Err(Error::Load(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Load(msg) => Error::Load(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: DType,
) -> Result<()> {
    let bytes = encode(tensors, dtype)?;
    crate::io::write_atomic(path, &bytes)
}
