//! Single-file binary container of named, shaped arrays.
//!
//! Layout (all scalars little-endian):
//!
//! ```text
//! "FFIN" | u32 version | u32 record count
//! per record: u16 name length | name | u8 dtype | u8 rank | u32 extents[rank] | u64 offset
//! payload region, offsets relative to its start
//! ```
//!
//! Dtype codes: 0 = f32, 1 = u8, 2 = f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FFIN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl Payload {
    fn code(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
            Payload::F64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn byte_len(&self) -> usize {
        self.len() * element_size(self.code()).expect("known dtype")
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(code: u8, bytes: &[u8]) -> Result<Self> {
        Ok(match code {
            0 => Payload::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            1 => Payload::U8(bytes.to_vec()),
            2 => Payload::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => return Err(Error::Format(format!("unknown dtype code {code}"))),
        })
    }
}

fn element_size(code: u8) -> Option<usize> {
    match code {
        0 => Some(4),
        1 => Some(1),
        2 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub records: Vec<Record>,
}

/// Stores a tensor in its own precision.
pub trait ToPayload: Scalar {
    fn to_payload(data: &[Self]) -> Payload;
}

impl ToPayload for f32 {
    fn to_payload(data: &[f32]) -> Payload {
        Payload::F32(data.to_vec())
    }
}

impl ToPayload for f64 {
    fn to_payload(data: &[f64]) -> Payload {
        Payload::F64(data.to_vec())
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record, replacing any existing one of the same name.
    pub fn insert(&mut self, name: &str, shape: &[usize], payload: Payload) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("invalid record name {name:?}")));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|&e| e > u32::MAX as usize) {
            return Err(Error::Format(format!("shape {shape:?} not representable")));
        }
        let numel: usize = shape.iter().product();
        if numel != payload.len() {
            return Err(Error::Format(format!(
                "record {name}: shape {shape:?} holds {numel} values, payload has {}",
                payload.len()
            )));
        }
        let rec = Record { name: name.to_string(), shape: shape.to_vec(), payload };
        match self.records.iter_mut().find(|r| r.name == name) {
            Some(slot) => *slot = rec,
            None => self.records.push(rec),
        }
        Ok(())
    }

    pub fn insert_tensor<S: ToPayload>(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        self.insert(name, t.shape(), S::to_payload(t.data()))
    }

    pub fn insert_text(&mut self, name: &str, text: &str) -> Result<()> {
        let bytes = text.as_bytes().to_vec();
        self.insert(name, &[bytes.len()], Payload::U8(bytes))
    }

    pub fn get(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::MissingRecord(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    /// Reads a float record as `Tensor<S>`, converting precision if needed.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let r = self.get(name)?;
        let data: Vec<S> = match &r.payload {
            Payload::F32(v) => v.iter().map(|&x| S::of(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| S::of(x)).collect(),
            Payload::U8(_) => return Err(Error::Format(format!("record {name} is not floating point"))),
        };
        if r.shape.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::new(&r.shape, data)
    }

    pub fn bytes(&self, name: &str) -> Result<(&[usize], &[u8])> {
        let r = self.get(name)?;
        match &r.payload {
            Payload::U8(v) => Ok((&r.shape, v)),
            _ => Err(Error::Format(format!("record {name} is not u8"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let (_, b) = self.bytes(name)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("record {name} is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.code());
            out.push(r.shape.len() as u8);
            for &e in &r.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += r.payload.byte_len() as u64;
        }
        for r in &self.records {
            r.payload.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let count = cur.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let code = cur.u8()?;
            let size = element_size(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = cur.u8()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()?;
            directory.push((name, code, size, shape, offset));
        }
        let payload = &bytes[cur.pos..];
        let mut records = Vec::with_capacity(directory.len());
        for (name, code, size, shape, offset) in directory {
            let len = shape
                .iter()
                .try_fold(size, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::Bounds(format!("record {name} size overflows")))?;
            let start = usize::try_from(offset).map_err(|_| Error::Bounds(format!("record {name} offset")))?;
            let end = start
                .checked_add(len)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::Bounds(format!(
                        "record {name} spans {start}+{len} bytes, payload has {}",
                        payload.len()
                    ))
                })?;
            records.push(Record { name, shape, payload: Payload::read_le(code, &payload[start..end])? });
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Bounds(format!("header truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a", &[2, 3], Payload::F32(vec![0.5, -1.0, 2.0, f32::MIN_POSITIVE, 7.0, 1e-30])).unwrap();
        c.insert("b", &[4], Payload::U8(vec![0, 1, 254, 255])).unwrap();
        c.insert("c", &[], Payload::F64(vec![std::f64::consts::PI])).unwrap();
        c
    }

    #[test]
    fn layout_is_fixed() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"FFIN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // First record: name "a", dtype 0, rank 2, extents 2 and 3, offset 0.
        assert_eq!(&bytes[12..15], &[1, 0, b'a']);
        assert_eq!(&bytes[15..17], &[0, 2]);
        assert_eq!(&bytes[17..25], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[25..33], &[0; 8]);
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(c.tensor::<f64>("c").unwrap().item().unwrap(), std::f64::consts::PI);
    }

    #[test]
    fn structured_errors() {
        let c = sample();
        assert!(matches!(c.get(""), Err(Error::MissingRecord(_))));
        let mut bytes = c.to_bytes();
        bytes[4] = 9;
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(c.clone().insert("x", &[3], Payload::U8(vec![1])).is_err());
    }
}
