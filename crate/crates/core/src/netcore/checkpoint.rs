//! `DNCK` checkpoint container.
//!
//! Layout (little endian): magic `DNCK`, `u32` format version, `u32` header length
//! and UTF-8 header text, `u32` record count, then per record a `u32`-prefixed
//! name, `u32` rank, `u64` extents, `u32` dtype code (0 = f32, 1 = f64) and the
//! values.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RecordData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RecordData::F64(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: RecordData) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Checkpoint(format!("record `{name}`: dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(Self { name, dims, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub records: Vec<Record>,
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or malformed checkpoint: {e}"))
}

impl Checkpoint {
    pub fn new(header: impl Into<String>) -> Self {
        Self { header: header.into(), records: Vec::new() }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record> {
        self.get(name).ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.write_u32::<LE>(VERSION).unwrap();
        out.write_u32::<LE>(self.header.len() as u32).unwrap();
        out.extend_from_slice(self.header.as_bytes());
        out.write_u32::<LE>(self.records.len() as u32).unwrap();
        for r in &self.records {
            out.write_u32::<LE>(r.name.len() as u32).unwrap();
            out.extend_from_slice(r.name.as_bytes());
            out.write_u32::<LE>(r.dims.len() as u32).unwrap();
            for &d in &r.dims {
                out.write_u64::<LE>(d as u64).unwrap();
            }
            match &r.data {
                RecordData::F32(v) => {
                    out.write_u32::<LE>(0).unwrap();
                    v.iter().for_each(|&x| out.write_f32::<LE>(x).unwrap());
                }
                RecordData::F64(v) => {
                    out.write_u32::<LE>(1).unwrap();
                    v.iter().for_each(|&x| out.write_f64::<LE>(x).unwrap());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = c.read_u32::<LE>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header = read_string(&mut c)?;
        let count = c.read_u32::<LE>().map_err(truncated)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name = read_string(&mut c)?;
            let rank = c.read_u32::<LE>().map_err(truncated)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(c.read_u64::<LE>().map_err(truncated)? as usize);
            }
            let n: usize = dims.iter().product();
            let remaining = bytes.len() as u64 - c.position();
            let data = match c.read_u32::<LE>().map_err(truncated)? {
                0 => {
                    check_room(remaining, n, 4)?;
                    let mut v = vec![0f32; n];
                    c.read_f32_into::<LE>(&mut v).map_err(truncated)?;
                    RecordData::F32(v)
                }
                1 => {
                    check_room(remaining, n, 8)?;
                    let mut v = vec![0f64; n];
                    c.read_f64_into::<LE>(&mut v).map_err(truncated)?;
                    RecordData::F64(v)
                }
                code => return Err(Error::UnknownDtype(code)),
            };
            records.push(Record { name, dims, data });
        }
        if c.position() != bytes.len() as u64 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() as u64 - c.position())));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(crate::error::at(path))?)
    }
}

fn check_room(remaining: u64, n: usize, width: u64) -> Result<()> {
    let need = (n as u64).saturating_mul(width).saturating_add(4);
    if need > remaining {
        return Err(Error::Truncated { expected: need, found: remaining });
    }
    Ok(())
}

fn read_string(c: &mut Cursor<&[u8]>) -> Result<String> {
    let len = c.read_u32::<LE>().map_err(truncated)? as usize;
    let remaining = c.get_ref().len() as u64 - c.position();
    if len as u64 > remaining {
        return Err(Error::Truncated { expected: len as u64, found: remaining });
    }
    let mut buf = vec![0u8; len];
    c.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("invalid UTF-8 string: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("{\"a\":1}");
        ck.push(Record::new("w", vec![2, 3], RecordData::F64(vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX])).unwrap());
        ck.push(Record::new("g", vec![2], RecordData::F32(vec![0.5, -0.25])).unwrap());
        ck.push(Record::new("s", vec![], RecordData::F64(vec![7.0])).unwrap());
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..4], b"DNCK");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. } | Error::Checkpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn record_length_checked() {
        assert!(Record::new("x", vec![2, 2], RecordData::F64(vec![1.0])).is_err());
    }
}
