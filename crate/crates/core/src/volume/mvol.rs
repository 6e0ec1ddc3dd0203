//! MVOL: a minimal little-endian container for volumes, labels and fields.
//!
//! ```text
//! "MVL1" | u32 nx | u32 ny | u32 nz | u32 channels | u32 dtype | payload
//! ```
//!
//! `channels` is 1 for scalar and label volumes and 3 for displacement fields.
//! `dtype` is 0 (f32), 1 (f64) or 2 (u16). The payload holds
//! `channels * nx * ny * nz` values, channel-major and x-fastest within a channel.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{voxel_count, Dims, DisplacementField3, LabelVolume3, Volume3};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MVL1";
const HEADER_LEN: u64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U16,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U16 => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U16),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MvolHeader {
    pub dims: Dims,
    pub channels: u32,
    pub dtype: Dtype,
}

/// Decoded MVOL contents.
#[derive(Clone, Debug, PartialEq)]
pub enum Mvol {
    Volume(Volume3),
    Labels(LabelVolume3),
    Field(DisplacementField3),
}

impl Mvol {
    fn header(&self, dtype: Dtype) -> Result<MvolHeader> {
        let (dims, channels, float) = match self {
            Mvol::Volume(v) => (v.dims(), 1, true),
            Mvol::Labels(l) => (l.dims(), 1, false),
            Mvol::Field(f) => (f.dims(), 3, true),
        };
        let ok = if float { dtype != Dtype::U16 } else { dtype == Dtype::U16 };
        if !ok {
            return Err(Error::FormatMismatch(format!(
                "dtype {dtype:?} cannot hold a {}",
                if float { "float payload" } else { "label payload" }
            )));
        }
        Ok(MvolHeader { dims, channels, dtype })
    }
}

pub fn encode(payload: &Mvol, dtype: Dtype) -> Result<Vec<u8>> {
    let header = payload.header(dtype)?;
    let n = header.channels as u64 * voxel_count(header.dims) as u64;
    let mut out = Vec::with_capacity((HEADER_LEN + n * dtype.size()) as usize);
    out.extend_from_slice(&MAGIC);
    for d in header.dims {
        out.write_u32::<LittleEndian>(u32::try_from(d).map_err(|_| {
            Error::FormatMismatch(format!("dimension {d} does not fit in u32"))
        })?)?;
    }
    out.write_u32::<LittleEndian>(header.channels)?;
    out.write_u32::<LittleEndian>(dtype.code())?;
    match payload {
        Mvol::Labels(l) => {
            for &v in l.as_slice() {
                out.write_u16::<LittleEndian>(v)?;
            }
        }
        Mvol::Volume(v) => write_floats(&mut out, v.as_slice(), dtype)?,
        Mvol::Field(f) => write_floats(&mut out, f.as_slice(), dtype)?,
    }
    Ok(out)
}

fn write_floats(out: &mut Vec<u8>, values: &[f64], dtype: Dtype) -> Result<()> {
    match dtype {
        Dtype::F64 => {
            for &v in values {
                out.write_f64::<LittleEndian>(v)?;
            }
        }
        Dtype::F32 => {
            for &v in values {
                let s = v as f32;
                if !s.is_finite() {
                    return Err(Error::FormatMismatch(format!("value {v} overflows f32")));
                }
                out.write_f32::<LittleEndian>(s)?;
            }
        }
        Dtype::U16 => unreachable!("checked by header"),
    }
    Ok(())
}

pub fn decode_header(bytes: &[u8]) -> Result<MvolHeader> {
    if (bytes.len() as u64) < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: bytes[..4].try_into().unwrap() });
        }
        return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() as u64 });
    }
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = cur.read_u32::<LittleEndian>()? as usize;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::FormatMismatch(format!("zero dimension in header {dims:?}")));
    }
    let channels = cur.read_u32::<LittleEndian>()?;
    let dtype = Dtype::from_code(cur.read_u32::<LittleEndian>()?)?;
    match (channels, dtype) {
        (1, _) | (3, Dtype::F32) | (3, Dtype::F64) => {}
        _ => {
            return Err(Error::FormatMismatch(format!(
                "unsupported channels/dtype combination {channels}/{dtype:?}"
            )))
        }
    }
    Ok(MvolHeader { dims, channels, dtype })
}

pub fn decode(bytes: &[u8]) -> Result<Mvol> {
    let header = decode_header(bytes)?;
    let n = header.channels as u64 * voxel_count(header.dims) as u64;
    let expected = HEADER_LEN + n * header.dtype.size();
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::FormatMismatch(format!(
            "{} trailing bytes after payload",
            found - expected
        )));
    }
    let mut cur = Cursor::new(&bytes[HEADER_LEN as usize..]);
    let n = n as usize;
    match (header.channels, header.dtype) {
        (1, Dtype::U16) => {
            let mut labels = vec![0u16; n];
            cur.read_u16_into::<LittleEndian>(&mut labels)?;
            Ok(Mvol::Labels(LabelVolume3::new(header.dims, labels)?))
        }
        (c, dtype) => {
            let values = read_floats(&mut cur, n, dtype)?;
            if c == 1 {
                Ok(Mvol::Volume(Volume3::new(header.dims, values)?))
            } else {
                Ok(Mvol::Field(DisplacementField3::new(header.dims, values)?))
            }
        }
    }
}

fn read_floats(cur: &mut Cursor<&[u8]>, n: usize, dtype: Dtype) -> Result<Vec<f64>> {
    match dtype {
        Dtype::F64 => {
            let mut v = vec![0.0f64; n];
            cur.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        }
        Dtype::F32 => {
            let mut v = vec![0.0f32; n];
            cur.read_f32_into::<LittleEndian>(&mut v)?;
            Ok(v.into_iter().map(f64::from).collect())
        }
        Dtype::U16 => Err(Error::FormatMismatch("u16 payload is not a float payload".into())),
    }
}

pub fn write_mvol(path: impl AsRef<Path>, payload: &Mvol, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(payload, dtype)?)?;
    Ok(())
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Mvol> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(crate::error::at(path))?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    match read_mvol(path)? {
        Mvol::Volume(v) => Ok(v),
        other => Err(mismatch("scalar volume", &other)),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume3> {
    match read_mvol(path)? {
        Mvol::Labels(l) => Ok(l),
        other => Err(mismatch("label volume", &other)),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField3> {
    match read_mvol(path)? {
        Mvol::Field(f) => Ok(f),
        other => Err(mismatch("displacement field", &other)),
    }
}

fn mismatch(wanted: &str, got: &Mvol) -> Error {
    let kind = match got {
        Mvol::Volume(_) => "scalar volume",
        Mvol::Labels(_) => "label volume",
        Mvol::Field(_) => "displacement field",
    };
    Error::FormatMismatch(format!("expected a {wanted}, file holds a {kind}"))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume3, dtype: Dtype) -> Result<()> {
    write_mvol(path, &Mvol::Volume(v.clone()), dtype)
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelVolume3) -> Result<()> {
    write_mvol(path, &Mvol::Labels(l.clone()), Dtype::U16)
}

pub fn write_field(path: impl AsRef<Path>, f: &DisplacementField3, dtype: Dtype) -> Result<()> {
    write_mvol(path, &Mvol::Field(f.clone()), dtype)
}
