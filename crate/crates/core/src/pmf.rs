//! The PMF1 binary field format.
//!
//! ```text
//! offset  size  content
//!      0     8  magic "PMFIELD1"
//!      8     4  u32 version (1)
//!     12     4  u32 channel count H
//!     16    12  u32 Dx, Dy, Dz
//!     28     1  u8 dtype (0 = f32, 1 = f64)
//!     29     3  reserved, zero
//!     32     -  H * Dx * Dy * Dz values, channel-major, x fastest
//! ```
//!
//! All integers and values are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Dims, Field3};

pub const MAGIC: &[u8; 8] = b"PMFIELD1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Invalid(format!("dtype must be f32 or f64, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub channels: usize,
    pub dims: Dims,
    pub dtype: Dtype,
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode(field: &Field3, dtype: Dtype) -> Result<Vec<u8>> {
    let d = field.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + field.data().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(field.channels(), "channel count")?);
    for (n, name) in [(d.nx, "Dx"), (d.ny, "Dy"), (d.nz, "Dz")] {
        out.extend_from_slice(&u32_field(n, name)?);
    }
    out.push(dtype.code());
    out.extend_from_slice(&[0; 3]);
    match dtype {
        Dtype::F32 => field
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => field
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, not a PMF1 file".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PMF version {version}")));
    }
    let channels = word(12) as usize;
    let dims = Dims {
        nx: word(16) as usize,
        ny: word(20) as usize,
        nz: word(24) as usize,
    };
    let dtype = Dtype::from_code(bytes[28])?;
    if channels == 0 {
        return Err(Error::Format("channel count is zero".into()));
    }
    dims.validate()?;
    Ok(Header {
        channels,
        dims,
        dtype,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Field3> {
    let h = decode_header(bytes)?;
    let count = h.dims.checked_voxels(h.channels)?;
    let payload = count
        .checked_mul(h.dtype.size())
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("declared payload size overflows".into()))?;
    if bytes.len() != payload {
        return Err(Error::Format(format!(
            "expected {payload} bytes for {} x {} {:?}, found {}",
            h.channels, h.dims, h.dtype, bytes.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let data: Vec<f64> = match h.dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Field3::from_vec(h.dims, h.channels, data)?)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp.{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_field(path: impl AsRef<Path>, field: &Field3, dtype: Dtype) -> Result<()> {
    write_atomic(path.as_ref(), &encode(field, dtype)?)
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field3> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_field() -> Field3 {
        Field3::from_fn(Dims::new(3, 2, 4).unwrap(), 2, |c, x, y, z| {
            (c as f64 + 0.1) * (x as f64 - 1.3) * (y as f64 + 0.7) / (z as f64 + 1.9)
        })
        .unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let f = sample_field();
        let back = decode(&encode(&f, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn f32_round_trip_of_representable_values() {
        let f = sample_field().map(|v| v as f32 as f64);
        let bytes = encode(&f, Dtype::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 48 * 4);
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_field(), Dtype::F64).unwrap();
        assert_eq!(&bytes[..8], b"PMFIELD1");
        assert_eq!(bytes[8..12], 1u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(bytes[24..28], 4u32.to_le_bytes());
        assert_eq!(bytes[28], 1);
        assert_eq!(&bytes[29..32], &[0, 0, 0]);
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode(&sample_field(), Dtype::F64).unwrap();
        let mut swapped = bytes.clone();
        swapped[..8].reverse();
        assert!(matches!(decode(&swapped), Err(Error::Format(_))));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..20]).is_err());
        let mut version = bytes.clone();
        version[8] = 2;
        assert!(decode(&version).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn overflowing_dims_rejected_without_allocation() {
        let mut bytes = encode(&sample_field(), Dtype::F64).unwrap();
        for o in [12, 16, 20, 24] {
            bytes[o..o + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pmf");
        let f = sample_field();
        write_field(&p, &f, Dtype::F64).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
