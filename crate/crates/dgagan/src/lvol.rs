//! `.lvol` raster files: `"LVOL"`, version byte 1, three little-endian u32
//! extents (D, H, W), a sample-type byte, then the row-major raster with W
//! fastest.
//!
//! Sample type 0 is f32 and is what volumes use. Type 1 (f64) carries
//! checkpoint tensors so resumed runs continue bit-identically.

use std::fs;
use std::path::Path;

use dgagan_core::volume::{Role, Volume};

use crate::error::{format, io, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"LVOL";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_F64: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 12 + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Samples {
    fn len(&self) -> usize {
        match self {
            Samples::F32(v) => v.len(),
            Samples::F64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub extents: [usize; 3],
    pub samples: Samples,
}

pub fn encode(raster: &Raster) -> std::result::Result<Vec<u8>, FormatError> {
    let wide = raster.extents.map(|e| e as u64);
    if raster.extents.contains(&0) {
        return Err(FormatError::ZeroExtent(wide));
    }
    if raster.extents.iter().any(|&e| e > u32::MAX as usize) {
        return Err(FormatError::ExtentOverflow(wide));
    }
    let n: usize = raster.extents.iter().product();
    if raster.samples.len() != n {
        return Err(FormatError::Length {
            expected: n,
            found: raster.samples.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + n * 8);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for e in raster.extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match &raster.samples {
        Samples::F32(v) => {
            out.push(DTYPE_F32);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Samples::F64(v) => {
            out.push(DTYPE_F64);
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
    }
    Ok(out)
}

/// Decodes one record from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> std::result::Result<(Raster, usize), FormatError> {
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    if bytes[4] != VERSION {
        return Err(FormatError::Version(bytes[4]));
    }
    let wide = [0, 1, 2].map(|i| u64::from(u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("four bytes"))));
    if wide.contains(&0) {
        return Err(FormatError::ZeroExtent(wide));
    }
    let width = match bytes[17] {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(FormatError::Dtype(other)),
    };
    let payload = wide
        .iter()
        .try_fold(width as u64, |acc, &e| acc.checked_mul(e))
        .and_then(|b| usize::try_from(b).ok())
        .filter(|&b| b <= isize::MAX as usize - HEADER_LEN)
        .ok_or(FormatError::ExtentOverflow(wide))?;
    let end = HEADER_LEN + payload;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    let body = &bytes[HEADER_LEN..end];
    let samples = if width == 4 {
        Samples::F32(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
    } else {
        Samples::F64(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
    };
    let extents = wide.map(|e| e as usize);
    Ok((Raster { extents, samples }, end))
}

/// Decodes a buffer holding exactly one record.
pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, FormatError> {
    let (r, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::Trailing(bytes.len() - used));
    }
    Ok(r)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let raster = Raster {
        extents: v.extents(),
        samples: Samples::F32(v.data().to_vec()),
    };
    let bytes = encode(&raster).map_err(format(path))?;
    fs::write(path, bytes).map_err(io(path))
}

/// Reads an f32 volume; the role is supplied by the caller.
pub fn read_volume(path: &Path, role: Role) -> Result<Volume> {
    let bytes = fs::read(path).map_err(io(path))?;
    let raster = decode(&bytes).map_err(format(path))?;
    let Samples::F32(data) = raster.samples else {
        return Err(format(path)(FormatError::Dtype(DTYPE_F64)));
    };
    Ok(Volume::new(raster.extents, role, data)?)
}
