//! The volume container format.
//!
//! Little-endian binary layout, fixed 32-byte header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `DVOL`                            |
//! | 4      | 2    | format version (`u16`, currently 1)     |
//! | 6      | 1    | dtype code: 1 = `f32`, 3 = `u8` mask    |
//! | 7      | 1    | reserved, must be 0                     |
//! | 8      | 12   | dims, 3 x `u32`                         |
//! | 20     | 12   | voxel spacing in mm, 3 x `f32`          |
//! | 32     | ...  | row-major payload, `prod(dims) * size`  |
//!
//! Writes then reads are bit-identical; the magic is checked before
//! any payload is touched.

use super::IoError;
use crate::metrics::BinaryMask;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DVOL";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 3;
const HEADER_LEN: u64 = 32;

/// A dense scalar 3-D grid (image or probability map).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(dims[0] * dims[1] * dims[2], data.len());
        Volume {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Self {
        Volume::new(dims, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        [
            self.spacing[0] as f64,
            self.spacing[1] as f64,
            self.spacing[2] as f64,
        ]
    }
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

struct Header {
    dtype: u8,
    dims: [usize; 3],
    spacing: [f32; 3],
    payload_len: u64,
}

fn write_header<W: Write>(
    w: &mut W,
    dtype: u8,
    dims: [usize; 3],
    spacing: [f32; 3],
) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype, 0])?;
    for d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header, IoError> {
    let p = || path.display().to_string();
    let mut head = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut head).map_err(|_| IoError::Truncated {
        path: p(),
        expected: HEADER_LEN,
        actual: std::fs::metadata(path).map(|m| m.len()).unwrap_or(0),
    })?;
    if head[0..4] != MAGIC {
        return Err(IoError::BadMagic { path: p() });
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion { path: p(), version });
    }
    let dtype = head[6];
    let elem_size: u64 = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        code => return Err(IoError::BadDtype { path: p(), code }),
    };
    let mut dims32 = [0u32; 3];
    for (i, d) in dims32.iter_mut().enumerate() {
        *d = u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(head[20 + 4 * i..24 + 4 * i].try_into().unwrap());
    }
    let numel = (dims32[0] as u64)
        .checked_mul(dims32[1] as u64)
        .and_then(|v| v.checked_mul(dims32[2] as u64))
        .filter(|&v| v <= (1 << 31))
        .ok_or(IoError::DimsOverflow {
            path: p(),
            dims: dims32,
        })?;
    Ok(Header {
        dtype,
        dims: [dims32[0] as usize, dims32[1] as usize, dims32[2] as usize],
        spacing,
        payload_len: numel * elem_size,
    })
}

fn read_payload(path: &Path, r: &mut impl Read, expected: u64) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::with_capacity(expected as usize);
    r.take(expected + 1)
        .read_to_end(&mut buf)
        .map_err(|e| file_err(path, e))?;
    if buf.len() as u64 != expected {
        return Err(IoError::Truncated {
            path: path.display().to_string(),
            expected: HEADER_LEN + expected,
            actual: HEADER_LEN + buf.len() as u64,
        });
    }
    Ok(buf)
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| file_err(path, e))?);
    write_header(&mut w, DTYPE_F32, v.dims, v.spacing).map_err(|e| file_err(path, e))?;
    for &x in &v.data {
        w.write_all(&x.to_le_bytes()).map_err(|e| file_err(path, e))?;
    }
    w.flush().map_err(|e| file_err(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| file_err(path, e))?);
    let header = read_header(path, &mut r)?;
    if header.dtype != DTYPE_F32 {
        return Err(IoError::DtypeMismatch {
            path: path.display().to_string(),
            expected: "f32",
            actual: "u8",
        });
    }
    let raw = read_payload(path, &mut r, header.payload_len)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume {
        dims: header.dims,
        spacing: header.spacing,
        data,
    })
}

pub fn write_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| file_err(path, e))?);
    let spacing = [
        m.spacing[0] as f32,
        m.spacing[1] as f32,
        m.spacing[2] as f32,
    ];
    write_header(&mut w, DTYPE_U8, m.dims, spacing).map_err(|e| file_err(path, e))?;
    let bytes: Vec<u8> = m.data.iter().map(|&b| u8::from(b)).collect();
    w.write_all(&bytes).map_err(|e| file_err(path, e))?;
    w.flush().map_err(|e| file_err(path, e))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask, IoError> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| file_err(path, e))?);
    let header = read_header(path, &mut r)?;
    if header.dtype != DTYPE_U8 {
        return Err(IoError::DtypeMismatch {
            path: path.display().to_string(),
            expected: "u8",
            actual: "f32",
        });
    }
    let raw = read_payload(path, &mut r, header.payload_len)?;
    let spacing = [
        header.spacing[0] as f64,
        header.spacing[1] as f64,
        header.spacing[2] as f64,
    ];
    Ok(BinaryMask::with_spacing(header.dims, spacing, raw.iter().map(|&b| b != 0).collect())
        .expect("payload length checked against dims"))
}
