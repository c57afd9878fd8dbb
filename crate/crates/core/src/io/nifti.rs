//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) subset.
//!
//! Reads uint8, int16 and float32 payloads in either byte order, applies
//! `scl_slope`/`scl_inter` (a zero slope means "no scaling") and converts
//! `pixdim` to mm using `xyzt_units`. Orientation fields are ignored. Writes
//! little-endian files with `vox_offset = 352`: masks as uint8, CT as
//! float32. Gzip is chosen by a `.gz` extension on write and detected from
//! the magic bytes on read.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::grid::{CtVolume, GridError, GridShape, Mask, Spacing};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: not a single-file NIfTI-1 image")]
    BadMagic,
    #[error("unsupported datatype {0} (expected 2, 4 or 16)")]
    UnsupportedDatatype(i16),
    #[error("non-binary mask: voxel {index} has value {value}")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("truncated file: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Decoded image: scaled voxel values in x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub shape: GridShape,
    pub spacing: Spacing,
    pub datatype: i16,
    pub values: Vec<f64>,
}

impl NiftiImage {
    pub fn into_mask(self) -> Result<Mask, NiftiError> {
        let mut data = Vec::with_capacity(self.values.len());
        for (index, &value) in self.values.iter().enumerate() {
            if value == 0.0 {
                data.push(false);
            } else if value == 1.0 {
                data.push(true);
            } else {
                return Err(NiftiError::NonBinaryMask { index, value });
            }
        }
        Ok(Mask::new(self.shape, self.spacing, data)?)
    }

    pub fn into_ct(self) -> Result<CtVolume, NiftiError> {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Ok(CtVolume::new(self.shape, self.spacing, data)?)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let io = |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage, NiftiError> {
    decode(&read_file(path)?)
}

pub fn read_mask(path: &Path) -> Result<Mask, NiftiError> {
    read_nifti(path)?.into_mask()
}

pub fn read_ct(path: &Path) -> Result<CtVolume, NiftiError> {
    read_nifti(path)?.into_ct()
}

/// Parses an uncompressed NIfTI-1 byte stream.
pub fn decode(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            expected: HEADER_SIZE,
            got: bytes.len(),
        });
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode_with::<BigEndian>(bytes)
    } else {
        Err(NiftiError::InvalidHeader("sizeof_hdr is not 348".into()))
    }
}

fn decode_with<E: ByteOrder>(b: &[u8]) -> Result<NiftiImage, NiftiError> {
    if &b[344..348] != b"n+1\0" {
        return Err(NiftiError::BadMagic);
    }
    let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&b[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let extent = |i: usize| if i as i16 <= ndim { dim[i] } else { 1 };
    if (4..=7).any(|i| extent(i) != 1) {
        return Err(NiftiError::InvalidHeader(
            "only single 3D volumes are supported".into(),
        ));
    }
    let mut n = [0usize; 3];
    for a in 0..3 {
        let e = extent(a + 1);
        if e < 1 {
            return Err(NiftiError::InvalidHeader(format!("dim[{}] = {e}", a + 1)));
        }
        n[a] = e as usize;
    }
    let shape = GridShape::new(n[0], n[1], n[2])?;

    let datatype = E::read_i16(&b[70..]);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };

    let unit_scale = match b[123] & 0x07 {
        1 => 1000.0,
        3 => 0.001,
        _ => 1.0,
    };
    let mut d = [1.0f64; 3];
    for a in 0..3 {
        if a as i16 + 1 <= ndim {
            d[a] = E::read_f32(&b[76 + 4 * (a + 1)..]) as f64 * unit_scale;
        }
    }
    let spacing = Spacing::new(d[0], d[1], d[2])?;

    let vox_offset = E::read_f32(&b[108..]);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(NiftiError::InvalidHeader(format!(
            "vox_offset = {vox_offset}"
        )));
    }
    let start = vox_offset as usize;
    let mut slope = E::read_f32(&b[112..]) as f64;
    let inter = E::read_f32(&b[116..]) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let count = shape.len();
    let end = start + count * width;
    if b.len() < end {
        return Err(NiftiError::Truncated {
            expected: end,
            got: b.len(),
        });
    }
    let payload = &b[start..end];
    let raw: Box<dyn Fn(usize) -> f64> = match datatype {
        DT_UINT8 => Box::new(|i| payload[i] as f64),
        DT_INT16 => Box::new(|i| E::read_i16(&payload[2 * i..]) as f64),
        _ => Box::new(|i| E::read_f32(&payload[4 * i..]) as f64),
    };
    let identity = slope == 1.0 && inter == 0.0;
    let values = (0..count)
        .map(|i| {
            let v = raw(i);
            if identity {
                v
            } else {
                v * slope + inter
            }
        })
        .collect();
    Ok(NiftiImage {
        shape,
        spacing,
        datatype,
        values,
    })
}

fn header(shape: GridShape, spacing: Spacing, datatype: i16, bitpix: i16) -> Vec<u8> {
    type E = LittleEndian;
    let mut h = vec![0u8; DATA_OFFSET];
    E::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = [3, shape.nx, shape.ny, shape.nz, 1, 1, 1, 1];
    for (i, &v) in dims.iter().enumerate() {
        E::write_i16(&mut h[40 + 2 * i..], v as i16);
    }
    E::write_i16(&mut h[70..], datatype);
    E::write_i16(&mut h[72..], bitpix);
    let pix = [1.0, spacing.dx, spacing.dy, spacing.dz, 1.0, 1.0, 1.0, 1.0];
    for (i, &v) in pix.iter().enumerate() {
        E::write_f32(&mut h[76 + 4 * i..], v as f32);
    }
    E::write_f32(&mut h[108..], DATA_OFFSET as f32);
    E::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn check_dims(shape: GridShape) -> Result<(), NiftiError> {
    if shape.as_array().iter().any(|&n| n > i16::MAX as usize) {
        return Err(NiftiError::InvalidHeader(format!(
            "grid {:?} exceeds the NIfTI-1 dimension limit",
            shape.as_array()
        )));
    }
    Ok(())
}

pub fn encode_mask(m: &Mask) -> Result<Vec<u8>, NiftiError> {
    check_dims(m.shape())?;
    let mut out = header(m.shape(), m.spacing(), DT_UINT8, 8);
    out.extend(m.data().iter().map(|&v| v as u8));
    Ok(out)
}

pub fn encode_ct(v: &CtVolume) -> Result<Vec<u8>, NiftiError> {
    check_dims(v.shape())?;
    let mut out = header(v.shape(), v.spacing(), DT_FLOAT32, 32);
    let start = out.len();
    out.resize(start + 4 * v.data().len(), 0);
    LittleEndian::write_f32_into(v.data(), &mut out[start..]);
    Ok(out)
}

fn write_bytes(bytes: &[u8], path: &Path) -> Result<(), NiftiError> {
    let io = |source| NiftiError::Io {
        path: path.to_path_buf(),
        source,
    };
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(io)?;
        enc.finish().map_err(io)?
    } else {
        bytes.to_vec()
    };
    fs::write(path, payload).map_err(io)
}

pub fn write_mask(m: &Mask, path: &Path) -> Result<(), NiftiError> {
    write_bytes(&encode_mask(m)?, path)
}

pub fn write_ct(v: &CtVolume, path: &Path) -> Result<(), NiftiError> {
    write_bytes(&encode_ct(v)?, path)
}
