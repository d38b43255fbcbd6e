//! GATN raw tensor files.

use crate::error::{Error, Result};
use crate::tiling::{LabelMask, Raster};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GATN";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

/// Payload of a GATN file.
pub enum TensorData {
    F64 { dims: Vec<usize>, values: Vec<f64> },
    U8 { dims: Vec<usize>, values: Vec<u8> },
}

pub fn write_tensor_f64(path: &Path, dims: &[usize], values: &[f64]) -> Result<()> {
    let mut bytes = header(DTYPE_F64, dims);
    bytes.reserve(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    super::atomic_write(path, &bytes)
}

pub fn write_tensor_u8(path: &Path, dims: &[usize], values: &[u8]) -> Result<()> {
    let mut bytes = header(DTYPE_U8, dims);
    bytes.extend_from_slice(values);
    super::atomic_write(path, &bytes)
}

fn header(dtype: u8, dims: &[usize]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + 4 * dims.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(dtype);
    bytes.push(dims.len() as u8);
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { path, bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = cur.take(1)?[0];
    let ndim = cur.take(1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
    }
    let n: usize = dims.iter().product();
    match dtype {
        DTYPE_F64 => {
            let payload = cur.take(n * 8)?;
            let values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(TensorData::F64 { dims, values })
        }
        DTYPE_U8 => Ok(TensorData::U8 { dims, values: cur.take(n)?.to_vec() }),
        other => Err(Error::format(path, format!("unknown dtype code {other}"))),
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Write a raster as an f64 tensor with dims `[C, H, W]`.
pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    write_tensor_f64(path, &[raster.channels, raster.height, raster.width], &raster.data)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    match read_tensor(path)? {
        TensorData::F64 { dims, values } => {
            if dims.len() != 3 {
                return Err(Error::format(path, format!("raster needs 3 dims, got {}", dims.len())));
            }
            Raster::from_data(dims[0], dims[1], dims[2], values)
        }
        TensorData::U8 { .. } => Err(Error::format(path, "raster must be f64")),
    }
}

/// Write a label mask as a u8 tensor with dims `[H, W]`.
pub fn write_labels(path: &Path, labels: &LabelMask) -> Result<()> {
    write_tensor_u8(path, &[labels.height, labels.width], &labels.data)
}

pub fn read_labels(path: &Path, classes: usize) -> Result<LabelMask> {
    match read_tensor(path)? {
        TensorData::U8 { dims, values } => {
            if dims.len() != 2 {
                return Err(Error::format(path, format!("labels need 2 dims, got {}", dims.len())));
            }
            LabelMask::from_data(dims[0], dims[1], classes, values)
        }
        TensorData::F64 { .. } => Err(Error::format(path, "labels must be u8")),
    }
}
