//! Binary portable pixmaps (P5 grayscale, P6 RGB), maxval 255.

use crate::error::{Error, Result};
use crate::tiling::{LabelMask, Raster};
use std::path::Path;

/// Write a 1-channel raster as P5 or a 3-channel raster as P6, mapping
/// `[0,1]` to `0..=255` by rounding.
pub fn write_pixmap_raster(path: &Path, raster: &Raster) -> Result<()> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Dimension(format!(
                "pixmap supports 1 or 3 channels, got {c}; use the tensor format instead"
            )))
        }
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    for r in 0..raster.height {
        for c in 0..raster.width {
            for ch in 0..raster.channels {
                let v = (raster.get(ch, r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                bytes.push(v);
            }
        }
    }
    super::atomic_write(path, &bytes)
}

pub fn read_pixmap_raster(path: &Path) -> Result<Raster> {
    let (channels, width, height, pixels) = read_pixmap(path)?;
    let mut raster = Raster::zeros(channels, height, width);
    for r in 0..height {
        for c in 0..width {
            for ch in 0..channels {
                let v = pixels[(r * width + c) * channels + ch] as f64 / 255.0;
                raster.set(ch, r, c, v);
            }
        }
    }
    Ok(raster)
}

/// Write raw class indices as P5 intensities (class id == intensity).
pub fn write_pixmap_labels(path: &Path, labels: &LabelMask) -> Result<()> {
    if labels.classes > 256 {
        return Err(Error::Dimension(format!("{} classes exceed pixmap range", labels.classes)));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    bytes.extend_from_slice(&labels.data);
    super::atomic_write(path, &bytes)
}

/// Read a P5 pixmap whose intensities are raw class indices.
pub fn read_pixmap_labels(path: &Path, classes: usize) -> Result<LabelMask> {
    let (channels, width, height, pixels) = read_pixmap(path)?;
    if channels != 1 {
        return Err(Error::format(path, "label pixmap must be P5 grayscale"));
    }
    LabelMask::from_data(height, width, classes, pixels)
}

fn read_pixmap(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let channels = if bytes.starts_with(b"P5") {
        1
    } else if bytes.starts_with(b"P6") {
        3
    } else {
        return Err(Error::format(path, "not a binary P5/P6 pixmap"));
    };
    // header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments allowed; one whitespace byte ends the header
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed pixmap header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed pixmap header"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let n = width * height * channels;
    if bytes.len() < pos + n {
        return Err(Error::format(path, "truncated pixmap payload"));
    }
    Ok((channels, width, height, bytes[pos..pos + n].to_vec()))
}
