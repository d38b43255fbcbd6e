//! File formats.
//!
//! Two binary formats cover all persistent pixel/tensor data:
//!
//! - GATN (`*.gatn`): raw tensor file. Header: magic `GATN`, version `u16`,
//!   dtype code `u8` (1 = f64, 2 = u8), ndim `u8`, then `ndim` dims as
//!   `u32`, all little-endian, followed by the row-major payload.
//! - Binary portable pixmaps (`P5`/`P6`) for 1- and 3-channel data with
//!   maxval 255.
//!
//! Writes that must be atomic (checkpoints, run state) go through
//! [`atomic_write`]: write to a sibling temp file, then rename.

mod gatn;
mod pixmap;

pub use gatn::{read_labels, read_raster, read_tensor, write_labels, write_raster, TensorData};
pub use pixmap::{read_pixmap_labels, read_pixmap_raster, write_pixmap_labels, write_pixmap_raster};

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Write `bytes` to `path` via a temp file + rename, so readers never see a
/// partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a raster from either format, sniffing the magic bytes.
pub fn read_raster_any(path: &Path) -> Result<crate::tiling::Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"GATN") {
        read_raster(path)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        read_pixmap_raster(path)
    } else {
        Err(Error::format(path, "unknown magic; expected GATN, P5, or P6"))
    }
}

/// Read a label map from either format, sniffing the magic bytes.
pub fn read_labels_any(path: &Path, classes: usize) -> Result<crate::tiling::LabelMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"GATN") {
        read_labels(path, classes)
    } else if bytes.starts_with(b"P5") {
        read_pixmap_labels(path, classes)
    } else {
        Err(Error::format(path, "unknown magic; expected GATN or P5"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{LabelMask, Raster};
    use proptest::prelude::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("file.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        assert!(!path.with_extension("tmp-write").exists());
    }

    #[test]
    fn raster_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.gatn");
        let mut r = Raster::zeros(4, 3, 5);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i as f64).sin().abs();
        }
        write_raster(&path, &r).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back.data, r.data);
        assert_eq!((back.channels, back.height, back.width), (4, 3, 5));
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.gatn");
        let m = LabelMask::from_data(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        write_labels(&path, &m).unwrap();
        let back = read_labels(&path, 4).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gatn");
        std::fs::write(&path, b"GATN\x01\x00\x01").unwrap();
        assert!(matches!(read_raster(&path), Err(crate::Error::Format { .. })));
    }

    #[test]
    fn pixmap_roundtrip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = dir.path().join("g.pgm");
        let mut r = Raster::zeros(1, 2, 3);
        r.data = vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1];
        write_pixmap_raster(&gray, &r).unwrap();
        let back = read_pixmap_raster(&gray).unwrap();
        for (a, b) in r.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let rgb = dir.path().join("c.ppm");
        let mut r3 = Raster::zeros(3, 2, 2);
        r3.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 / 11.0);
        write_pixmap_raster(&rgb, &r3).unwrap();
        let back = read_pixmap_raster(&rgb).unwrap();
        assert_eq!(back.channels, 3);
        for (a, b) in r3.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pixmap_two_channels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::zeros(2, 2, 2);
        assert!(write_pixmap_raster(&dir.path().join("x.ppm"), &r).is_err());
    }

    #[test]
    fn labels_any_sniffs_magic() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMask::from_data(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
        let g = dir.path().join("m.gatn");
        write_labels(&g, &m).unwrap();
        assert_eq!(read_labels_any(&g, 3).unwrap(), m);
        let p = dir.path().join("m.pgm");
        write_pixmap_labels(&p, &m).unwrap();
        assert_eq!(read_labels_any(&p, 3).unwrap(), m);
    }

    proptest! {
        #[test]
        fn gatn_tensor_roundtrip(dims in proptest::collection::vec(1usize..6, 1..4), seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n: usize = dims.iter().product();
            let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.gatn");
            gatn::write_tensor_f64(&path, &dims, &values).unwrap();
            let back = read_tensor(&path).unwrap();
            match back {
                TensorData::F64 { dims: d, values: v } => {
                    prop_assert_eq!(d, dims);
                    prop_assert_eq!(v, values);
                }
                _ => prop_assert!(false, "wrong dtype"),
            }
        }
    }
}
