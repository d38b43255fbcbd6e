//! GACK checkpoint files: a named tensor table.
//!
//! Layout: magic `GACK`, version `u16`, entry count `u32`, then per entry:
//! name length `u16` + UTF-8 name, ndim `u8`, dims as `u32`, f64
//! little-endian payload. Each parameter contributes two entries: its
//! values under its own name and its momentum buffer under
//! `opt.momentum.<name>`, so an optimizer can resume bit-exactly. Files are
//! written atomically; save -> load roundtrips are bit-exact.

use super::ParamStore;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 4] = b"GACK";
const VERSION: u16 = 1;
const MOMENTUM_PREFIX: &str = "opt.momentum.";

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(2 * store.len() as u32).to_le_bytes());
    for p in store.iter() {
        write_entry(&mut bytes, &p.name, &p.tensor.dims, &p.tensor.values);
    }
    for p in store.iter() {
        let name = format!("{MOMENTUM_PREFIX}{}", p.name);
        write_entry(&mut bytes, &name, &p.tensor.dims, &p.momentum);
    }
    crate::io::atomic_write(path, &bytes)
}

fn write_entry(bytes: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    bytes.push(dims.len() as u8);
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

/// Load a checkpoint into an existing store. Every parameter in the store
/// must be present with matching dims; every file entry must correspond to
/// a known parameter (momentum entries are optional per parameter).
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let table = read_table(path)?;
    let mut used = 0usize;
    for i in 0..store.len() {
        let name = store.get(i).name.clone();
        let entry = table
            .get(name.as_str())
            .ok_or_else(|| Error::format(path, format!("missing parameter {name}")))?;
        if entry.0 != store.get(i).tensor.dims {
            return Err(Error::format(
                path,
                format!("parameter {name} dims {:?} do not match expected {:?}", entry.0, store.get(i).tensor.dims),
            ));
        }
        store.get_mut(i).tensor.values.copy_from_slice(&entry.1);
        used += 1;
        if let Some(m) = table.get(format!("{MOMENTUM_PREFIX}{name}").as_str()) {
            if m.0 != store.get(i).tensor.dims {
                return Err(Error::format(path, format!("momentum dims mismatch for {name}")));
            }
            store.get_mut(i).momentum.copy_from_slice(&m.1);
            used += 1;
        }
    }
    if used != table.len() {
        let known: Vec<&str> = store.iter().map(|p| p.name.as_str()).collect();
        let extra: Vec<&String> = table
            .keys()
            .filter(|k| {
                let base = k.strip_prefix(MOMENTUM_PREFIX).unwrap_or(k);
                !known.contains(&base)
            })
            .collect();
        return Err(Error::format(path, format!("unknown parameters in checkpoint: {extra:?}")));
    }
    Ok(())
}

type Table = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn read_table(path: &Path) -> Result<Table> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut table = Table::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::format(path, "non-UTF-8 parameter name"))?
            .to_string();
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let payload = take(&mut pos, n * 8)?;
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if table.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::format(path, format!("duplicate entry {name}")));
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add_he("seg.enc1.w", vec![4, 3, 3, 3], 27, 5);
        s.add_zeros("seg.enc1.b", vec![4]);
        s.add_he("seg.cls.w", vec![2, 4, 1, 1], 4, 5);
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gack");
        let mut store = sample_store();
        store.get_mut(0).momentum.iter_mut().enumerate().for_each(|(i, m)| *m = i as f64 * 0.1);
        save_checkpoint(&path, &store).unwrap();

        let mut loaded = sample_store();
        // perturb, then restore
        loaded.get_mut(0).tensor.values[0] += 1.0;
        loaded.get_mut(0).momentum[1] = -9.0;
        load_checkpoint(&path, &mut loaded).unwrap();
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.tensor.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.tensor.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.momentum.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                       b.momentum.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn missing_parameter_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gack");
        let store = sample_store();
        save_checkpoint(&path, &store).unwrap();
        let mut other = ParamStore::new();
        other.add_zeros("seg.enc1.w", vec![4, 3, 3, 3]);
        other.add_zeros("seg.unknown", vec![2]);
        assert!(load_checkpoint(&path, &mut other).is_err());
    }

    #[test]
    fn dims_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gack");
        save_checkpoint(&path, &sample_store()).unwrap();
        let mut other = ParamStore::new();
        other.add_zeros("seg.enc1.w", vec![4, 3, 3]);
        assert!(load_checkpoint(&path, &mut other).is_err());
    }

    #[test]
    fn extra_entry_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.gack");
        save_checkpoint(&path, &sample_store()).unwrap();
        let mut subset = ParamStore::new();
        subset.add_zeros("seg.enc1.b", vec![4]);
        assert!(load_checkpoint(&path, &mut subset).is_err());
    }
}
