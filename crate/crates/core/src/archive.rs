//! Single-file archive of named arrays with a metadata header.
//!
//! Used for backbone weight import/export, adapter/decoder checkpoints and
//! the per-sample arrays of the dataset format. Layout (all integers
//! little-endian):
//!
//! ```text
//! [0..8)   magic  b"RGARCH1\0"
//! [8..12)  u32    format version (currently 1)
//! [12..20) u64    metadata length in bytes
//! ...      UTF-8  metadata (TOML by convention)
//! u32              entry count
//! per entry: u16 name length, name bytes, u8 flags (bit0 = frozen),
//!            u8 dtype (0 = f64, 1 = u8), u8 ndim, ndim x u64 dims,
//!            payload (f64 LE or raw u8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

pub const MAGIC: &[u8; 8] = b"RGARCH1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub frozen: bool,
    pub data: ArrayData,
}

impl ArchiveEntry {
    pub fn f64(name: &str, frozen: bool, value: ArrayD<f64>) -> Self {
        ArchiveEntry {
            name: name.to_string(),
            frozen,
            data: ArrayData::F64(value),
        }
    }

    pub fn u8(name: &str, value: ArrayD<u8>) -> Self {
        ArchiveEntry {
            name: name.to_string(),
            frozen: false,
            data: ArrayData::U8(value),
        }
    }

    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match &self.data {
            ArrayData::F64(a) => Ok(a),
            ArrayData::U8(_) => Err(Error::Format(format!("entry {} is not f64", self.name))),
        }
    }

    pub fn as_u8(&self) -> Result<&ArrayD<u8>> {
        match &self.data {
            ArrayData::U8(a) => Ok(a),
            ArrayData::F64(_) => Err(Error::Format(format!("entry {} is not u8", self.name))),
        }
    }
}

pub fn write_archive(path: &Path, meta: &str, entries: &[ArchiveEntry]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("entry name too long: {}", e.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(e.frozen)])?;
        match &e.data {
            ArrayData::F64(a) => {
                w.write_all(&[0u8, a.ndim() as u8])?;
                for d in a.shape() {
                    w.write_all(&(*d as u64).to_le_bytes())?;
                }
                for v in a.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            ArrayData::U8(a) => {
                w.write_all(&[1u8, a.ndim() as u8])?;
                for d in a.shape() {
                    w.write_all(&(*d as u64).to_le_bytes())?;
                }
                let data: Vec<u8> = a.iter().copied().collect();
                w.write_all(&data)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated archive while reading {what}: {e}")))
}

pub fn read_archive(path: &Path) -> Result<(String, Vec<ArchiveEntry>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact_ctx(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut v4 = [0u8; 4];
    read_exact_ctx(&mut r, &mut v4, "version")?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "archive format version {version} unsupported, this build reads version {FORMAT_VERSION}"
        )));
    }
    let mut v8 = [0u8; 8];
    read_exact_ctx(&mut r, &mut v8, "metadata length")?;
    let meta_len = u64::from_le_bytes(v8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact_ctx(&mut r, &mut meta_bytes, "metadata")?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
    read_exact_ctx(&mut r, &mut v4, "entry count")?;
    let n = u32::from_le_bytes(v4) as usize;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let mut v2 = [0u8; 2];
        read_exact_ctx(&mut r, &mut v2, "entry name length")?;
        let name_len = u16::from_le_bytes(v2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact_ctx(&mut r, &mut name_bytes, "entry name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("entry {i} name is not UTF-8: {e}")))?;
        let mut hdr = [0u8; 3];
        read_exact_ctx(&mut r, &mut hdr, "entry header")?;
        let frozen = hdr[0] != 0;
        let dtype = hdr[1];
        let ndim = hdr[2] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            read_exact_ctx(&mut r, &mut v8, "entry dims")?;
            dims.push(u64::from_le_bytes(v8) as usize);
        }
        let count: usize = dims.iter().product();
        let data = match dtype {
            0 => {
                let mut raw = vec![0u8; count * 8];
                read_exact_ctx(&mut r, &mut raw, &format!("entry {name} payload"))?;
                let vals: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap())
            }
            1 => {
                let mut raw = vec![0u8; count];
                read_exact_ctx(&mut r, &mut raw, &format!("entry {name} payload"))?;
                ArrayData::U8(ArrayD::from_shape_vec(IxDyn(&dims), raw).unwrap())
            }
            other => {
                return Err(Error::Format(format!(
                    "entry {name} has unknown dtype code {other}"
                )))
            }
        };
        entries.push(ArchiveEntry { name, frozen, data });
    }
    Ok((meta, entries))
}

/// All parameters of a store as archive entries, in insertion order.
pub fn entries_from_store(store: &ParamStore) -> Vec<ArchiveEntry> {
    store
        .iter()
        .map(|(_, e)| ArchiveEntry::f64(&e.name, e.frozen, e.value.clone()))
        .collect()
}

/// Restore parameters by name. Every store parameter must be present in the
/// archive; extra archive entries are rejected to catch config mismatches.
pub fn load_entries_into_store(store: &mut ParamStore, entries: &[ArchiveEntry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Format(format!(
            "archive holds {} arrays but the model has {} parameters",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id: ParamId = store
            .find(&e.name)
            .ok_or_else(|| Error::Format(format!("archive entry {} matches no parameter", e.name)))?;
        store.load_value(id, e.as_f64()?.clone())?;
    }
    Ok(())
}
