//! Flat binary container of named tensors.
//!
//! Layout: magic `HTCK`, format version (`u32` LE), index length (`u64` LE),
//! a UTF-8 JSON index, then every tensor's values as `f32` little-endian in
//! index order. The index carries each tensor's name, shape and byte offset
//! into the data section, plus a free-form `meta` object.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"HTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed index: {0}")]
    Index(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write<W: Write>(
    mut w: W,
    tensors: &[(&str, &Tensor)],
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = IndexEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let index = serde_json::to_vec(&Index {
        meta: meta.clone(),
        tensors: entries,
    })
    .map_err(|e| CheckpointError::Index(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    w.write_all(&index)?;
    for (_, t) in tensors {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut index = vec![0u8; len];
    r.read_exact(&mut index)?;
    let index: Index = serde_json::from_slice(&index).map_err(|e| CheckpointError::Index(e.to_string()))?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let tensors = index
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let bytes = data
                .get(start..end)
                .ok_or_else(|| CheckpointError::Index(format!("{} runs past the data section", e.name)))?;
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|err| CheckpointError::Index(err.to_string()))?;
            Ok((e.name, t))
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    Ok(Checkpoint {
        meta: index.meta,
        tensors,
    })
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)], meta: &serde_json::Value) -> Result<(), CheckpointError> {
    write(BufWriter::new(File::create(path)?), tensors, meta)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let a = Tensor::matrix(2, 3, vec![0.1, -2.5, 3.0, 1e-3, 7.25, -0.0]).unwrap();
        let b = Tensor::vector(vec![42.0]);
        let meta = serde_json::json!({ "kind": "test" });
        let mut buf = Vec::new();
        write(&mut buf, &[("a", &a), ("b.bias", &b)], &meta).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let ck = read(buf.as_slice()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.tensors.len(), 2);
        let back = ck.get("a").unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        for (x, y) in a.data().iter().zip(back.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
        assert_eq!(ck.get("b.bias").unwrap().data(), &[42.0]);
    }

    #[test]
    fn rejects_foreign_data() {
        assert!(matches!(read(&b"NOPE\x01\0\0\0"[..]), Err(CheckpointError::BadMagic)));
        let mut buf = Vec::new();
        write(&mut buf, &[], &serde_json::Value::Null).unwrap();
        buf[4] = 9;
        assert!(matches!(read(buf.as_slice()), Err(CheckpointError::Version(9))));
    }
}
