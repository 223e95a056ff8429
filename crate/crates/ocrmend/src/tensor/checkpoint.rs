//! Flat binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"OMCK"
//! u32    format version (1)
//! u32    entry count
//! entry* u32 name length, name bytes (UTF-8),
//!        u32 rank, u64 * rank extents,
//!        f64 * numel values
//! ```
//!
//! Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"OMCK";
const VERSION: u32 = 1;

/// A tensor read back from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl SavedTensor {
    pub fn of(name: &str, tensor: &Tensor) -> SavedTensor {
        SavedTensor {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.to_vec(),
        }
    }
}

pub fn write<W: Write>(mut w: W, entries: &[SavedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for entry in entries {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(entry.shape.len() as u32).to_le_bytes())?;
        for &dim in &entry.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.data.len() {
            return Err(TensorError::BadCheckpoint(format!(
                "tensor {} has {} values for shape {:?}",
                entry.name,
                entry.data.len(),
                entry.shape
            )));
        }
        for &v in &entry.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<SavedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadCheckpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| TensorError::BadCheckpoint(format!("non-UTF-8 name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push(SavedTensor { name, shape, data });
    }
    Ok(entries)
}

pub fn save_to_path(path: &Path, entries: &[SavedTensor]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), entries)
}

pub fn load_from_path(path: &Path) -> Result<Vec<SavedTensor>> {
    read(BufReader::new(File::open(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let entries = vec![
            SavedTensor {
                name: "layer.weight".into(),
                shape: vec![2, 3],
                data: vec![0.1, -0.2, 1e-300, f64::MAX, -0.0, 3.5],
            },
            SavedTensor {
                name: "bias".into(),
                shape: vec![1],
                data: vec![std::f64::consts::PI],
            },
        ];
        let mut buf = Vec::new();
        write(&mut buf, &entries).unwrap();
        let back = read(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read(&b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00"[..]);
        assert!(matches!(err, Err(TensorError::BadCheckpoint(_))));
    }

    #[test]
    fn rejects_truncated_input() {
        let entries = vec![SavedTensor {
            name: "w".into(),
            shape: vec![4],
            data: vec![1.0, 2.0, 3.0, 4.0],
        }];
        let mut buf = Vec::new();
        write(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read(buf.as_slice()).is_err());
    }
}
