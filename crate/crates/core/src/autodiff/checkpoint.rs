//! Little-endian tensor blob shared by checkpoints and datasets.
//!
//! ```text
//! magic    4 bytes  "PPTB"
//! version  u32      1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!          values f64 × prod(dims)
//! ```
//!
//! Checkpoints pair the blob with a JSON sidecar holding hyperparameters.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{AutodiffError, ParameterStore, Tensor};
use crate::io::atomic_write;

pub const MAGIC: &[u8; 4] = b"PPTB";
pub const VERSION: u32 = 1;

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Format(detail.into())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, AutodiffError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("entry name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

pub fn tensors_to_bytes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, entries).expect("writing to a Vec cannot fail");
    buf
}

impl ParameterStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        tensors_to_bytes(self.iter())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let mut store = ParameterStore::new();
        for (name, t) in read_tensors(bytes)? {
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Sidecar path for a checkpoint blob: `model.bin` → `model.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes blob and JSON sidecar atomically.
pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    meta: &serde_json::Value,
) -> Result<(), AutodiffError> {
    atomic_write(path, &store.to_bytes())?;
    let json = serde_json::to_vec_pretty(meta).map_err(|e| bad(e.to_string()))?;
    atomic_write(&sidecar_path(path), &json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, serde_json::Value), AutodiffError> {
    let store = ParameterStore::from_bytes(&std::fs::read(path)?)?;
    let meta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)
        .map_err(|e| bad(format!("sidecar: {e}")))?;
    Ok((store, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_documented_bytes() {
        let t = Tensor::new(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = tensors_to_bytes([("ab", &t)]);
        let mut want = Vec::new();
        want.extend_from_slice(b"PPTB");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_tensors(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), rows in 1usize..4) {
            let cols = values.len() / rows;
            let t = Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
            let s = Tensor::scalar(3.25);
            let bytes = tensors_to_bytes([("x", &t), ("s", &s)]);
            let back = read_tensors(&bytes[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].1, &t);
            prop_assert_eq!(&back[1].1, &s);
        }
    }
}
