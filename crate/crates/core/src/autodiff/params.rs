//! Named parameter sets, gradient maps, and the checkpoint container.
//!
//! Checkpoints are a flat named-tensor file: a version header followed
//! by (name, shape, raw little-endian f64) entries in name order, so
//! the bytes are identical across platforms and runs.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::array::Array;
use crate::scalar::Scalar;

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOBNET\0\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed tensor name")]
    BadName,
}

/// Named trainable tensors. Name order is the canonical order everywhere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> &Array<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array<T> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|a| a.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(array.rank() as u32).to_le_bytes());
            for &d in array.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in array.iter() {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC.as_slice() {
            return Err(CheckpointError::BadMagic);
        }
        let version = cur.read_u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = cur.read_u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = cur.read_u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = cur.read_u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.read_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(T::from_f64(cur.read_f64()?));
            }
            entries.insert(name, Array::from_vec(&shape, data));
        }
        Ok(Self { entries })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Gradients keyed by parameter name, as produced by `Graph::backprop`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T> {
    entries: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub(crate) fn new(entries: BTreeMap<String, Array<T>>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> &Array<T> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient for parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("b.bias", Array::from_vec(&[2], vec![0.5, -0.25]));
        ps.insert("a.weight", Array::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        ps
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let ps = sample_params();
        ps.save(&path).unwrap();
        let loaded = ParamSet::<f64>::load(&path).unwrap();
        assert_eq!(ps, loaded);
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        sample_params().save(&p1).unwrap();
        sample_params().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            ParamSet::<f64>::load(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", Array::scalar(1.0));
        ps.insert("w", Array::scalar(2.0));
    }
}
