//! Checkpoints: a JSON manifest plus one flat little-endian blob.
//!
//! The manifest lists every tensor's name, shape, precision and byte offset
//! into the blob. Writing then reading a store is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(store.num_scalars() * T::PRECISION.byte_width());
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            precision: T::PRECISION,
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        blob: blob_name.clone(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let mpath = manifest_path(dir, stem);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn decode<T: Scalar>(bytes: &[u8], precision: Precision) -> Vec<T> {
    match precision {
        Precision::F32 => bytes.chunks_exact(4).map(|c| T::from_f(f32::read_le(c) as f64)).collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| T::from_f(f64::read_le(c))).collect(),
    }
}

/// Read every tensor of a checkpoint into a fresh store, in manifest order.
pub fn read_checkpoint<T: Scalar>(dir: &Path, stem: &str) -> Result<ParamStore<T>> {
    let mpath = manifest_path(dir, stem);
    let raw = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Metadata {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Truncated {
            path: blob_path,
            expected: manifest.blob_bytes,
            found: blob.len() as u64,
        });
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * entry.precision.byte_width();
        let bytes = blob.get(start..end).ok_or_else(|| Error::Truncated {
            path: blob_path.clone(),
            expected: end as u64,
            found: blob.len() as u64,
        })?;
        let tensor = Tensor::new(entry.shape.clone(), decode(bytes, entry.precision))?;
        store.add(entry.name.clone(), tensor);
    }
    Ok(store)
}

/// Overwrite the tensors of `store` with those of a checkpoint; names and shapes must match.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, dir: &Path, stem: &str) -> Result<()> {
    let loaded = read_checkpoint::<T>(dir, stem)?;
    if loaded.len() != store.len() {
        return Err(Error::Input(format!(
            "checkpoint holds {} tensors, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, t) in loaded.iter() {
        store.set(name, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0e-39]).unwrap());
        store.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        write_checkpoint(&store, dir.path(), "model").unwrap();
        let back = read_checkpoint::<f32>(dir.path(), "model").unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_blob_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        write_checkpoint(&store, dir.path(), "m").unwrap();
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_checkpoint::<f64>(dir.path(), "m"), Err(Error::Truncated { .. })));
    }
}
