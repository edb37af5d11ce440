//! Parameter checkpoints: `manifest.json` plus one little-endian f64 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Parameter;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    /// Free-form model description (variant, action grid, ...).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    params: &[&Parameter<T>],
    meta: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for p in params {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: "f64le".into(),
        blob: BLOB_FILE.into(),
        meta,
        params: entries,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: man_path.clone(),
        source: e,
    })?;
    fs::write(&man_path, text).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if manifest.format != "f64le" {
        return Err(Error::format(&path, format!("unsupported format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Load every tensor listed in the manifest, in manifest order.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor<T>)>)> {
    let manifest = read_manifest(dir)?;
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::format(
                &blob_path,
                format!(
                    "parameter {} needs bytes {start}..{end}, blob has {}",
                    entry.name,
                    blob.len()
                ),
            ));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)?));
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Parameter::new("a", Tensor::<f64>::uniform(&[2, 3, 1, 4], 1.0, &mut rng));
        let b = Parameter::new("b", Tensor::<f64>::from_vec(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &[&a, &b], serde_json::json!({"variant": "dqn"})).unwrap();
        let (manifest, loaded) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(manifest.meta["variant"], "dqn");
        assert_eq!(manifest.params[1].offset, 24 * 8);
        for ((name, t), p) in loaded.iter().zip([&a, &b]) {
            assert_eq!(name, &p.name);
            let lhs: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let rhs: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn truncated_blob_is_reported() {
        let a = Parameter::new("a", Tensor::<f32>::zeros(&[4]));
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &[&a], serde_json::Value::Null).unwrap();
        fs::write(dir.path().join(BLOB_FILE), [0u8; 16]).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("blob has 16"), "{err}");
    }
}
