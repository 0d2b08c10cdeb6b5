//! Checkpoint container: one binary file of little-endian floats per run
//! plus a JSON manifest mapping tensor name → shape, dtype and byte offset.
//! The manifest carries the model config and RNG seed for reproducibility.
//!
//! Interchange checkpoints use f32 storage; trainer state (optimizer
//! moments, resume points) uses f64 so a resumed run reproduces the
//! uninterrupted trajectory exactly.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
const FORMAT: &str = "latentlab-ckpt-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub file: String,
    /// Byte offset into `file`.
    pub offset: u64,
    pub numel: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (training progress, optimizer layout, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Write named tensors plus a manifest into `dir`.
pub fn save_named(
    dir: &Path,
    config: ModelConfig,
    seed: u64,
    tensors: &[(String, Vec<usize>, &[f64])],
    dtype: Dtype,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bin = BufWriter::new(File::create(dir.join(TENSOR_FILE))?);
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!("tensor {name} shape/data mismatch")));
        }
        match dtype {
            Dtype::F32 => {
                for &v in data.iter() {
                    bin.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Dtype::F64 => {
                for &v in data.iter() {
                    bin.write_all(&v.to_le_bytes())?;
                }
            }
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype,
            file: TENSOR_FILE.into(),
            offset,
            numel,
        });
        offset += (numel * dtype.width()) as u64;
    }
    bin.flush()?;
    let manifest =
        Manifest { format: FORMAT.into(), config, seed, tensors: entries, extra };
    let mut mf = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.flush()?;
    Ok(())
}

/// Read every tensor named in the manifest back as f64 buffers.
pub fn load_named(dir: &Path) -> Result<(Manifest, HashMap<String, Vec<f64>>)> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Malformed(format!("unknown checkpoint format {}", manifest.format)));
    }
    let mut files: HashMap<&str, Vec<u8>> = HashMap::new();
    let mut out = HashMap::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if !files.contains_key(entry.file.as_str()) {
            let mut buf = Vec::new();
            File::open(dir.join(&entry.file))?.read_to_end(&mut buf)?;
            files.insert(entry.file.as_str(), buf);
        }
        let bytes = &files[entry.file.as_str()];
        let start = entry.offset as usize;
        let end = start + entry.numel * entry.dtype.width();
        if end > bytes.len() {
            return Err(Error::Malformed(format!("tensor {} overruns {}", entry.name, entry.file)));
        }
        let raw = &bytes[start..end];
        let data: Vec<f64> = match entry.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => {
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };
        out.insert(entry.name.clone(), data);
    }
    Ok((manifest, out))
}

/// Save model parameters as a checkpoint directory.
pub fn save_model(dir: &Path, params: &ModelParams, dtype: Dtype) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, &[f64])> = params
        .tensors()
        .into_iter()
        .map(|(name, shape, data)| (name, shape, &data[..]))
        .collect();
    save_named(dir, params.config, params.seed, &tensors, dtype, serde_json::Value::Null)
}

/// Load model parameters from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<ModelParams> {
    let (manifest, mut tensors) = load_named(dir)?;
    ModelParams::from_named_tensors(manifest.config, manifest.seed, |name, _| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Malformed(format!("checkpoint missing tensor {name}")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, vocab: 7, max_seq: 16 }
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(cfg(), 11).unwrap();
        save_model(dir.path(), &params, Dtype::F64).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.config, params.config);
        assert_eq!(back.seed, params.seed);
        for ((na, _, ta), (nb, _, tb)) in params.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.as_slice(), tb.as_slice());
        }
        assert_eq!(params.fingerprint(), back.fingerprint());
    }

    #[test]
    fn f32_roundtrip_within_float_precision() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(cfg(), 3).unwrap();
        save_model(dir.path(), &params, Dtype::F32).unwrap();
        let back = load_model(dir.path()).unwrap();
        for ((_, _, ta), (_, _, tb)) in params.tensors().iter().zip(back.tensors().iter()) {
            for (a, b) in ta.iter().zip(tb.iter()) {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
                assert_eq!(*b, *b as f32 as f64, "storage must be exactly f32");
            }
        }
    }

    #[test]
    fn manifest_records_layout() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(cfg(), 5).unwrap();
        save_model(dir.path(), &params, Dtype::F32).unwrap();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.seed, 5);
        assert_eq!(manifest.tensors.len(), params.tensors().len());
        // Offsets are contiguous little-endian f32 records.
        let mut expect = 0u64;
        for e in &manifest.tensors {
            assert_eq!(e.offset, expect);
            assert_eq!(e.numel, e.shape.iter().product::<usize>());
            expect += (e.numel * 4) as u64;
        }
        let bin = std::fs::metadata(dir.path().join(TENSOR_FILE)).unwrap().len();
        assert_eq!(bin, expect);
    }

    #[test]
    fn missing_tensor_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(cfg(), 2).unwrap();
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, d)| (n, s, d.to_vec()))
            .collect();
        tensors.pop();
        let refs: Vec<(String, Vec<usize>, &[f64])> =
            tensors.iter().map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice())).collect();
        save_named(dir.path(), cfg(), 2, &refs, Dtype::F32, serde_json::Value::Null).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Malformed(_))));
    }
}
