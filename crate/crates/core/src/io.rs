//! On-disk formats: standalone numeric arrays and training checkpoints.
//!
//! An array lives as `stem.json` (shape and dtype manifest) plus `stem.bin`
//! (row-major little-endian scalars). A checkpoint is a directory holding
//! `manifest.json` and one blob per tensor container; blobs carry a length
//! and SHA-256 digest that are verified before anything is deserialized, so
//! a damaged file can never produce a partial load.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mmdit::{MmditError, ModelConfig, ModelParams};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::scalar::Scalar;

const ARRAY_FORMAT: &str = "mirage-array";
const CHECKPOINT_FORMAT: &str = "mirage-checkpoint";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("format tag {found:?}, expected {expected:?}")]
    Format { expected: String, found: String },
    #[error("format version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },
    #[error("array kind {found:?}, expected {expected:?}")]
    Kind { expected: String, found: String },
    #[error("dtype {found:?}, file cannot load as {expected:?}")]
    Dtype {
        expected: &'static str,
        found: String,
    },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("tensor {name}: manifest shape {manifest:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor table: {0}")]
    TensorTable(String),
    #[error(transparent)]
    Model(#[from] MmditError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayManifest {
    format: String,
    version: u32,
    kind: String,
    dtype: String,
    shape: Vec<usize>,
}

fn array_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn write_array<S: Scalar, I: Iterator<Item = S>>(
    stem: &Path,
    kind: &str,
    shape: Vec<usize>,
    values: I,
) -> Result<(), IoError> {
    let (manifest_path, bin_path) = array_paths(stem);
    let count: usize = shape.iter().product();
    let mut blob = Vec::with_capacity(count * S::BYTES);
    for v in values {
        v.write_le(&mut blob);
    }
    debug_assert_eq!(blob.len(), count * S::BYTES);
    let manifest = ArrayManifest {
        format: ARRAY_FORMAT.into(),
        version: FORMAT_VERSION,
        kind: kind.into(),
        dtype: S::DTYPE.into(),
        shape,
    };
    fs::write(&bin_path, &blob)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read_array<S: Scalar>(stem: &Path, kind: &str) -> Result<(Vec<usize>, Vec<S>), IoError> {
    let (manifest_path, bin_path) = array_paths(stem);
    let manifest: ArrayManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.format != ARRAY_FORMAT {
        return Err(IoError::Format {
            expected: ARRAY_FORMAT.into(),
            found: manifest.format,
        });
    }
    if manifest.version != FORMAT_VERSION {
        return Err(IoError::Version {
            expected: FORMAT_VERSION,
            found: manifest.version,
        });
    }
    if manifest.kind != kind {
        return Err(IoError::Kind {
            expected: kind.into(),
            found: manifest.kind,
        });
    }
    if manifest.dtype != S::DTYPE {
        return Err(IoError::Dtype {
            expected: S::DTYPE,
            found: manifest.dtype,
        });
    }
    let blob = fs::read(&bin_path)?;
    let count: usize = manifest.shape.iter().product();
    if blob.len() != count * S::BYTES {
        return Err(IoError::Integrity(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            bin_path.display(),
            blob.len(),
            manifest.shape,
            count * S::BYTES
        )));
    }
    let values = blob.chunks_exact(S::BYTES).map(S::read_le).collect();
    Ok((manifest.shape, values))
}

/// Writes `stem.json` + `stem.bin`; any existing extension on `stem` is replaced.
pub fn save_array2<S: Scalar>(stem: &Path, kind: &str, a: &Array2<S>) -> Result<(), IoError> {
    write_array(stem, kind, a.shape().to_vec(), a.iter().copied())
}

pub fn load_array2<S: Scalar>(stem: &Path, kind: &str) -> Result<Array2<S>, IoError> {
    let (shape, values) = read_array::<S>(stem, kind)?;
    if shape.len() != 2 {
        return Err(IoError::Integrity(format!(
            "expected rank 2, manifest has shape {shape:?}"
        )));
    }
    Array2::from_shape_vec((shape[0], shape[1]), values)
        .map_err(|e| IoError::Integrity(e.to_string()))
}

pub fn save_array4<S: Scalar>(stem: &Path, kind: &str, a: &Array4<S>) -> Result<(), IoError> {
    write_array(stem, kind, a.shape().to_vec(), a.iter().copied())
}

pub fn load_array4<S: Scalar>(stem: &Path, kind: &str) -> Result<Array4<S>, IoError> {
    let (shape, values) = read_array::<S>(stem, kind)?;
    if shape.len() != 4 {
        return Err(IoError::Integrity(format!(
            "expected rank 4, manifest has shape {shape:?}"
        )));
    }
    Array4::from_shape_vec((shape[0], shape[1], shape[2], shape[3]), values)
        .map_err(|e| IoError::Integrity(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob; tensors are packed densely in table order.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BlobMeta {
    pub file: String,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BlobMeta,
    pub v: BlobMeta,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Trainer step the parameters correspond to.
    pub step: u64,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub params: BlobMeta,
    pub optimizer: Option<OptimizerMeta>,
}

fn tensor_table_and_blob<S: Scalar>(params: &ModelParams<S>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut table = Vec::new();
    let mut blob = Vec::new();
    for (name, tensor) in params.named_tensors() {
        table.push(TensorEntry {
            name,
            shape: tensor.shape(),
            offset: blob.len() as u64,
        });
        for &v in tensor.iter() {
            v.write_le(&mut blob);
        }
    }
    (table, blob)
}

fn moments_blob<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut blob = Vec::new();
    for (_, tensor) in params.named_tensors() {
        for &v in tensor.iter() {
            v.write_le(&mut blob);
        }
    }
    blob
}

fn write_blob(dir: &Path, file: &str, blob: &[u8]) -> Result<BlobMeta, IoError> {
    fs::write(dir.join(file), blob)?;
    Ok(BlobMeta {
        file: file.into(),
        len: blob.len() as u64,
        sha256: sha256_hex(blob),
    })
}

/// Saves parameters (and optimizer state when given) under `dir`. The
/// manifest is written last so an interrupted save is never mistaken for a
/// complete checkpoint.
pub fn save_checkpoint<S: Scalar>(
    dir: &Path,
    params: &ModelParams<S>,
    step: u64,
    optimizer: Option<&AdamW<S>>,
) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let (tensors, blob) = tensor_table_and_blob(params);
    let params_meta = write_blob(dir, "params.bin", &blob)?;
    let optimizer_meta = match optimizer {
        Some(opt) => Some(OptimizerMeta {
            cfg: opt.cfg,
            step: opt.step,
            m: write_blob(dir, "opt_m.bin", &moments_blob(&opt.m))?,
            v: write_blob(dir, "opt_v.bin", &moments_blob(&opt.v))?,
        }),
        None => None,
    };
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        dtype: S::DTYPE.into(),
        step,
        model: params.cfg,
        tensors,
        params: params_meta,
        optimizer: optimizer_meta,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_verified_blob(dir: &Path, meta: &BlobMeta) -> Result<Vec<u8>, IoError> {
    let path = dir.join(&meta.file);
    let blob = fs::read(&path)?;
    if blob.len() as u64 != meta.len {
        return Err(IoError::Integrity(format!(
            "{} holds {} bytes, manifest says {}",
            path.display(),
            blob.len(),
            meta.len
        )));
    }
    let digest = sha256_hex(&blob);
    if digest != meta.sha256 {
        return Err(IoError::Integrity(format!(
            "{} digest {} does not match manifest {}",
            path.display(),
            digest,
            meta.sha256
        )));
    }
    Ok(blob)
}

fn fill_from_blob<S: Scalar>(
    params: &mut ModelParams<S>,
    table: &[TensorEntry],
    blob: &[u8],
    what: &str,
) -> Result<(), IoError> {
    let mut tensors = params.named_tensors_mut();
    if tensors.len() != table.len() {
        return Err(IoError::TensorTable(format!(
            "{what}: manifest lists {} tensors, model has {}",
            table.len(),
            tensors.len()
        )));
    }
    let mut cursor = 0u64;
    for (entry, (name, tensor)) in table.iter().zip(tensors.iter_mut()) {
        if &entry.name != name {
            return Err(IoError::TensorTable(format!(
                "{what}: manifest names {:?} where the model has {:?}",
                entry.name, name
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(IoError::TensorShape {
                name: entry.name.clone(),
                manifest: entry.shape.clone(),
                expected: tensor.shape(),
            });
        }
        if entry.offset != cursor {
            return Err(IoError::Integrity(format!(
                "{what}: tensor {} at offset {}, expected {}",
                entry.name, entry.offset, cursor
            )));
        }
        let bytes = tensor.len() * S::BYTES;
        let end = cursor as usize + bytes;
        if end > blob.len() {
            return Err(IoError::Integrity(format!(
                "{what}: tensor {} overruns the blob",
                entry.name
            )));
        }
        tensor.fill_from(
            blob[cursor as usize..end]
                .chunks_exact(S::BYTES)
                .map(S::read_le),
        );
        cursor = end as u64;
    }
    if cursor as usize != blob.len() {
        return Err(IoError::Integrity(format!(
            "{what}: {} trailing bytes after the last tensor",
            blob.len() - cursor as usize
        )));
    }
    Ok(())
}

pub struct LoadedCheckpoint<S: Scalar> {
    pub params: ModelParams<S>,
    pub step: u64,
    pub optimizer: Option<AdamW<S>>,
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<LoadedCheckpoint<S>, IoError> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(IoError::Format {
            expected: CHECKPOINT_FORMAT.into(),
            found: manifest.format,
        });
    }
    if manifest.version != FORMAT_VERSION {
        return Err(IoError::Version {
            expected: FORMAT_VERSION,
            found: manifest.version,
        });
    }
    if manifest.dtype != S::DTYPE {
        return Err(IoError::Dtype {
            expected: S::DTYPE,
            found: manifest.dtype,
        });
    }

    // all integrity checks run before any tensor is touched
    let params_blob = read_verified_blob(dir, &manifest.params)?;
    let opt_blobs = match &manifest.optimizer {
        Some(meta) => Some((
            read_verified_blob(dir, &meta.m)?,
            read_verified_blob(dir, &meta.v)?,
        )),
        None => None,
    };

    let mut params = ModelParams::<S>::init(manifest.model, 0)?;
    fill_from_blob(&mut params, &manifest.tensors, &params_blob, "params")?;

    let optimizer = match (&manifest.optimizer, opt_blobs) {
        (Some(meta), Some((m_blob, v_blob))) => {
            meta.cfg.validate()?;
            let mut opt = AdamW::new(&params, meta.cfg)?;
            fill_from_blob(&mut opt.m, &manifest.tensors, &m_blob, "opt_m")?;
            fill_from_blob(&mut opt.v, &manifest.tensors, &v_blob, "opt_v")?;
            opt.step = meta.step;
            Some(opt)
        }
        _ => None,
    };

    Ok(LoadedCheckpoint {
        params,
        step: manifest.step,
        optimizer,
    })
}
