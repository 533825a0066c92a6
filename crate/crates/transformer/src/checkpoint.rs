//! Versioned parameter blobs with a JSON manifest.
//!
//! Blob layout: `LGPECKPT`, `u32` format version, `u64` parameter count,
//! then the parameters as little-endian `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::model::Model;
use crate::train::Metrics;
use crate::TransformerError;

const MAGIC: &[u8; 8] = b"LGPECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub step: usize,
    pub n_params: usize,
    pub metrics: Option<Metrics>,
    pub blob: String,
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<f64>, TransformerError> {
    let bad = |m: &str| TransformerError::BadCheckpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != n * 8 {
        return Err(bad("length mismatch"));
    }
    Ok(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes `<stem>.ckpt` and `<stem>.json` into `dir`; returns the manifest path.
pub fn save(dir: &Path, stem: &str, model: &Model, step: usize, metrics: Option<&Metrics>) -> Result<PathBuf, TransformerError> {
    fs::create_dir_all(dir)?;
    let blob = format!("{stem}.ckpt");
    fs::write(dir.join(&blob), encode_params(&model.params))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        step,
        n_params: model.n_params(),
        metrics: metrics.cloned(),
        blob,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Restores a model from a manifest written by [`save`].
pub fn load(manifest_path: &Path) -> Result<(Model, Manifest), TransformerError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(TransformerError::BadCheckpoint(format!("unsupported version {}", manifest.version)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let params = decode_params(&fs::read(dir.join(&manifest.blob))?)?;
    let mut model = Model::new(manifest.config.clone(), 0)?;
    if params.len() != model.n_params() || params.len() != manifest.n_params {
        return Err(TransformerError::BadCheckpoint("parameter count does not match config".into()));
    }
    model.params = params;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_and_rejects_garbage() {
        let p = vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300];
        let b = encode_params(&p);
        let back = decode_params(&b).unwrap();
        assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), p.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(decode_params(&b[..b.len() - 1]).is_err());
        assert!(decode_params(b"NOTACKPT").is_err());
    }
}
