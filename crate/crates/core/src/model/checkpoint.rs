//! Checkpoint files: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `<stem>.json` lists every parameter with its shape and byte offset into
//! `<stem>.bin`. Loading reproduces the parameters bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "cclx-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub blob: String,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub nbytes: u64,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Write `<stem>.json` and `<stem>.bin`; returns the manifest path.
pub fn save(model: &Model, stem: &Path) -> Result<PathBuf> {
    let (json_path, bin_path) = paths(stem);
    if let Some(dir) = json_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    let mut entries = Vec::with_capacity(model.params.len());
    for (name, _, t) in model.params.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        blob: bin_path.file_name().unwrap().to_string_lossy().into_owned(),
        config: model.config.clone(),
        params: entries,
    };
    fs::write(&bin_path, &blob)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(json_path)
}

/// Load from a manifest path or a stem.
pub fn load(path: &Path) -> Result<Model> {
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::data(format!("cannot read checkpoint manifest {}: {e}", json_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(format!("malformed checkpoint manifest {}: {e}", json_path.display())))?;
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::data(format!(
            "unsupported checkpoint format {:?} / dtype {:?}",
            manifest.format, manifest.dtype
        )));
    }
    let blob_path = json_path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_path)
        .map_err(|e| Error::data(format!("cannot read checkpoint blob {}: {e}", blob_path.display())))?;
    let mut named = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let numel: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if e.nbytes as usize != numel * 8 || end > blob.len() {
            return Err(Error::data(format!("checkpoint entry {} has inconsistent extent", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let params = ParameterSet::from_named(named)?;
    let fresh = Model::init(manifest.config.clone())?;
    if fresh.params.names() != params.names()
        || fresh.params.tensors().iter().zip(params.tensors()).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::data("checkpoint parameters do not match its model config"));
    }
    Ok(Model { config: manifest.config, params })
}
