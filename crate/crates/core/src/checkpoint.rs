//! On-disk checkpoints: a JSON manifest plus one raw little-endian `f64`
//! buffer per parameter.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params/0000.bin
//! <dir>/params/0001.bin
//! ...
//! ```
//!
//! The manifest records the format version, dtype, the model configuration
//! (so a checkpoint is self-describing) and, per parameter, its name, shape
//! and buffer file. Loading is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{numel, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save(dir: &Path, store: &ParamStore, config: &serde_json::Value) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir)?;
    let mut entries = Vec::with_capacity(store.len());
    for (k, id) in store.ids().enumerate() {
        let file = format!("params/{k:04}.bin");
        let value = store.value(id);
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for v in value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ParamEntry {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        config: config.clone(),
        params: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "format_version",
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::format("dtype", format!("expected {DTYPE}, got {}", manifest.dtype)));
    }
    Ok(manifest)
}

/// Loads every parameter in the manifest into a fresh store.
pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest = read_manifest(dir)?;
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let bytes = fs::read(dir.join(&entry.file))?;
        let n = numel(&entry.shape);
        if bytes.len() != n * 8 {
            return Err(Error::format(
                entry.name.clone(),
                format!("buffer holds {} bytes, shape needs {}", bytes.len(), n * 8),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((store, manifest.config))
}

/// Overwrites the values of `store` with the checkpoint's, matching by name and shape.
pub fn load_into(dir: &Path, store: &mut ParamStore) -> Result<serde_json::Value> {
    let (loaded, config) = load(dir)?;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = loaded.id(&name)?;
        store.set_value(id, loaded.value(src).clone())?;
    }
    Ok(config)
}
