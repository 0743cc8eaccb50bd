//! Checkpoint directory format: `manifest.json` plus one raw little-endian
//! `f32` file per parameter array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Layout, ModelParams, NetworkConfig, PARAMS_VERSION};
use crate::data::patch::class_names;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: NetworkConfig,
    pub class_order: Vec<String>,
    pub epoch: usize,
    /// Validation set name → (class name or "mean") → Dice.
    pub validation: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    dir: &Path,
    epoch: usize,
    validation: BTreeMap<String, BTreeMap<String, Option<f64>>>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::with_capacity(params.arrays.len());
    for ((name, shape), data) in params.names.iter().zip(&params.shapes).zip(&params.arrays) {
        let file = format!("{name}.f32");
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        version: params.version,
        config: params.config.clone(),
        class_order: class_names(params.config.num_classes),
        epoch,
        validation,
        arrays,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.version != PARAMS_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    if manifest.class_order != class_names(manifest.config.num_classes) {
        return Err(Error::Checkpoint(format!(
            "class order {:?} differs from this build's",
            manifest.class_order
        )));
    }
    let layout = Layout::new(&manifest.config);
    let expected: Vec<(&str, &[usize])> = layout.names().zip(layout.shapes()).collect();
    if expected.len() != manifest.arrays.len()
        || expected
            .iter()
            .zip(&manifest.arrays)
            .any(|((n, s), a)| *n != a.name || *s != a.shape.as_slice())
    {
        return Err(Error::Checkpoint(
            "array list does not match the configured network layout".into(),
        ));
    }
    let mut params = ModelParams::<f32>::zeros(&manifest.config)?;
    for (entry, dst) in manifest.arrays.iter().zip(params.arrays.iter_mut()) {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != dst.len() * 4 {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                dst.len() * 4
            )));
        }
        for (v, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok((params, manifest))
}
