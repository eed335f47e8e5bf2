//! Checkpoints: one `.bin` + `.json` pair per tensor plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{init_params, ModelConfig, ModelParams, Scalar};
use crate::data::{read_array, write_array, ArrayData, ArrayHeader, Dtype};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub iteration: usize,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes into a sibling temporary directory, then renames it over `dir`.
pub fn save_checkpoint<F: Scalar>(dir: &Path, params: &ModelParams<F>, iteration: usize, config_hash: &str) -> Result<()> {
    let mut tmp = dir.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut tensors = Vec::new();
    for (name, tensor) in params.named_tensors() {
        let header = ArrayHeader {
            dtype: Dtype::F32,
            shape: tensor.shape.clone(),
            spacing_mm: None,
        };
        let data = ArrayData::F32(tensor.data.iter().map(|v| v.to_f32().expect("finite")).collect());
        write_array(&tmp.join(&name), &header, &data)?;
        tensors.push(TensorEntry {
            name,
            shape: tensor.shape.clone(),
        });
    }
    let manifest = CheckpointManifest {
        model: params.config.clone(),
        iteration,
        config_hash: config_hash.to_string(),
        tensors,
    };
    let path = tmp.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, CheckpointManifest)> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::format(&path, format!("cannot read manifest: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, format!("bad manifest: {e}")))?;
    let mut params = init_params::<f32>(&manifest.model, 0)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != manifest.tensors.len() {
        return Err(Error::format(&path, "tensor list does not match the model configuration"));
    }
    for ((slot, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&manifest.tensors) {
        if &entry.name != name || entry.shape != slot.shape {
            return Err(Error::format(&path, format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let stem = dir.join(name);
        let (header, data) = read_array(&stem)?;
        match data {
            ArrayData::F32(values) if header.shape == slot.shape => slot.data = values,
            _ => return Err(Error::format(dir.join(format!("{name}.json")), "tensor payload does not match manifest")),
        }
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params::<f32>(&ModelConfig::desk(), 3).unwrap();
        let target = dir.path().join("ckpt");
        save_checkpoint(&target, &params, 17, "abc").unwrap();
        // Overwrite in place.
        save_checkpoint(&target, &params, 18, "abc").unwrap();
        let (loaded, manifest) = load_checkpoint(&target).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(manifest.iteration, 18);
        assert_eq!(manifest.config_hash, "abc");
        assert_eq!(manifest.tensors.len(), params.named_tensors().len());
    }

    #[test]
    fn missing_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
    }
}
