//! Checkpoints: a flat little-endian f64 blob plus a JSON index mapping each
//! parameter name to its byte offset and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FluxViTConfig, FluxViTParams, ParamSet};
use crate::error::{FluxError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub config: FluxViTConfig,
    /// Names in storage order.
    pub order: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

const FORMAT: &str = "flux-ckpt-f64le-v1";

fn index_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` (binary) and `<path>` with a `.json` extension (index).
pub fn save_checkpoint(path: &Path, params: &FluxViTParams) -> Result<CheckpointIndex> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut blob = Vec::with_capacity(params.set.num_scalars() * 8);
    let mut tensors = BTreeMap::new();
    for (name, t) in params.set.iter() {
        tensors.insert(
            name.to_string(),
            TensorEntry {
                offset: blob.len(),
                shape: t.shape().to_vec(),
            },
        );
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        format: FORMAT.to_string(),
        config: params.config.clone(),
        order: params.set.names().to_vec(),
        tensors,
    };
    fs::write(path, &blob)?;
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    fs::write(index_path(path), json)?;
    Ok(index)
}

pub fn load_checkpoint(path: &Path) -> Result<FluxViTParams> {
    let index: CheckpointIndex = serde_json::from_slice(&fs::read(index_path(path))?)?;
    if index.format != FORMAT {
        return Err(FluxError::Checkpoint(format!("unknown format {}", index.format)));
    }
    index.config.validate()?;
    let blob = fs::read(path)?;
    let mut set = ParamSet::default();
    for name in &index.order {
        let e = index
            .tensors
            .get(name)
            .ok_or_else(|| FluxError::Checkpoint(format!("index lacks {name}")))?;
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > blob.len() {
            return Err(FluxError::Checkpoint(format!("{name} runs past the end of the blob")));
        }
        let data = blob[e.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        set.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let reference = super::init_params(&index.config, 0)?;
    for (name, t) in reference.set.iter() {
        match set.get(name) {
            Some(found) if found.shape() == t.shape() => {}
            Some(found) => {
                return Err(FluxError::Checkpoint(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    found.shape(),
                    t.shape()
                )))
            }
            None => return Err(FluxError::Checkpoint(format!("missing parameter {name}"))),
        }
    }
    Ok(FluxViTParams {
        config: index.config,
        set,
    })
}
