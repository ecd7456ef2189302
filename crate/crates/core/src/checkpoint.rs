//! Checkpoints: a JSON container of named tensors plus a sidecar holding the
//! model configuration and the training normalization statistics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::tokenizer::NormStats;

pub const TENSORS_FILE: &str = "model.tensors.json";
pub const SIDECAR_FILE: &str = "model.config.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub model: ModelConfig,
    pub stats: NormStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub stats: NormStats,
    pub params: ModelParams,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tensors: Vec<NamedTensor> = ck
        .params
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            shape: [t.rows, t.cols],
            data: t.data.clone(),
        })
        .collect();
    let sidecar = Sidecar {
        model: ck.model.clone(),
        stats: ck.stats.clone(),
    };
    write_json(&dir.join(TENSORS_FILE), &tensors)?;
    write_json(&dir.join(SIDECAR_FILE), &sidecar)
}

fn write_json<T: Serialize>(path: &PathBuf, v: &T) -> Result<()> {
    let s = serde_json::to_string(v)?;
    fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a checkpoint, checking that its tensors are exactly the ones the
/// stored configuration builds, with matching shapes.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let side_path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(side_path.display().to_string(), e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| ckpt_err(&side_path, e))?;
    let tpath = dir.join(TENSORS_FILE);
    let text = fs::read_to_string(&tpath).map_err(|e| Error::io(tpath.display().to_string(), e))?;
    let tensors: Vec<NamedTensor> = serde_json::from_str(&text).map_err(|e| ckpt_err(&tpath, e))?;

    let mut params = init_params(&sidecar.model, 0).map_err(|e| ckpt_err(&side_path, e))?;
    if tensors.len() != params.n_tensors() {
        return Err(ckpt_err(
            &tpath,
            format!("{} tensors, configuration needs {}", tensors.len(), params.n_tensors()),
        ));
    }
    for t in tensors {
        let target = params
            .get_mut(&t.name)
            .ok_or_else(|| ckpt_err(&tpath, format!("unexpected tensor {}", t.name)))?;
        if [target.rows, target.cols] != t.shape || t.data.len() != t.shape[0] * t.shape[1] {
            return Err(ckpt_err(
                &tpath,
                format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name,
                    t.shape,
                    [target.rows, target.cols]
                ),
            ));
        }
        *target = Tensor::from_vec(t.shape[0], t.shape[1], t.data);
    }
    Ok(Checkpoint {
        model: sidecar.model,
        stats: sidecar.stats,
        params,
    })
}
