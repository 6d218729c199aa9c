//! Single-file checkpoints: a safetensors archive whose metadata carries
//! the format version, the full flat config, the iteration count and the
//! frozen/trainable name split.

use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::DaqModel;
use crate::ops::tensor_bytes;
use crate::params::{ParamStore, Preset};

pub const FORMAT_VERSION: &str = "1";

fn to_st_dtype(dtype: DType) -> Result<Dtype> {
    match dtype {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn from_st_dtype(dtype: Dtype) -> Result<DType> {
    match dtype {
        Dtype::F32 => Ok(DType::F32),
        Dtype::F64 => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?} in archive"))),
    }
}

/// Write every named parameter plus run metadata to `path`.
pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &Config, iteration: usize) -> Result<()> {
    let mut raw: Vec<(String, DType, Vec<usize>, Vec<u8>)> = vec![];
    let mut trainable_names = vec![];
    let mut frozen_names = vec![];
    for (name, tensor, trainable) in store.iter() {
        raw.push((name.to_string(), tensor.dtype(), tensor.dims().to_vec(), tensor_bytes(&tensor)?));
        if trainable {
            trainable_names.push(name.to_string());
        } else {
            frozen_names.push(name.to_string());
        }
    }
    let views: Vec<(String, TensorView)> = raw
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            let view = TensorView::new(to_st_dtype(*dtype)?, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(format!("cannot serialize `{name}`: {e}")))?;
            Ok((name.clone(), view))
        })
        .collect::<Result<_>>()?;
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("config".to_string(), cfg.to_config_string());
    meta.insert("iteration".to_string(), iteration.to_string());
    meta.insert("trainable".to_string(), trainable_names.join(","));
    meta.insert("frozen".to_string(), frozen_names.join(","));
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::tensor::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))?;
    Ok(())
}

/// Everything read back from an archive, before model reconstruction.
pub struct LoadedCheckpoint {
    pub config: Config,
    pub iteration: usize,
    pub preset: Preset,
    pub trainable_names: Vec<String>,
    pub frozen_names: Vec<String>,
}

pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, metadata) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let meta = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("archive has no metadata block".into()))?;
    let version = meta
        .get("format_version")
        .ok_or_else(|| Error::Checkpoint("archive is missing `format_version`".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version mismatch: archive has `{version}`, this build reads `{FORMAT_VERSION}`"
        )));
    }
    let config_text = meta
        .get("config")
        .ok_or_else(|| Error::Checkpoint("archive is missing `config`".into()))?;
    let config = Config::parse_str(config_text)?;
    let iteration = meta
        .get("iteration")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("archive is missing `iteration`".into()))?;
    let split = |key: &str| -> Vec<String> {
        meta.get(key)
            .map(|v| v.split(',').filter(|s| !s.is_empty()).map(|s| s.to_string()).collect())
            .unwrap_or_default()
    };
    let st = SafeTensors::deserialize(&buf)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let mut preset = Preset::new();
    for (name, view) in st.tensors() {
        preset.insert(
            name.to_string(),
            (from_st_dtype(view.dtype())?, view.shape().to_vec(), view.data().to_vec()),
        );
    }
    Ok(LoadedCheckpoint {
        config,
        iteration,
        preset,
        trainable_names: split("trainable"),
        frozen_names: split("frozen"),
    })
}

/// Rebuild the model from the archive's own embedded config; forward passes
/// reproduce the saved model bit for bit.
pub fn load_model(path: &Path) -> Result<(DaqModel, usize)> {
    let loaded = read_checkpoint(path)?;
    let model = DaqModel::with_preset(&loaded.config, loaded.preset)?;
    Ok((model, loaded.iteration))
}

/// Rebuild under a caller-supplied config; any array whose shape no longer
/// fits fails with an error naming the parameter.
pub fn load_model_with_config(path: &Path, cfg: &Config) -> Result<(DaqModel, usize)> {
    let loaded = read_checkpoint(path)?;
    let model = DaqModel::with_preset(cfg, loaded.preset)?;
    Ok((model, loaded.iteration))
}
