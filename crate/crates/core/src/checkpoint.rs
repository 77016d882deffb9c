//! Model checkpoints.
//!
//! A checkpoint is one safetensors file. Tensors are named `base.<path>` for
//! the denoiser and `assistant.<path>` for an assistant network. The header
//! metadata carries:
//!
//! | key       | value                                         |
//! |-----------|-----------------------------------------------|
//! | `format`  | `recycled-diffusion-checkpoint`               |
//! | `version` | `1`                                           |
//! | `system`  | `symbiotic`, `controlnet`, `referencenet`, `blocked` |
//! | `config`  | the denoiser configuration as JSON            |
//! | `dtype`   | `f32` or `f64`                                |
//! | `step`    | optimizer steps taken                         |

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::baselines::{Model, SystemKind};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "recycled-diffusion-checkpoint";
pub const VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub system: SystemKind,
    pub config: DenoiserConfig,
    pub dtype: DType,
    pub step: usize,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

pub fn save_checkpoint(model: &Model, step: usize, path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("system".to_string(), model.kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&model.cfg)?);
    meta.insert("dtype".to_string(), dtype_name(model.dtype())?.to_string());
    meta.insert("step".to_string(), step.to_string());
    let tensors: Vec<(String, Tensor)> =
        model.named_vars().into_iter().map(|(k, v)| (k, v.as_tensor().clone())).collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    info_from_bytes(&bytes, path)
}

fn info_from_bytes(bytes: &[u8], path: &Path) -> Result<CheckpointInfo> {
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(&e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("no metadata"))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
    if get("format")? != FORMAT {
        return Err(bad("not a checkpoint of this crate"));
    }
    if get("version")? != VERSION {
        return Err(bad(&format!("unsupported version {}", get("version")?)));
    }
    let dtype = match get("dtype")?.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(bad(&format!("unsupported dtype {other}"))),
    };
    Ok(CheckpointInfo {
        system: get("system")?.parse()?,
        config: serde_json::from_str(get("config")?)?,
        dtype,
        step: get("step")?.parse().map_err(|_| bad("bad step"))?,
    })
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(Model, CheckpointInfo)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let info = info_from_bytes(&bytes, path)?;
    let model = Model::new(info.system, &info.config, 0, info.dtype, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let split = |prefix: &str| -> HashMap<String, Tensor> {
        tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    };
    model.base_params.load(&split("base."))?;
    if let Some(a) = &model.assistant_params {
        a.load(&split("assistant."))?;
    }
    let expected = model.named_vars().len();
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors, model has {expected}",
            path.display(),
            tensors.len()
        )));
    }
    Ok((model, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let cfg = DenoiserConfig::tiny();
        let m = Model::new(SystemKind::ReferenceNet, &cfg, 4, DType::F64, &Device::Cpu).unwrap();
        m.base_params.perturb(1, 0.1).unwrap();
        save_checkpoint(&m, 12, &path).unwrap();
        let (back, info) = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(info.step, 12);
        assert_eq!(info.system, SystemKind::ReferenceNet);
        assert_eq!(back.cfg, cfg);
        for ((ka, va), (kb, vb)) in m.named_vars().iter().zip(back.named_vars()) {
            assert_eq!(ka, &kb);
            let a: Vec<f64> = va.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = vb.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{ka}");
        }
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t = Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap();
        candle_core::safetensors::save(&HashMap::from([("a".to_string(), t)]), &path).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
