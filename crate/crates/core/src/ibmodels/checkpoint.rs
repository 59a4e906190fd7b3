//! Flat little-endian f64 parameter blob plus a JSON sidecar.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, Params};
use crate::error::{Error, Result};
use crate::ndtape::Tensor;

pub const PARAMS_FILE: &str = "params.bin";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub standard_accuracy: Option<f64>,
    /// Whether the stored parameters are the Polyak average.
    pub polyak: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: ModelSpec,
    param_count: usize,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn save_checkpoint(dir: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    for v in model.params.flatten() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let sidecar = Sidecar {
        spec: model.spec.clone(),
        param_count: model.params.numel(),
        meta: meta.clone(),
    };
    let json_path = dir.join(SIDECAR_FILE);
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Load a checkpoint, validating the blob length against the architecture.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let json_path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    sidecar.spec.validate()?;
    let expected = sidecar.spec.param_count();
    if sidecar.param_count != expected {
        return Err(Error::Checkpoint(format!(
            "sidecar records {} parameters, architecture needs {expected}",
            sidecar.param_count
        )));
    }
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} bytes, architecture needs {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let tensors = sidecar
        .spec
        .param_shapes()
        .into_iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::with_params(sidecar.spec, Params { tensors })?;
    Ok((model, sidecar.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibmodels::{init_params, InitScheme};

    #[test]
    fn round_trip_and_length_check() {
        let mut m = Model::new(ModelSpec::toy_vib(3, 2, 0.5)).unwrap();
        init_params(&mut m, InitScheme::XavierUniform, 4);
        let meta = CheckpointMeta {
            seed: 4,
            epoch: 7,
            standard_accuracy: Some(0.9),
            polyak: false,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &m, &meta).unwrap();
        let (back, meta_back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);

        let blob = dir.path().join(PARAMS_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
