//! Model checkpoints as safetensors files. The model config and run
//! metadata are stored as JSON strings in the `__metadata__` header.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::io::scene_to_line;
use crate::error::{Error, Result};
use crate::model::{Haicu, ModelConfig};
use crate::scene::Scene;

const CONFIG_KEY: &str = "haicu.config";
const RUN_KEY: &str = "haicu.run";
const FORMAT_KEY: &str = "format";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    /// SHA-256 of the training scenes, see [`dataset_hash`].
    pub dataset_hash: String,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_anll: Option<f64>,
}

/// Hex SHA-256 over the canonical JSON line of each scene, in order.
pub fn dataset_hash(scenes: &[Scene]) -> String {
    let mut h = Sha256::new();
    for s in scenes {
        h.update(scene_to_line(s).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn save(model: &Haicu, meta: &RunMetadata, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params
        .iter()
        .map(|(name, m)| {
            let data = m.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), vec![m.nrows(), m.ncols()], data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, shape, data)| Ok((name.as_str(), TensorView::new(Dtype::F64, shape.clone(), data).map_err(ckpt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let header = HashMap::from([
        (FORMAT_KEY.to_string(), "pt".to_string()),
        (CONFIG_KEY.to_string(), serde_json::to_string(&model.config)?),
        (RUN_KEY.to_string(), serde_json::to_string(meta)?),
    ]);
    let out = safetensors::serialize(views, &Some(header)).map_err(ckpt_err)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Haicu, RunMetadata)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CheckpointNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let (_, header) = SafeTensors::read_metadata(&buf).map_err(ckpt_err)?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| ckpt_err("missing metadata header"))?;
    let field = |k: &str| info.get(k).ok_or_else(|| ckpt_err(format!("missing metadata key {k}")));
    let config: ModelConfig = serde_json::from_str(field(CONFIG_KEY)?)?;
    let meta: RunMetadata = serde_json::from_str(field(RUN_KEY)?)?;
    let tensors = SafeTensors::deserialize(&buf).map_err(ckpt_err)?;

    let mut model = Haicu::new(config, 0)?;
    let expected = model.params.len();
    if tensors.len() != expected {
        return Err(ckpt_err(format!("{} tensors, model expects {expected}", tensors.len())));
    }
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let view = tensors.tensor(&name).map_err(|e| ckpt_err(format!("{name}: {e}")))?;
        let target = model.params.by_name_mut(&name).expect("name from store");
        if view.dtype() != Dtype::F64 || view.shape() != [target.nrows(), target.ncols()] {
            return Err(ckpt_err(format!(
                "{name}: stored {:?} {:?}, expected F64 [{}, {}]",
                view.dtype(),
                view.shape(),
                target.nrows(),
                target.ncols()
            )));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *target = Array2::from_shape_vec((target.nrows(), target.ncols()), values).map_err(ckpt_err)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> Haicu {
        let cfg = ModelConfig {
            node_hidden: 4,
            edge_hidden: 2,
            future_hidden: 2,
            decoder_hidden: 6,
            latent: 3,
            ..ModelConfig::new(vec!["car".into(), "pedestrian".into()], Variant::MultiHead)
        };
        Haicu::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let m = model();
        let meta = RunMetadata {
            seed: 9,
            dataset_hash: dataset_hash(&[]),
            epoch: 3,
            best_val_anll: Some(1.5),
        };
        save(&m, &meta, &path).unwrap();
        let (back, meta_back) = load(&path).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.safetensors");
        assert!(matches!(load(&missing), Err(Error::CheckpointNotFound(_))));
        let junk = dir.path().join("junk.safetensors");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(matches!(load(&junk), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn dataset_hash_depends_on_content() {
        let empty = dataset_hash(&[]);
        assert_eq!(empty, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        let s = crate::scene::tests::scene_from_positions(&[[0.0, 0.0]]);
        assert_ne!(dataset_hash(&[s]), empty);
    }
}
