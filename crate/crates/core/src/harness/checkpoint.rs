//! Model checkpoints: a JSON manifest next to a flat little-endian `f64`
//! parameter blob. The model is rebuilt from the stored config and the blob
//! is loaded in [`MlpModel::param_info`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::run::derive_seed;
use crate::datagen::seeded_rng;
use crate::error::{Error, Result};
use crate::nn::{MlpModel, ParamInfo};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "ditac-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub groups: Vec<ParamInfo>,
    pub n_params: usize,
    pub params_file: String,
    pub params_sha256: String,
}

pub fn save_checkpoint(dir: &Path, cfg: &ExperimentConfig, model: &MlpModel) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat = model.flat_params();
    let blob: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut cfg = cfg.clone();
    cfg.output_dir = None;
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg,
        groups: model.param_info(),
        n_params: flat.len(),
        params_file: PARAMS_FILE.into(),
        params_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let blob_path = dir.join(PARAMS_FILE);
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&man_path, json).map_err(|e| Error::io(&man_path, e))
}

/// Loads a checkpoint written by [`save_checkpoint`]; `dir` may be the
/// checkpoint directory itself or a run directory containing `checkpoint/`.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, MlpModel)> {
    let dir = if dir.join(MANIFEST_FILE).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(super::run::CHECKPOINT_DIR)
    };
    let man_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::format(
            &man_path,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    let blob_path = dir.join(&manifest.params_file);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() != manifest.n_params * 8 {
        return Err(Error::format(
            &blob_path,
            format!("expected {} bytes, found {}", manifest.n_params * 8, blob.len()),
        ));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.params_sha256 {
        return Err(Error::format(&blob_path, "checksum mismatch"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let cfg = manifest.config;
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "init"));
    let mut model = MlpModel::build(&cfg.widths, &cfg.activation_spec(), cfg.head(), &mut rng)?;
    model.set_w_reg(cfg.effective_w_reg())?;
    if model.param_info() != manifest.groups {
        return Err(Error::format(&man_path, "parameter layout does not match the config"));
    }
    model.set_flat_params(&values)?;
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Task;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = ExperimentConfig::defaults(Task::Reg2d);
        let mut rng = seeded_rng(3);
        let model = MlpModel::build(&cfg.widths, &cfg.activation_spec(), cfg.head(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &model).unwrap();
        let (cfg2, loaded) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(loaded.flat_params(), model.flat_params());

        let blob = dir.path().join(PARAMS_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&blob, &bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        std::fs::write(&blob, &bytes[..8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
