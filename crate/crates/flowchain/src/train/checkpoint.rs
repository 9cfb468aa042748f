//! Model checkpoints: a JSON manifest next to the binary parameter
//! container, in one directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{FlowChainModel, FlowMode, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::serialize::{read_params_into, write_params};

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub mode: FlowMode,
    pub t_obs: usize,
    pub t_fut: usize,
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub couplings: usize,
    pub index_dim: usize,
    /// Current trained sigma, for inspection.
    pub sigma: [f64; 2],
    pub sigma_init: f64,
    pub social_pooling: bool,
    pub data_scale: f64,
    pub seed: u64,
}

impl CheckpointManifest {
    fn from_model(model: &FlowChainModel) -> CheckpointManifest {
        let c = &model.config;
        let s = model.sigma();
        CheckpointManifest {
            version: MANIFEST_VERSION,
            mode: c.mode,
            t_obs: c.t_obs,
            t_fut: c.t_fut,
            cond_dim: c.cond_dim,
            hidden_width: c.hidden_width,
            hidden_depth: c.hidden_depth,
            couplings: c.couplings,
            index_dim: c.index_dim,
            sigma: [s.x, s.y],
            sigma_init: c.sigma_init,
            social_pooling: c.social_pooling,
            data_scale: c.data_scale,
            seed: c.seed,
        }
    }

    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            t_obs: self.t_obs,
            t_fut: self.t_fut,
            cond_dim: self.cond_dim,
            hidden_width: self.hidden_width,
            hidden_depth: self.hidden_depth,
            couplings: self.couplings,
            index_dim: self.index_dim,
            sigma_init: self.sigma_init,
            social_pooling: self.social_pooling,
            data_scale: self.data_scale,
            seed: self.seed,
        }
    }
}

/// Writes `manifest.json` and `params.bin` under `dir` (created if needed).
pub fn save_checkpoint(model: &FlowChainModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest::from_model(model);
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    write_params(&model.store, &dir.join("params.bin"))?;
    Ok(())
}

/// Rebuilds the model from a checkpoint directory. Every parameter must
/// round-trip bit-exactly; any mismatch between the manifest architecture
/// and the stored parameters is an error.
pub fn load_checkpoint(dir: &Path) -> Result<FlowChainModel> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut model = FlowChainModel::new(manifest.to_config())?;
    read_params_into(&mut model.store, &dir.join("params.bin"))?;
    Ok(model)
}
