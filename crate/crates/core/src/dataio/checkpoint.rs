//! Model checkpoints: config, named parameter arrays, codebook and optional
//! optimizer state in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, DataError};
use crate::config::RunConfig;
use crate::nnkit::{Adam, NamedArray};
use crate::policy::{ActionCodebook, PolicyModel};

pub const CHECKPOINT_FORMAT: &str = "flowdrive-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub schema_version: u32,
    /// Which training stage produced the parameters.
    pub stage: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub codebook: ActionCodebook,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn new(model: &PolicyModel, config: &RunConfig, stage: &str, optimizer: Option<Adam>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            schema_version: CHECKPOINT_VERSION,
            stage: stage.into(),
            config_hash: config.hash(),
            config: config.clone(),
            codebook: model.codebook.clone(),
            params: model.store.export(),
            optimizer,
        }
    }

    /// Rebuild the model. The architecture comes from the stored config.
    pub fn model(&self) -> Result<PolicyModel, DataError> {
        let mut m = PolicyModel::new(self.config.policy.clone(), self.codebook.clone())
            .map_err(|e| DataError::Checkpoint(e.to_string()))?;
        m.store.import(&self.params).map_err(|e| DataError::Checkpoint(e.to_string()))?;
        Ok(m)
    }

    /// Reject a config whose hash differs from the stored one unless allowed.
    pub fn check_config(&self, cfg: &RunConfig, allow_mismatch: bool) -> Result<(), DataError> {
        let h = cfg.hash();
        if h != self.config_hash && !allow_mismatch {
            return Err(DataError::ConfigMismatch { stored: self.config_hash.clone(), given: h });
        }
        if cfg.policy != self.config.policy {
            return Err(DataError::Checkpoint("policy architecture differs from the checkpoint".into()));
        }
        Ok(())
    }
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> Result<String, DataError> {
    Ok(serde_json::to_string(ck)? + "\n")
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), DataError> {
    write_atomic(path, checkpoint_to_string(ck)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DataError> {
    let s = std::fs::read_to_string(path).map_err(|e| DataError::Open { path: path.display().to_string(), source: e })?;
    let ck: Checkpoint = serde_json::from_str(&s).map_err(|e| DataError::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(DataError::Checkpoint(format!("unknown format {:?}", ck.format)));
    }
    if ck.schema_version != CHECKPOINT_VERSION {
        return Err(DataError::Schema { line: 1, found: ck.schema_version, expected: CHECKPOINT_VERSION });
    }
    if ck.config.hash() != ck.config_hash {
        return Err(DataError::Checkpoint("stored config does not match its hash".into()));
    }
    Ok(ck)
}
