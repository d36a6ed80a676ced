use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, RunConfig, TrainError};
use crate::agent::{AgentParams, KeyQueue};
use crate::numcore::OptimizerState;
use crate::objectives::Switches;

pub const CHECKPOINT_FORMAT: &str = "tvc-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub world_hash: String,
    pub iteration: u64,
    pub switches: Switches,
    pub params: AgentParams,
    pub queue_il: KeyQueue,
    pub queue_rl: KeyQueue,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(
        config: &RunConfig,
        world_hash: &str,
        iteration: u64,
        params: &AgentParams,
        queue_il: &KeyQueue,
        queue_rl: &KeyQueue,
        optimizer: &OptimizerState,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config.model_hash(),
            world_hash: world_hash.into(),
            iteration,
            switches: config.switches,
            params: params.clone(),
            queue_il: queue_il.clone(),
            queue_rl: queue_rl.clone(),
            optimizer: optimizer.clone(),
        }
    }

    /// Rejects checkpoints written for another model layout or world.
    pub fn verify(&self, config: &RunConfig, world_hash: &str) -> Result<()> {
        let expected = config.model_hash();
        if self.config_hash != expected {
            return Err(TrainError::CheckpointMismatch(format!(
                "config hash {} does not match {}",
                self.config_hash, expected
            )));
        }
        if self.world_hash != world_hash {
            return Err(TrainError::CheckpointMismatch(format!(
                "checkpoint was trained on world {}, not {}",
                self.world_hash, world_hash
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Format(format!("checkpoint: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(TrainError::Format(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}
