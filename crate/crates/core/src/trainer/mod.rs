//! Joint training, rollouts, replay and per-episode test-time adaptation.

mod buffer;
mod checkpoint;
mod contrast;
mod joint;
mod rollout;
mod tta;

pub use buffer::{ReplayBuffer, ReplayTuple};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use contrast::{contrastive_loss, il_keys, il_queries, rl_keys, rl_queries};
pub use joint::{dims_of, train_joint, IterationLog, TrainOutcome, Trainer, ValSnapshot};
pub use rollout::{critic_input, episode_tokens, rollout, run_pass, select_negatives, ActionSource, PassOutput, PassStep};
pub use tta::{adapt_test_time, adaptation_views, TtaOutcome};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentError};
use crate::augment::{AugmentError, AugmentPool};
use crate::numcore::NumError;
use crate::objectives::{LossWeights, ObjectiveError, Switches};
use crate::world::{WorldConfig, WorldError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    DivergenceDetected { iteration: u64, detail: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("trajectory has {0} steps; at least 2 are needed")]
    TooShortTrajectory(usize),
    #[error("replay buffer holds {have} tuples, {want} requested")]
    InsufficientSamples { have: usize, want: usize },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: u64,
    /// Episodes per optimizer step; also the critic minibatch size.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub replay_capacity: usize,
    /// Terminal reward magnitude for stopping inside / outside the success radius.
    pub success_bonus: f64,
    /// Validation cadence in iterations (0 disables).
    pub val_every: u64,
    pub val_episodes: usize,
    /// Checkpoint cadence in iterations (0 writes only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_size: 32,
            learning_rate: 1e-4,
            clip_norm: 25.0,
            replay_capacity: 5000,
            success_bonus: 2.0,
            val_every: 100,
            val_episodes: 64,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub iters: usize,
    /// Augmented views per adaptation step.
    pub batch: usize,
    pub learning_rate: f64,
    /// Whether the key encoder keeps its momentum updates while adapting.
    pub momentum_update: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { iters: 10, batch: 8, learning_rate: 1e-4, momentum_update: true }
    }
}

/// Everything a run depends on besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Seeds of multi-seed evaluations.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub switches: Switches,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub tta: TtaConfig,
    #[serde(default)]
    pub augment: AugmentPool,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            seeds: default_seeds(),
            switches: Switches::ALL,
            world: WorldConfig::default(),
            agent: AgentConfig::default(),
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            tta: TtaConfig::default(),
            augment: AugmentPool::default(),
        }
    }
}

impl RunConfig {
    /// Short schedule for a single core: 400 iterations of 16 episodes at
    /// learning rate 1e-3. At 1e-4 the imitation loss barely moves within
    /// a few hundred iterations.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.train.iters = 400;
        c.train.batch_size = 16;
        c.train.learning_rate = 1e-3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(TrainError::Config(format!(
                "unsupported config version {} (supported: {CONFIG_VERSION})",
                self.version
            )));
        }
        self.world.validate()?;
        self.agent.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        if !self.switches.any() {
            return Err(TrainError::Config("at least one objective switch must be on".into()));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config("seeds must not be empty".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(TrainError::Config("train.batch_size must be at least 1".into()));
        }
        if t.replay_capacity < t.batch_size {
            return Err(TrainError::Config("train.replay_capacity must be at least batch_size".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) || !(t.clip_norm > 0.0) {
            return Err(TrainError::Config("train.learning_rate and clip_norm must be positive".into()));
        }
        if self.tta.batch == 0 || !(self.tta.learning_rate > 0.0 && self.tta.learning_rate.is_finite()) {
            return Err(TrainError::Config("tta.batch and tta.learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the settings that fix the model layout and its training
    /// objective; checkpoints record it.
    pub fn model_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.agent, &self.world.views, &self.world.feature_dim, &self.world.landmarks))
            .expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
