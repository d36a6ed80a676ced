//! Versioned JSON artifacts for worlds and episode sets.
//!
//! A world file holds the generating config and seed together with the full
//! graphs (features included), so a run can be reproduced from the file
//! alone. An episode file records the hash of the world file it belongs to.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, EnvironmentGraph, World, WorldConfig, WorldError};

pub const WORLD_FORMAT: &str = "tvc-world";
pub const EPISODE_FORMAT: &str = "tvc-episodes";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format: String,
    pub version: u32,
    pub config: WorldConfig,
    pub seed: u64,
    pub vocabulary: Vec<String>,
    pub landmarks: Vec<String>,
    pub scenes: Vec<EnvironmentGraph>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeFile {
    pub format: String,
    pub version: u32,
    pub world_hash: String,
    #[serde(flatten)]
    pub dataset: Dataset,
}

fn check_header(found_format: &str, found_version: u32, want: &str) -> Result<(), WorldError> {
    if found_format != want {
        return Err(WorldError::Format(format!("expected format `{want}`, found `{found_format}`")));
    }
    if found_version != FORMAT_VERSION {
        return Err(WorldError::Format(format!(
            "unsupported {want} version {found_version} (supported: {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

impl World {
    pub fn to_json(&self) -> String {
        let file = WorldFile {
            format: WORLD_FORMAT.into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            vocabulary: self.vocabulary().tokens().to_vec(),
            landmarks: self.landmark_names.clone(),
            scenes: self.scenes.clone(),
        };
        serde_json::to_string(&file).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let file: WorldFile = serde_json::from_str(text).map_err(|e| WorldError::Format(e.to_string()))?;
        check_header(&file.format, file.version, WORLD_FORMAT)?;
        file.config.validate()?;
        let world = World { config: file.config, seed: file.seed, landmark_names: file.landmarks, scenes: file.scenes };
        if world.vocabulary().tokens() != file.vocabulary.as_slice() {
            return Err(WorldError::Format("vocabulary does not match the config".into()));
        }
        Ok(world)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

impl Dataset {
    pub fn to_json(&self, world_hash: &str) -> String {
        let file = EpisodeFile {
            format: EPISODE_FORMAT.into(),
            version: FORMAT_VERSION,
            world_hash: world_hash.into(),
            dataset: self.clone(),
        };
        serde_json::to_string(&file).expect("episodes serialize")
    }

    /// Parses an episode file and checks it belongs to `world`.
    pub fn from_json(text: &str, world: &World) -> Result<Self, WorldError> {
        let file: EpisodeFile = serde_json::from_str(text).map_err(|e| WorldError::Format(e.to_string()))?;
        check_header(&file.format, file.version, EPISODE_FORMAT)?;
        let hash = world.content_hash();
        if file.world_hash != hash {
            return Err(WorldError::Format(format!(
                "episode file was built for world {} but the world hashes to {hash}",
                file.world_hash
            )));
        }
        let vocab = world.vocabulary();
        for split in [&file.dataset.train, &file.dataset.val_seen, &file.dataset.val_unseen] {
            for ep in split {
                let g = world.scene(&ep.scene_id)?;
                vocab.encode(&ep.instruction)?;
                if ep.gt_path.first() != Some(&ep.start) || ep.gt_path.last() != Some(&ep.target) {
                    return Err(WorldError::Format(format!("episode {} path endpoints mismatch", ep.episode_id)));
                }
                if g.path_length(&ep.gt_path).is_none() {
                    return Err(WorldError::Format(format!("episode {} path is not a walk", ep.episode_id)));
                }
            }
        }
        Ok(file.dataset)
    }
}
