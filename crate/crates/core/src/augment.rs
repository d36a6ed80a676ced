//! Observation augmentations used to build positive views.
//!
//! `view_drop` zeroes whole feature dimensions, the same dimensions in every
//! sector (and, when one spec is reused, at every step of an episode pass).
//! `feature_dropout` zeroes independent elements and rescales survivors by
//! `1 / (1 - rate)` so the expectation is unchanged. Neither touches the
//! navigability mask.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::world::Observation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("augmentation pool is empty")]
    EmptyPool,
    #[error("invalid augmentation rate range [{lo}, {hi}] for {kind:?}")]
    InvalidRate { kind: AugmentKind, lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    ViewDrop,
    FeatureDropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentKind,
    pub rate: f64,
    pub seed: u64,
}

/// One entry of the pool: a kind and the inclusive range its rate is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub kind: AugmentKind,
    pub rate: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPool {
    pub entries: Vec<PoolEntry>,
}

impl Default for AugmentPool {
    fn default() -> Self {
        Self {
            entries: vec![
                PoolEntry { kind: AugmentKind::ViewDrop, rate: [0.3, 0.5] },
                PoolEntry { kind: AugmentKind::FeatureDropout, rate: [0.1, 0.4] },
            ],
        }
    }
}

impl AugmentPool {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.entries.is_empty() {
            return Err(AugmentError::EmptyPool);
        }
        for e in &self.entries {
            let [lo, hi] = e.rate;
            if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
                return Err(AugmentError::InvalidRate { kind: e.kind, lo, hi });
            }
        }
        Ok(())
    }

    /// Uniform kind, uniform rate within its range, fresh seed.
    pub fn sample(&self, rng: &mut Rng) -> Result<AugmentationSpec, AugmentError> {
        self.validate()?;
        let entry = self.entries[rng.random_range(0..self.entries.len())];
        let [lo, hi] = entry.rate;
        let rate = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Ok(AugmentationSpec { kind: entry.kind, rate, seed: rng::next_seed(rng) })
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self { kind: AugmentKind::FeatureDropout, rate: 0.0, seed: 0 }
    }

    /// Applies the augmentation; `step` selects an independent dropout mask
    /// per timestep for `feature_dropout` and is ignored by `view_drop`.
    pub fn apply_at(&self, obs: &Observation, step: usize) -> Observation {
        let mut out = obs.clone();
        if self.rate == 0.0 {
            return out;
        }
        match self.kind {
            AugmentKind::ViewDrop => {
                let dropped = (self.rate * obs.dim as f64).round() as usize;
                let mut r = rng::stream(self.seed, "augment/view_drop");
                for d in sample(&mut r, obs.dim, dropped.min(obs.dim - 1)) {
                    for v in 0..obs.views {
                        out.features[v * obs.dim + d] = 0.0;
                    }
                }
            }
            AugmentKind::FeatureDropout => {
                let mut r = rng::substream(self.seed, "augment/feature_dropout", step as u64);
                let keep = 1.0 / (1.0 - self.rate);
                for x in out.features.iter_mut() {
                    if r.random::<f64>() < self.rate {
                        *x = 0.0;
                    } else {
                        *x *= keep;
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, obs: &Observation) -> Observation {
        self.apply_at(obs, 0)
    }
}
