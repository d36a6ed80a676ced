//! Sequence-to-sequence navigator with momentum key networks.
//!
//! Parameters are split into the supervised set (instruction encoder,
//! decoder, attention, action head, query critics) and the consistency set
//! (observation encoder, projection heads, bilinear similarities and the
//! momentum copies of the observation encoder and critics). The observation
//! encoder feeds both the attention and the candidate embeddings of the
//! action head, so adapting the consistency set changes the policy while
//! the supervised heads stay fixed.

mod net;
mod queue;

pub use net::{
    attend_visual, critic_all, critic_hidden, critic_q, decode_step, embed_observation, encode_instruction,
    initial_state, observation_tensor, DecoderState, Instruction, StepOutput,
};
pub use queue::KeyQueue;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numcore::{NumError, ParamId, ParamStore};
use crate::rng;
use crate::world::WorldError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("decoder already ran {0} steps")]
    MaxStepsExceeded(usize),
    #[error("action {action} is outside [0, {max}]")]
    InvalidAction { action: usize, max: usize },
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
}

pub type Result<T> = std::result::Result<T, AgentError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Decoder hidden size; each encoder direction uses half.
    pub hidden: usize,
    /// Observation embedding size.
    pub embed: usize,
    pub word_dim: usize,
    /// Contrastive projection size.
    pub proj_dim: usize,
    pub critic_hidden: usize,
    pub max_steps: usize,
    pub queue_capacity: usize,
    /// Momentum coefficient of the key encoder and key critics.
    pub momentum: f64,
    /// Initial scale of the bilinear similarity (inverse temperature).
    pub bilinear_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            word_dim: 32,
            proj_dim: 32,
            critic_hidden: 32,
            max_steps: 15,
            queue_capacity: 256,
            momentum: 0.99,
            bilinear_scale: 5.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.embed, self.word_dim, self.proj_dim, self.critic_hidden];
        if dims.contains(&0) || self.hidden % 2 != 0 {
            return Err(AgentError::InvalidConfig("dimensions must be positive and hidden even".into()));
        }
        if self.max_steps == 0 || self.queue_capacity == 0 {
            return Err(AgentError::InvalidConfig("max_steps and queue_capacity must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AgentError::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.bilinear_scale.is_finite() && self.bilinear_scale > 0.0) {
            return Err(AgentError::InvalidConfig("bilinear_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIds {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CriticIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl CriticIds {
    fn all(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIds {
    pub embed: ParamId,
    pub fwd: GruIds,
    pub bwd: GruIds,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub attn_visual: ParamId,
    pub dec: GruIds,
    pub attn_instr: ParamId,
    pub combine: ParamId,
    pub action_embed: ParamId,
    pub action_head: ParamId,
    pub action_stop: ParamId,
    pub critic: [CriticIds; 2],
    pub obs: EncoderIds,
    pub proj_il: ParamId,
    pub proj_rl: ParamId,
    pub bilinear_il: ParamId,
    pub bilinear_rl: ParamId,
    pub obs_key: EncoderIds,
    pub critic_key: [CriticIds; 2],
}

/// Shapes fixed by the environment and vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub views: usize,
    pub feature_dim: usize,
    pub vocab: usize,
}

impl Dims {
    pub fn actions(&self) -> usize {
        self.views + 1
    }

    pub fn stop(&self) -> usize {
        self.views
    }

    /// Index of the start-of-episode entry in the action embedding table.
    pub fn begin(&self) -> usize {
        self.views + 1
    }
}

/// All agent parameters plus the layout needed to address them.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentParams {
    pub config: AgentConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub ids: ParamIds,
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    config: AgentConfig,
    dims: Dims,
    store: ParamStore,
}

impl Serialize for AgentParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AgentRecord { config: self.config.clone(), dims: self.dims, store: self.store.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for AgentParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = AgentRecord::deserialize(d)?;
        AgentParams::from_store(r.config, r.dims, r.store).map_err(serde::de::Error::custom)
    }
}

struct Layout {
    names: Vec<(String, [usize; 2])>,
}

impl Layout {
    fn new(cfg: &AgentConfig, dims: &Dims) -> Self {
        let h = cfg.hidden;
        let hh = h / 2;
        let e = cfg.embed;
        let c = cfg.critic_hidden;
        let p = cfg.proj_dim;
        let a = dims.actions();
        let obs_in = h + a;
        let mut names: Vec<(String, [usize; 2])> = vec![("instr.embed".into(), [dims.vocab, cfg.word_dim])];
        for dir in ["fwd", "bwd"] {
            names.push((format!("instr.{dir}.wx"), [cfg.word_dim, 3 * hh]));
            names.push((format!("instr.{dir}.wh"), [hh, 3 * hh]));
            names.push((format!("instr.{dir}.b"), [1, 3 * hh]));
        }
        names.extend([
            ("dec.init.w".to_string(), [h, h]),
            ("dec.init.b".to_string(), [1, h]),
            ("attn.visual".to_string(), [h, e]),
            ("dec.gru.wx".to_string(), [e + h, 3 * h]),
            ("dec.gru.wh".to_string(), [h, 3 * h]),
            ("dec.gru.b".to_string(), [1, 3 * h]),
            ("attn.instr".to_string(), [h, h]),
            ("dec.combine".to_string(), [2 * h, h]),
            ("action.embed".to_string(), [dims.views + 2, h]),
            ("action.head".to_string(), [h, e]),
            ("action.stop".to_string(), [1, e]),
        ]);
        for prefix in ["critic", "critic_key"] {
            for q in ["q1", "q2"] {
                names.push((format!("{prefix}.{q}.w1"), [obs_in + a, c]));
                names.push((format!("{prefix}.{q}.b1"), [1, c]));
                names.push((format!("{prefix}.{q}.w2"), [c, 1]));
                names.push((format!("{prefix}.{q}.b2"), [1, 1]));
            }
        }
        names.extend([
            ("obs.w".to_string(), [dims.feature_dim, e]),
            ("obs.b".to_string(), [1, e]),
            ("obs_key.w".to_string(), [dims.feature_dim, e]),
            ("obs_key.b".to_string(), [1, e]),
            ("proj.il".to_string(), [h, p]),
            ("proj.rl".to_string(), [c, p]),
            ("bilinear.il".to_string(), [p, p]),
            ("bilinear.rl".to_string(), [p, p]),
        ]);
        Self { names }
    }
}

fn resolve(store: &ParamStore) -> Result<ParamIds> {
    let id = |n: &str| store.find(n).ok_or_else(|| AgentError::LayoutMismatch(format!("missing parameter `{n}`")));
    let gru = |p: &str| -> Result<GruIds> {
        Ok(GruIds { wx: id(&format!("{p}.wx"))?, wh: id(&format!("{p}.wh"))?, b: id(&format!("{p}.b"))? })
    };
    let critic = |p: &str| -> Result<CriticIds> {
        Ok(CriticIds {
            w1: id(&format!("{p}.w1"))?,
            b1: id(&format!("{p}.b1"))?,
            w2: id(&format!("{p}.w2"))?,
            b2: id(&format!("{p}.b2"))?,
        })
    };
    Ok(ParamIds {
        embed: id("instr.embed")?,
        fwd: gru("instr.fwd")?,
        bwd: gru("instr.bwd")?,
        init_w: id("dec.init.w")?,
        init_b: id("dec.init.b")?,
        attn_visual: id("attn.visual")?,
        dec: gru("dec.gru")?,
        attn_instr: id("attn.instr")?,
        combine: id("dec.combine")?,
        action_embed: id("action.embed")?,
        action_head: id("action.head")?,
        action_stop: id("action.stop")?,
        critic: [critic("critic.q1")?, critic("critic.q2")?],
        obs: EncoderIds { w: id("obs.w")?, b: id("obs.b")? },
        proj_il: id("proj.il")?,
        proj_rl: id("proj.rl")?,
        bilinear_il: id("bilinear.il")?,
        bilinear_rl: id("bilinear.rl")?,
        obs_key: EncoderIds { w: id("obs_key.w")?, b: id("obs_key.b")? },
        critic_key: [critic("critic_key.q1")?, critic("critic_key.q2")?],
    })
}

impl AgentParams {
    /// Fresh parameters. Weight matrices are uniform in `±sqrt(6/(fan_in+fan_out))`,
    /// biases zero, bilinear matrices `bilinear_scale * I`; momentum copies
    /// start equal to their query networks.
    pub fn init(config: &AgentConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.views < 2 || dims.feature_dim == 0 || dims.vocab == 0 {
            return Err(AgentError::InvalidConfig(format!("bad dims {dims:?}")));
        }
        let mut r = rng::stream(seed, "init");
        let mut store = ParamStore::new();
        for (name, [rows, cols]) in Layout::new(config, &dims).names {
            let values = if name.starts_with("bilinear.") {
                (0..rows * cols).map(|i| if i / cols == i % cols { config.bilinear_scale } else { 0.0 }).collect()
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name == "dec.init.b" {
                vec![0.0; rows * cols]
            } else if name.starts_with("obs_key.") || name.starts_with("critic_key.") {
                let src = name.replacen("obs_key.", "obs.", 1).replacen("critic_key.", "critic.", 1);
                let id = store.find(&src).expect("query networks are laid out first");
                store.get(id).values.clone()
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols).map(|_| r.random_range(-limit..limit)).collect()
            };
            store.add(name, rows, cols, values)?;
        }
        let ids = resolve(&store)?;
        Ok(Self { config: config.clone(), dims, store, ids })
    }

    pub fn from_store(config: AgentConfig, dims: Dims, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, &dims);
        if layout.names.len() != store.len() {
            return Err(AgentError::LayoutMismatch(format!(
                "expected {} tensors, found {}",
                layout.names.len(),
                store.len()
            )));
        }
        for (name, shape) in &layout.names {
            let id = store.find(name).ok_or_else(|| AgentError::LayoutMismatch(format!("missing `{name}`")))?;
            if store.get(id).shape != *shape {
                return Err(AgentError::LayoutMismatch(format!("`{name}` has shape {:?}", store.get(id).shape)));
            }
        }
        let ids = resolve(&store)?;
        Ok(Self { config, dims, store, ids })
    }

    /// Supervised parameters.
    pub fn ml_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        let mut v = vec![i.embed];
        for g in [i.fwd, i.bwd, i.dec] {
            v.extend([g.wx, g.wh, g.b]);
        }
        v.extend([i.init_w, i.init_b, i.attn_visual, i.attn_instr, i.combine, i.action_embed, i.action_head, i.action_stop]);
        for c in &i.critic {
            v.extend(c.all());
        }
        v
    }

    /// Consistency parameters updated by gradient.
    pub fn cl_trainable_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        vec![i.obs.w, i.obs.b, i.proj_il, i.proj_rl, i.bilinear_il, i.bilinear_rl]
    }

    /// Momentum copies: the key encoder and the key critics.
    pub fn momentum_ids(&self) -> Vec<ParamId> {
        let i = &self.ids;
        let mut v = vec![i.obs_key.w, i.obs_key.b];
        for c in &i.critic_key {
            v.extend(c.all());
        }
        v
    }

    /// The full consistency set, momentum copies included.
    pub fn cl_ids(&self) -> Vec<ParamId> {
        let mut v = self.cl_trainable_ids();
        v.extend(self.momentum_ids());
        v
    }

    /// Everything the joint training stage optimizes.
    pub fn train_ids(&self) -> Vec<ParamId> {
        let mut v = self.ml_ids();
        v.extend(self.cl_trainable_ids());
        v
    }

    fn blend(&mut self, pairs: &[(ParamId, ParamId)]) -> Result<()> {
        let m = self.config.momentum;
        for &(key, query) in pairs {
            let src = self.store.get(query);
            if src.shape != self.store.get(key).shape {
                return Err(NumError::ShapeMismatch {
                    op: "momentum_update",
                    lhs: self.store.get(key).shape,
                    rhs: src.shape,
                }
                .into());
            }
            let q = src.values.clone();
            for (k, q) in self.store.get_mut(key).values.iter_mut().zip(q) {
                *k = m * *k + (1.0 - m) * q;
            }
        }
        Ok(())
    }

    /// `key <- m key + (1 - m) query` for the observation encoder.
    pub fn momentum_update_encoder(&mut self) -> Result<()> {
        let i = self.ids;
        self.blend(&[(i.obs_key.w, i.obs.w), (i.obs_key.b, i.obs.b)])
    }

    /// `key <- m key + (1 - m) query` for both critics.
    pub fn momentum_update_critic(&mut self) -> Result<()> {
        let i = self.ids;
        let mut pairs = Vec::new();
        for (k, q) in i.critic_key.iter().zip(&i.critic) {
            pairs.extend(k.all().into_iter().zip(q.all()));
        }
        self.blend(&pairs)
    }

    /// Hex SHA-256 over the named values of `ids`.
    pub fn hash_of(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for id in ids {
            let p = self.store.get(*id);
            h.update(p.name.as_bytes());
            for v in &p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash of everything that fixes the parameter layout.
    pub fn layout_hash(&self) -> String {
        let text = serde_json::to_string(&(&self.config, &self.dims)).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn copy_values_from(&mut self, other: &AgentParams, ids: &[ParamId]) {
        for id in ids {
            self.store.get_mut(*id).values.clone_from(&other.store.get(*id).values);
        }
    }
}
