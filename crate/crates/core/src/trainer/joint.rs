use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::buffer::{ReplayBuffer, ReplayTuple};
use super::checkpoint::Checkpoint;
use super::contrast::{contrastive_loss, il_keys, il_queries, rl_keys, rl_queries};
use super::rollout::{critic_input, episode_tokens, run_pass, ActionSource, PassOutput};
use super::{Result, RunConfig, TrainError};
use crate::agent::{critic_all, critic_q, encode_instruction, AgentParams, Dims, KeyQueue};
use crate::augment::AugmentationSpec;
use crate::evalkit::{greedy_metrics, mean_of};
use crate::numcore::{adam_step, DiffTensor, GradSet, Graph, NumError, OptimizerState};
use crate::objectives::{
    actor_loss, critic_loss, expected_sac_target, il_loss, step_reward, train_objective, ObjectiveError,
};
use crate::rng;
use crate::world::{Dataset, EnvironmentGraph, Episode, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSnapshot {
    pub seen_sr: f64,
    pub seen_spl: f64,
    pub unseen_sr: f64,
    pub unseen_spl: f64,
}

/// One line of the training log. Loss terms are batch means; terms that
/// were not computed this iteration are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub il_loss: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub cl_il_loss: f64,
    pub cl_rl_loss: f64,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub sample_reward: f64,
    pub sample_success: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<ValSnapshot>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<IterationLog>,
}

/// Per-episode loss values, accumulated into the iteration log.
#[derive(Default)]
struct Terms {
    il: f64,
    actor: f64,
    cl_il: f64,
    cl_rl: f64,
    total: f64,
    reward: f64,
    success: f64,
}

/// Stage-one optimizer: owns the parameters, optimizer state, key queues
/// and replay buffer of one run.
pub struct Trainer<'a> {
    pub config: RunConfig,
    world: &'a World,
    dataset: &'a Dataset,
    world_hash: String,
    pub params: AgentParams,
    pub optimizer: OptimizerState,
    pub queue_il: KeyQueue,
    pub queue_rl: KeyQueue,
    pub buffer: ReplayBuffer,
    pub iteration: u64,
}

pub fn dims_of(world: &World) -> Dims {
    Dims { views: world.config.views, feature_dim: world.config.feature_dim, vocab: world.vocabulary().len() }
}

fn divergence(iteration: u64, err: TrainError) -> TrainError {
    let non_finite = matches!(
        err,
        TrainError::Num(NumError::NonFiniteValue { .. })
            | TrainError::Objective(ObjectiveError::Num(NumError::NonFiniteValue { .. }))
            | TrainError::Objective(ObjectiveError::NonFiniteValue(_))
            | TrainError::Agent(crate::agent::AgentError::Num(NumError::NonFiniteValue { .. }))
    );
    if non_finite {
        TrainError::DivergenceDetected { iteration, detail: err.to_string() }
    } else {
        err
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: RunConfig, world: &'a World, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(TrainError::Config("training split is empty".into()));
        }
        let params = AgentParams::init(&config.agent, dims_of(world), config.seed)?;
        let optimizer = OptimizerState::new(config.train.learning_rate)?;
        let k = config.agent.queue_capacity;
        Ok(Self {
            buffer: ReplayBuffer::new(config.train.replay_capacity),
            world_hash: world.content_hash(),
            config,
            world,
            dataset,
            params,
            optimizer,
            queue_il: KeyQueue::new(k),
            queue_rl: KeyQueue::new(k),
            iteration: 0,
        })
    }

    /// Continues from a checkpoint. The replay buffer starts empty.
    pub fn resume(config: RunConfig, world: &'a World, dataset: &'a Dataset, ckpt: Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, world, dataset)?;
        ckpt.verify(&t.config, &t.world_hash)?;
        if ckpt.params.layout_hash() != t.params.layout_hash() {
            return Err(TrainError::CheckpointMismatch("parameter layout differs from the config".into()));
        }
        t.params = ckpt.params;
        t.optimizer = ckpt.optimizer;
        t.optimizer.learning_rate = t.config.train.learning_rate;
        t.queue_il = ckpt.queue_il;
        t.queue_rl = ckpt.queue_rl;
        t.iteration = ckpt.iteration;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, &self.world_hash, self.iteration, &self.params, &self.queue_il, &self.queue_rl, &self.optimizer)
    }

    /// One optimizer step over a batch of training episodes.
    pub fn step(&mut self) -> Result<IterationLog> {
        let iteration = self.iteration;
        let mut log = self.step_inner().map_err(|e| divergence(iteration, e))?;
        self.iteration += 1;
        log.iteration = self.iteration;
        let every = self.config.train.val_every;
        if every > 0 && self.iteration % every == 0 {
            log.val = Some(self.validate()?);
        }
        Ok(log)
    }

    fn step_inner(&mut self) -> Result<IterationLog> {
        let cfg = &self.config;
        let seed = cfg.seed;
        let it = self.iteration;
        let switches = cfg.switches;
        let batch = cfg.train.batch_size.min(self.dataset.train.len());
        let mut rollout_rng = rng::substream(seed, "rollout", it);
        let mut aug_rng = rng::substream(seed, "augmentation", it);
        let mut replay_rng = rng::substream(seed, "replay", it);
        let picks = sample(&mut rollout_rng, self.dataset.train.len(), batch).into_vec();
        let train_ids = self.params.train_ids();
        let vocab = self.world.vocabulary();

        let mut grads = GradSet::new(self.params.store.len());
        let mut sums = Terms::default();
        let mut new_il_keys = Vec::new();
        let mut new_rl_keys = Vec::new();
        let scale = 1.0 / batch as f64;
        for &i in &picks {
            let episode = &self.dataset.train[i];
            let spec = cfg.augment.sample(&mut aug_rng)?;
            let scene = self.world.scene(&episode.scene_id)?;
            let tokens = episode_tokens(&vocab, episode)?;
            let out = episode_update(
                &self.params,
                cfg,
                scene,
                episode,
                &tokens,
                &spec,
                &train_ids,
                &self.queue_il,
                &self.queue_rl,
                &mut rollout_rng,
                scale,
            )?;
            grads.merge(out.grads);
            for t in out.transitions {
                self.buffer.push(t);
            }
            new_il_keys.extend(out.il_keys);
            new_rl_keys.extend(out.rl_keys);
            sums.il += out.terms.il;
            sums.actor += out.terms.actor;
            sums.cl_il += out.terms.cl_il;
            sums.cl_rl += out.terms.cl_rl;
            sums.total += out.terms.total;
            sums.reward += out.terms.reward;
            sums.success += out.terms.success;
        }

        let mut critic_value = 0.0;
        if switches.ml && self.buffer.len() >= cfg.train.batch_size {
            let tuples = self.buffer.sample(cfg.train.batch_size, &mut replay_rng)?;
            let (value, g) = critic_update(&self.params, cfg, &tuples, &train_ids)?;
            critic_value = value;
            grads.merge(g);
        }

        let grad_norm = grads.clip_global_norm(cfg.train.clip_norm);
        let total = sums.total * scale + critic_value;
        if !grad_norm.is_finite() || !grads.is_finite() || !total.is_finite() {
            return Err(TrainError::DivergenceDetected {
                iteration: it,
                detail: format!("loss {total}, gradient norm {grad_norm}"),
            });
        }
        adam_step(&mut self.params.store, &train_ids, &mut grads, &mut self.optimizer)?;
        self.params.momentum_update_encoder()?;
        self.params.momentum_update_critic()?;
        for k in new_il_keys {
            self.queue_il.push(&k)?;
        }
        for k in new_rl_keys {
            self.queue_rl.push(&k)?;
        }
        Ok(IterationLog {
            iteration: it,
            il_loss: sums.il * scale,
            actor_loss: sums.actor * scale,
            critic_loss: critic_value,
            cl_il_loss: sums.cl_il * scale,
            cl_rl_loss: sums.cl_rl * scale,
            total_loss: total,
            grad_norm,
            sample_reward: sums.reward * scale,
            sample_success: sums.success * scale,
            val: None,
        })
    }

    /// Greedy success on the fixed validation subsets.
    pub fn validate(&self) -> Result<ValSnapshot> {
        let n = self.config.train.val_episodes;
        let seen = &self.dataset.val_seen[..n.min(self.dataset.val_seen.len())];
        let unseen = &self.dataset.val_unseen[..n.min(self.dataset.val_unseen.len())];
        let seen = greedy_metrics(&self.params, self.world, seen)?;
        let unseen = greedy_metrics(&self.params, self.world, unseen)?;
        Ok(ValSnapshot {
            seen_sr: mean_of(&seen, |r| r.sr),
            seen_spl: mean_of(&seen, |r| r.spl),
            unseen_sr: mean_of(&unseen, |r| r.sr),
            unseen_spl: mean_of(&unseen, |r| r.spl),
        })
    }
}

struct EpisodeOutput {
    grads: GradSet,
    transitions: Vec<ReplayTuple>,
    il_keys: Vec<Vec<f64>>,
    rl_keys: Vec<Vec<f64>>,
    terms: Terms,
}

fn transitions(
    params: &AgentParams,
    scene: &EnvironmentGraph,
    episode: &Episode,
    pass: &PassOutput,
    hidden: &[Vec<f64>],
    bonus: f64,
) -> Result<(Vec<ReplayTuple>, f64, bool)> {
    let stop = params.dims.stop();
    let radius = scene.success_radius();
    let mut out = Vec::with_capacity(pass.steps.len());
    let mut total = 0.0;
    let mut success = false;
    let last = pass.steps.len() - 1;
    for (t, s) in pass.steps.iter().enumerate() {
        let before = scene.distance(pass.nodes[t], episode.target)?;
        let stopped = s.action == stop;
        let after = if stopped { before } else { scene.distance(pass.nodes[t + 1], episode.target)? };
        let r = step_reward(before, after, stopped, radius, bonus);
        if stopped && after <= radius {
            success = true;
        }
        total += r;
        let o = critic_input(&hidden[t], &s.probs);
        let (o_next, next_probs) = if t < last {
            (critic_input(&hidden[t + 1], &pass.steps[t + 1].probs), pass.steps[t + 1].probs.clone())
        } else {
            (o.clone(), s.probs.clone())
        };
        out.push(ReplayTuple { o, a: s.action, o_next, next_probs, r, d: t == last });
    }
    Ok((out, total, success))
}

fn min_q(g: &mut Graph, params: &AgentParams, o: &[f64], key: bool) -> Result<Vec<f64>> {
    let actions = params.dims.actions();
    let critics = if key { params.ids.critic_key } else { params.ids.critic };
    let x = g.row(o)?;
    let q1 = critic_all(g, critics[0], x, actions, true)?;
    let q2 = critic_all(g, critics[1], x, actions, true)?;
    Ok(g.value(q1).iter().zip(g.value(q2)).map(|(a, b)| a.min(*b)).collect())
}

fn mean_terms(g: &mut Graph, terms: &[DiffTensor]) -> Result<DiffTensor> {
    let all = g.concat(terms)?;
    Ok(g.mean(all)?)
}

#[allow(clippy::too_many_arguments)]
fn episode_update(
    params: &AgentParams,
    cfg: &RunConfig,
    scene: &EnvironmentGraph,
    episode: &Episode,
    tokens: &[usize],
    spec: &AugmentationSpec,
    train_ids: &[crate::numcore::ParamId],
    queue_il: &KeyQueue,
    queue_rl: &KeyQueue,
    rollout_rng: &mut rng::Rng,
    scale: f64,
) -> Result<EpisodeOutput> {
    let w = &cfg.weights;
    let sw = cfg.switches;
    let enc = params.ids.obs;
    let key_enc = params.ids.obs_key;
    let mut g = Graph::new(&params.store, train_ids);
    let mut gk = Graph::frozen(&params.store);
    let instr = encode_instruction(&mut g, params, tokens)?;
    let instr_k = encode_instruction(&mut gk, params, tokens)?;
    let mut terms = Terms::default();

    // Teacher-forced pass: imitation and observation consistency.
    let tf = run_pass(&mut g, params, scene, episode, &instr, enc, None, ActionSource::Teacher)?;
    let mut il = None;
    if sw.ml {
        let lps = tf.steps.iter().map(|s| g.log_softmax(s.logits)).collect::<std::result::Result<Vec<_>, _>>()?;
        let l = il_loss(&mut g, &lps, &tf.actions())?;
        terms.il = g.item(l);
        il = Some(l);
    }
    let mut cl_il = None;
    let mut il_key_out = Vec::new();
    if sw.cl_il {
        let actions = tf.actions();
        let kp = run_pass(&mut gk, params, scene, episode, &instr_k, key_enc, Some(spec), ActionSource::Replay(&actions))?;
        let keys = il_keys(&mut gk, params, &kp)?;
        let queries = il_queries(&mut g, params, &tf)?;
        cl_il = contrastive_loss(&mut g, &queries, &keys, queue_il, params.ids.bilinear_il)?;
        if let Some(l) = cl_il {
            terms.cl_il = g.item(l);
        }
        il_key_out = keys;
    }

    // Sampled pass: actor, replay transitions and critic consistency.
    let sp = run_pass(&mut g, params, scene, episode, &instr, enc, None, ActionSource::Sample(rollout_rng))?;
    let hidden: Vec<Vec<f64>> = sp.steps.iter().map(|s| g.value(s.hidden).to_vec()).collect();
    let (trans, reward, success) = transitions(params, scene, episode, &sp, &hidden, cfg.train.success_bonus)?;
    terms.reward = reward;
    terms.success = if success { 1.0 } else { 0.0 };
    let mut actor = None;
    if sw.ml {
        let mut per_step = Vec::with_capacity(sp.steps.len());
        for (s, tuple) in sp.steps.iter().zip(&trans) {
            let q = min_q(&mut gk, params, &tuple.o, false)?;
            per_step.push(actor_loss(&mut g, s.logits, &q, w.alpha)?);
        }
        let l = mean_terms(&mut g, &per_step)?;
        terms.actor = g.item(l);
        actor = Some(l);
    }
    let mut cl_rl = None;
    let mut rl_key_out = Vec::new();
    if sw.cl_rl {
        let actions = sp.actions();
        let kp = run_pass(&mut gk, params, scene, episode, &instr_k, key_enc, Some(spec), ActionSource::Replay(&actions))?;
        let keys = rl_keys(&mut gk, params, &kp)?;
        let queries = rl_queries(&mut g, params, &sp)?;
        cl_rl = contrastive_loss(&mut g, &queries, &keys, queue_rl, params.ids.bilinear_rl)?;
        if let Some(l) = cl_rl {
            terms.cl_rl = g.item(l);
        }
        rl_key_out = keys;
    }

    // Critic regression runs on the replay batch, so the supervised term
    // here carries only the actor and imitation parts.
    let l_ml = match (actor, il) {
        (Some(a), Some(i)) => {
            let a = g.scale(a, w.lambda_rl)?;
            let i = g.scale(i, w.lambda_ml)?;
            Some(g.add(a, i)?)
        }
        _ => None,
    };
    let total = train_objective(&mut g, l_ml, cl_il, cl_rl, w, sw)?;
    let grads = match total {
        Some(t) => {
            terms.total = g.item(t);
            let t = g.scale(t, scale)?;
            g.backward(t)?
        }
        None => GradSet::new(params.store.len()),
    };
    Ok(EpisodeOutput { grads, transitions: trans, il_keys: il_key_out, rl_keys: rl_key_out, terms })
}

/// Mean-squared Bellman error of both critics on a replay minibatch.
fn critic_update(
    params: &AgentParams,
    cfg: &RunConfig,
    tuples: &[&ReplayTuple],
    train_ids: &[crate::numcore::ParamId],
) -> Result<(f64, GradSet)> {
    let actions = params.dims.actions();
    let mut gk = Graph::frozen(&params.store);
    let mut targets = Vec::with_capacity(tuples.len());
    for t in tuples {
        let q = if t.d { vec![0.0; actions] } else { min_q(&mut gk, params, &t.o_next, true)? };
        targets.push(expected_sac_target(t.r, t.d, &t.next_probs, &q, &cfg.weights)?);
    }
    let mut g = Graph::new(&params.store, train_ids);
    let mut losses = Vec::with_capacity(2);
    for c in params.ids.critic {
        let mut qs = Vec::with_capacity(tuples.len());
        for t in tuples {
            let o = g.row(&t.o)?;
            qs.push(critic_q(&mut g, c, o, t.a, actions)?);
        }
        let q = g.concat(&qs)?;
        losses.push(critic_loss(&mut g, q, &targets)?);
    }
    let total = g.add(losses[0], losses[1])?;
    let value = g.item(total);
    Ok((value, g.backward(total)?))
}

/// Runs `config.train.iters` iterations from a fresh initialization.
/// `on_iteration` sees every log line and may persist the trainer state.
pub fn train_joint(
    config: &RunConfig,
    world: &World,
    dataset: &Dataset,
    mut on_iteration: impl FnMut(&Trainer, &IterationLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), world, dataset)?;
    let mut log = Vec::with_capacity(config.train.iters as usize);
    while trainer.iteration < config.train.iters {
        let line = trainer.step()?;
        on_iteration(&trainer, &line)?;
        log.push(line);
    }
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), log })
}
