use super::checkpoint::Checkpoint;
use super::contrast::{contrastive_loss, il_keys, il_queries, rl_keys, rl_queries};
use super::joint::dims_of;
use super::rollout::{episode_tokens, rollout, run_pass, ActionSource};
use super::{Result, RunConfig, TrainError};
use crate::agent::{encode_instruction, AgentParams};
use crate::augment::AugmentationSpec;
use crate::evalkit::TrajectoryRecord;
use crate::numcore::{adam_step, DiffTensor, Graph, OptimizerState};
use crate::objectives::{tta_objective, Switches};
use crate::rng;
use crate::world::{Episode, World};

#[derive(Clone, Debug)]
pub struct TtaOutcome {
    pub trajectory: TrajectoryRecord,
    /// Mean entropy over the adaptation views before each step, followed by
    /// the value after the last step. Empty when no step ran.
    pub entropy_curve: Vec<f64>,
    /// Parameters after adaptation; only the consistency set differs from
    /// the checkpoint.
    pub params: AgentParams,
}

impl TtaOutcome {
    pub fn entropy_before(&self) -> Option<f64> {
        self.entropy_curve.first().copied()
    }

    pub fn entropy_after(&self) -> Option<f64> {
        self.entropy_curve.last().copied()
    }
}

/// Augmentations used to adapt on one episode, fixed by `(seed, episode_id)`.
pub fn adaptation_views(config: &RunConfig, seed: u64, episode: &Episode) -> Result<Vec<AugmentationSpec>> {
    let mut r = rng::stream(seed, &format!("tta/{}", episode.episode_id));
    (0..config.tta.batch).map(|_| Ok(config.augment.sample(&mut r)?)).collect()
}

struct ViewPasses {
    probs: Vec<DiffTensor>,
    loss: DiffTensor,
}

#[allow(clippy::too_many_arguments)]
fn forward_views(
    g: &mut Graph,
    gk: &mut Graph,
    params: &AgentParams,
    config: &RunConfig,
    switches: Switches,
    ckpt: &Checkpoint,
    world: &World,
    episode: &Episode,
    views: &[AugmentationSpec],
    actions: &[usize],
    with_cl: bool,
) -> Result<ViewPasses> {
    let scene = world.scene(&episode.scene_id)?;
    let tokens = episode_tokens(&world.vocabulary(), episode)?;
    let instr = encode_instruction(g, params, &tokens)?;
    let mut probs = Vec::new();
    let mut passes = Vec::with_capacity(views.len());
    for spec in views {
        let pass =
            run_pass(g, params, scene, episode, &instr, params.ids.obs, Some(spec), ActionSource::Replay(actions))?;
        for s in &pass.steps {
            probs.push(g.softmax(s.logits)?);
        }
        passes.push(pass);
    }
    let mut loss = tta_objective(g, &probs)?;
    let w = &config.weights;
    if with_cl && switches.any_cl() && actions.len() >= 2 {
        let instr_k = encode_instruction(gk, params, &tokens)?;
        let kp = run_pass(gk, params, scene, episode, &instr_k, params.ids.obs_key, None, ActionSource::Replay(actions))?;
        let k_il = if switches.cl_il { il_keys(gk, params, &kp)? } else { Vec::new() };
        let k_rl = if switches.cl_rl { rl_keys(gk, params, &kp)? } else { Vec::new() };
        let mut cl = Vec::new();
        for pass in &passes {
            if switches.cl_il {
                let q = il_queries(g, params, pass)?;
                if let Some(l) = contrastive_loss(g, &q, &k_il, &ckpt.queue_il, params.ids.bilinear_il)? {
                    cl.push(g.scale(l, w.lambda_cl_il)?);
                }
            }
            if switches.cl_rl {
                let q = rl_queries(g, params, pass)?;
                if let Some(l) = contrastive_loss(g, &q, &k_rl, &ckpt.queue_rl, params.ids.bilinear_rl)? {
                    cl.push(g.scale(l, w.lambda_cl_rl)?);
                }
            }
        }
        if !cl.is_empty() {
            let all = g.concat(&cl)?;
            let s = g.sum(all)?;
            let s = g.scale(s, 1.0 / passes.len() as f64)?;
            loss = g.add(loss, s)?;
        }
    }
    Ok(ViewPasses { probs, loss })
}

fn mean_entropy(g: &Graph, probs: &[DiffTensor]) -> f64 {
    probs.iter().map(|p| crate::objectives::entropy_of(g.value(*p))).sum::<f64>() / probs.len() as f64
}

/// Adapts a private copy of the consistency parameters to one episode and
/// navigates it greedily. The supervised parameters are never written.
///
/// The agent first navigates greedily with the checkpoint; each step then
/// replays those actions over `tta.batch` augmented views and descends the
/// mean prediction entropy plus the enabled consistency terms.
pub fn adapt_test_time(
    ckpt: &Checkpoint,
    config: &RunConfig,
    world: &World,
    episode: &Episode,
    seed: u64,
) -> Result<TtaOutcome> {
    if ckpt.params.dims != dims_of(world) {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint dims {:?} do not fit world dims {:?}",
            ckpt.params.dims,
            dims_of(world)
        )));
    }
    let probe = rollout(&ckpt.params, world, episode, ActionSource::Greedy, None)?;
    if config.tta.iters == 0 {
        return Ok(TtaOutcome { trajectory: probe, entropy_curve: Vec::new(), params: ckpt.params.clone() });
    }
    let views = adaptation_views(config, seed, episode)?;
    let switches = ckpt.switches;
    let mut params = ckpt.params.clone();
    let ids = params.cl_trainable_ids();
    let mut opt = OptimizerState::new(config.tta.learning_rate)?;
    let mut curve = Vec::with_capacity(config.tta.iters + 1);
    for _ in 0..config.tta.iters {
        let mut g = Graph::new(&params.store, &ids);
        let mut gk = Graph::frozen(&params.store);
        let out = forward_views(
            &mut g, &mut gk, &params, config, switches, ckpt, world, episode, &views, &probe.actions, true,
        )?;
        curve.push(mean_entropy(&g, &out.probs));
        let mut grads = g.backward(out.loss)?;
        grads.clip_global_norm(config.train.clip_norm);
        if !grads.is_finite() {
            return Err(TrainError::DivergenceDetected {
                iteration: curve.len() as u64,
                detail: format!("non-finite adaptation gradient on {}", episode.episode_id),
            });
        }
        adam_step(&mut params.store, &ids, &mut grads, &mut opt)?;
        if config.tta.momentum_update {
            params.momentum_update_encoder()?;
        }
    }
    let mut g = Graph::frozen(&params.store);
    let mut gk = Graph::frozen(&params.store);
    let out = forward_views(&mut g, &mut gk, &params, config, switches, ckpt, world, episode, &views, &probe.actions, false)?;
    curve.push(mean_entropy(&g, &out.probs));
    let trajectory = rollout(&params, world, episode, ActionSource::Greedy, None)?;
    Ok(TtaOutcome { trajectory, entropy_curve: curve, params })
}
