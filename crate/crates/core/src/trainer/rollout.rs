use rand::Rng as _;

use super::{Result, TrainError};
use crate::agent::{
    decode_step, embed_observation, encode_instruction, initial_state, observation_tensor, AgentParams, EncoderIds,
    Instruction, KeyQueue,
};
use crate::augment::AugmentationSpec;
use crate::evalkit::{StopReason, TrajectoryRecord};
use crate::numcore::{DiffTensor, Graph};
use crate::objectives::entropy_of;
use crate::rng::Rng;
use crate::world::{EnvironmentGraph, Episode, Vocabulary, World};

/// How actions are chosen during a pass.
pub enum ActionSource<'a> {
    /// Shortest-path teacher.
    Teacher,
    /// Draw from the policy.
    Sample(&'a mut Rng),
    /// Arg-max of the policy, lowest index on ties.
    Greedy,
    /// Repeat a recorded action sequence.
    Replay(&'a [usize]),
}

#[derive(Clone, Debug)]
pub struct PassStep {
    /// Node at which the decision was taken.
    pub node: usize,
    pub action: usize,
    pub logits: DiffTensor,
    /// Decoder output state for this step.
    pub hidden: DiffTensor,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PassOutput {
    pub steps: Vec<PassStep>,
    pub nodes: Vec<usize>,
    pub stop_reason: StopReason,
}

impl PassOutput {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn into_record(self, episode: &Episode) -> TrajectoryRecord {
        TrajectoryRecord {
            episode_id: episode.episode_id.clone(),
            scene_id: episode.scene_id.clone(),
            entropies: self.steps.iter().map(|s| entropy_of(&s.probs)).collect(),
            actions: self.steps.iter().map(|s| s.action).collect(),
            action_probs: self.steps.into_iter().map(|s| s.probs).collect(),
            nodes: self.nodes,
            stop_reason: self.stop_reason,
        }
    }
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Actions the agent may take: navigable sectors and STOP (the last entry).
fn allowed(navigable: &[bool], action: usize) -> bool {
    navigable.get(action).copied().unwrap_or(true)
}

fn argmax(p: &[f64], navigable: &[bool]) -> usize {
    let mut best = p.len() - 1;
    for (i, v) in p.iter().enumerate() {
        if allowed(navigable, i) && (*v > p[best] || (*v == p[best] && i < best)) {
            best = i;
        }
    }
    best
}

fn draw(p: &[f64], navigable: &[bool], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = p.len() - 1;
    for (i, v) in p.iter().enumerate() {
        if *v > 0.0 && allowed(navigable, i) {
            acc += v;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Runs the decoder from the episode start until STOP or `max_steps`,
/// embedding observations with `encoder` after optional augmentation.
#[allow(clippy::too_many_arguments)]
pub fn run_pass(
    g: &mut Graph,
    params: &AgentParams,
    scene: &EnvironmentGraph,
    episode: &Episode,
    instr: &Instruction,
    encoder: EncoderIds,
    aug: Option<&AugmentationSpec>,
    mut source: ActionSource,
) -> Result<PassOutput> {
    let stop = params.dims.stop();
    let mut node = episode.start;
    let mut nodes = vec![node];
    let mut steps = Vec::new();
    let mut state = initial_state(g, params, instr)?;
    for t in 0..params.config.max_steps {
        let raw = scene.observe(node)?;
        let obs = match aug {
            Some(spec) => spec.apply_at(&raw, t),
            None => raw,
        };
        let x = observation_tensor(g, &obs)?;
        let feats = embed_observation(g, encoder, x)?;
        let out = decode_step(g, params, &state, feats, &obs.navigable, instr)?;
        let probs = softmax(g.value(out.logits));
        let action = match &mut source {
            ActionSource::Teacher => scene.teacher_action(node, episode.target)?,
            ActionSource::Sample(rng) => draw(&probs, &obs.navigable, rng),
            ActionSource::Greedy => argmax(&probs, &obs.navigable),
            ActionSource::Replay(actions) => match actions.get(t) {
                Some(a) => *a,
                None => break,
            },
        };
        steps.push(PassStep { node, action, logits: out.logits, hidden: out.state.hidden, probs });
        if action == stop {
            return Ok(PassOutput { steps, nodes, stop_reason: StopReason::Stopped });
        }
        node = scene.neighbor_in_sector(node, action).ok_or_else(|| {
            TrainError::Format(format!("action {action} is not navigable at node {node} of {}", scene.scene_id))
        })?;
        nodes.push(node);
        state = out.state;
        state.prev_action = action;
    }
    Ok(PassOutput { steps, nodes, stop_reason: StopReason::MaxSteps })
}

/// Instruction token ids of an episode.
pub fn episode_tokens(vocab: &Vocabulary, episode: &Episode) -> Result<Vec<usize>> {
    Ok(vocab.encode(&episode.instruction)?)
}

/// One pass with frozen parameters, returned as a trajectory record.
/// `Sample` mode needs `rng`; other modes ignore it.
pub fn rollout(
    params: &AgentParams,
    world: &World,
    episode: &Episode,
    mode: ActionSource,
    aug: Option<&AugmentationSpec>,
) -> Result<TrajectoryRecord> {
    let scene = world.scene(&episode.scene_id)?;
    let tokens = episode_tokens(&world.vocabulary(), episode)?;
    let mut g = Graph::frozen(&params.store);
    let instr = encode_instruction(&mut g, params, &tokens)?;
    let pass = run_pass(&mut g, params, scene, episode, &instr, params.ids.obs, aug, mode)?;
    Ok(pass.into_record(episode))
}

/// Critic input for one step: decoder state followed by the action distribution.
pub fn critic_input(hidden: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(hidden.len() + probs.len());
    v.extend_from_slice(hidden);
    v.extend_from_slice(probs);
    v
}

/// Negative keys for step `t`: the keys of every other step of the same
/// trajectory followed by the queue contents.
pub fn select_negatives(step_keys: &[Vec<f64>], t: usize, queue: &KeyQueue) -> Result<Vec<Vec<f64>>> {
    if step_keys.len() < 2 {
        return Err(TrainError::TooShortTrajectory(step_keys.len()));
    }
    let mut out: Vec<Vec<f64>> =
        step_keys.iter().enumerate().filter(|(s, _)| *s != t).map(|(_, k)| k.clone()).collect();
    out.extend(queue.iter().cloned());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.4, 0.4, 0.2], &[true, true]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.4], &[true, true]), 1);
        assert_eq!(argmax(&[0.2, 0.2, 0.2, 0.4], &[true, true, true]), 3);
    }

    #[test]
    fn choices_skip_blocked_sectors() {
        assert_eq!(argmax(&[0.1, 0.6, 0.3], &[true, false]), 2);
        let mut r = crate::rng::stream(1, "t");
        for _ in 0..1000 {
            assert_ne!(draw(&[0.3, 0.4, 0.3], &[true, false], &mut r), 1);
        }
    }

    #[test]
    fn draw_never_picks_zero_mass() {
        let mut r = crate::rng::stream(0, "t");
        for _ in 0..1000 {
            assert_ne!(draw(&[0.5, 0.0, 0.5], &[true, true], &mut r), 1);
        }
    }

    #[test]
    fn negatives_count_and_exclusion() {
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let mut q = KeyQueue::new(4);
        q.push(&[1.0, 1.0]).unwrap();
        let n = select_negatives(&keys, 1, &q).unwrap();
        assert_eq!(n.len(), 2 + 1);
        assert!(!n.contains(&keys[1]));
        assert!(matches!(select_negatives(&keys[..1], 0, &q), Err(TrainError::TooShortTrajectory(1))));
    }
}
