//! Query/key construction for the two consistency heads.
//!
//! Observation head: the query is the projected decoder state of the
//! online pass; the key is the same quantity from a pass over another view
//! whose observations go through the momentum encoder. Critic head: the
//! projected hidden layer of the first critic at the taken action; keys use
//! the momentum critic. Negatives are the keys of the other steps of the
//! trajectory plus the queue.

use super::rollout::{select_negatives, PassOutput};
use super::Result;
use crate::agent::{critic_hidden, AgentParams, KeyQueue};
use crate::numcore::{DiffTensor, Graph, ParamId};
use crate::objectives::info_nce;

fn project(g: &mut Graph, x: DiffTensor, proj: ParamId) -> Result<DiffTensor> {
    let w = g.param(proj)?;
    let y = g.matmul(x, w)?;
    Ok(g.l2_normalize(y)?)
}

/// Observation-head query for every step of `pass`.
pub fn il_queries(g: &mut Graph, params: &AgentParams, pass: &PassOutput) -> Result<Vec<DiffTensor>> {
    pass.steps.iter().map(|s| project(g, s.hidden, params.ids.proj_il)).collect()
}

/// Critic-head query for every step. The critic weights and the action
/// distribution enter as constants; the decoder state carries gradient.
pub fn rl_queries(g: &mut Graph, params: &AgentParams, pass: &PassOutput) -> Result<Vec<DiffTensor>> {
    critic_features(g, params, pass, false)
}

fn critic_features(g: &mut Graph, params: &AgentParams, pass: &PassOutput, key: bool) -> Result<Vec<DiffTensor>> {
    let actions = params.dims.actions();
    let critic = if key { params.ids.critic_key[0] } else { params.ids.critic[0] };
    let mut out = Vec::with_capacity(pass.steps.len());
    for s in &pass.steps {
        let probs = g.row(&s.probs)?;
        let obs = g.concat(&[s.hidden, probs])?;
        let hid = critic_hidden(g, critic, obs, actions, true)?;
        let row = g.row_of(hid, s.action)?;
        out.push(project(g, row, params.ids.proj_rl)?);
    }
    Ok(out)
}

/// Observation-head keys of a momentum-encoder pass, as plain vectors.
pub fn il_keys(g: &mut Graph, params: &AgentParams, pass: &PassOutput) -> Result<Vec<Vec<f64>>> {
    let qs = il_queries(g, params, pass)?;
    Ok(qs.into_iter().map(|k| g.value(k).to_vec()).collect())
}

/// Critic-head keys of a momentum-encoder pass, computed with the momentum critic.
pub fn rl_keys(g: &mut Graph, params: &AgentParams, pass: &PassOutput) -> Result<Vec<Vec<f64>>> {
    let ks = critic_features(g, params, pass, true)?;
    Ok(ks.into_iter().map(|k| g.value(k).to_vec()).collect())
}

/// Mean InfoNCE over steps; `None` when the trajectory has fewer than two
/// steps and so no in-trajectory negatives.
pub fn contrastive_loss(
    g: &mut Graph,
    queries: &[DiffTensor],
    keys: &[Vec<f64>],
    queue: &KeyQueue,
    bilinear: ParamId,
) -> Result<Option<DiffTensor>> {
    if keys.len() < 2 || queries.len() != keys.len() {
        return Ok(None);
    }
    let w = g.param(bilinear)?;
    let dim = keys[0].len();
    let mut terms = Vec::with_capacity(keys.len());
    for (t, q) in queries.iter().enumerate() {
        let negs = select_negatives(keys, t, queue)?;
        let flat: Vec<f64> = negs.iter().flatten().copied().collect();
        let negs = g.constant(negs.len(), dim, flat)?;
        let pos = g.row(&keys[t])?;
        terms.push(info_nce(g, *q, pos, Some(negs), w)?);
    }
    let all = g.concat(&terms)?;
    Ok(Some(g.mean(all)?))
}
