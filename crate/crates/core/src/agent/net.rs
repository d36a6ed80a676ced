use crate::numcore::{DiffTensor, Graph};
use crate::world::Observation;

use super::{AgentError, AgentParams, CriticIds, EncoderIds, GruIds, Result};

/// Encoded instruction: per-token features `[len, hidden]` and the
/// initial decoder state derived from both encoder directions.
#[derive(Clone, Copy, Debug)]
pub struct Instruction {
    pub tokens: DiffTensor,
    pub summary: DiffTensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `[1, hidden]`
    pub hidden: DiffTensor,
    /// Index into the action embedding table (`begin` at step 0).
    pub prev_action: usize,
    pub step: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    /// `[1, views + 1]`, non-navigable sectors pushed to `-1e9`.
    pub logits: DiffTensor,
    /// Attentive visual feature used at this step, `[1, embed]`.
    pub visual: DiffTensor,
}

fn gru_step(g: &mut Graph, x_proj: DiffTensor, h: DiffTensor, ids: GruIds, n: usize) -> Result<DiffTensor> {
    let wh = g.param(ids.wh)?;
    let b = g.param(ids.b)?;
    let hh = g.matmul(h, wh)?;
    let xb = g.add(x_proj, b)?;
    let xz = g.cols_of(xb, 0, n)?;
    let xr = g.cols_of(xb, n, n)?;
    let xn = g.cols_of(xb, 2 * n, n)?;
    let hz = g.cols_of(hh, 0, n)?;
    let hr = g.cols_of(hh, n, n)?;
    let hn = g.cols_of(hh, 2 * n, n)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, hn)?;
    let cand = g.add(xn, rh)?;
    let cand = g.tanh(cand)?;
    let diff = g.sub(h, cand)?;
    let zd = g.mul(z, diff)?;
    Ok(g.add(cand, zd)?)
}

fn run_direction(g: &mut Graph, xs: DiffTensor, ids: GruIds, n: usize, reverse: bool) -> Result<Vec<DiffTensor>> {
    let wx = g.param(ids.wx)?;
    let proj = g.matmul(xs, wx)?;
    let len = xs.rows();
    let mut h = g.constant(1, n, vec![0.0; n])?;
    let mut out = vec![h; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let x = g.row_of(proj, t)?;
        h = gru_step(g, x, h, ids, n)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional GRU over the token embeddings.
pub fn encode_instruction(g: &mut Graph, p: &AgentParams, tokens: &[usize]) -> Result<Instruction> {
    if tokens.is_empty() {
        return Err(AgentError::EmptyInstruction);
    }
    let vocab = p.dims.vocab;
    let mut onehot = vec![0.0; tokens.len() * vocab];
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(AgentError::UnknownToken(t));
        }
        onehot[i * vocab + t] = 1.0;
    }
    let onehot = g.constant(tokens.len(), vocab, onehot)?;
    let table = g.param(p.ids.embed)?;
    let xs = g.matmul(onehot, table)?;
    let n = p.config.hidden / 2;
    let fwd = run_direction(g, xs, p.ids.fwd, n, false)?;
    let bwd = run_direction(g, xs, p.ids.bwd, n, true)?;
    let f = g.concat_rows(&fwd)?;
    let b = g.concat_rows(&bwd)?;
    let tokens_t = g.concat(&[f, b])?;
    let last = *fwd.last().expect("non-empty");
    let summary = g.concat(&[last, bwd[0]])?;
    Ok(Instruction { tokens: tokens_t, summary })
}

/// Step-0 decoder state: `tanh(summary W + b)` with the begin action.
pub fn initial_state(g: &mut Graph, p: &AgentParams, instr: &Instruction) -> Result<DecoderState> {
    let w = g.param(p.ids.init_w)?;
    let b = g.param(p.ids.init_b)?;
    let h = g.matmul(instr.summary, w)?;
    let h = g.add(h, b)?;
    let hidden = g.tanh(h)?;
    Ok(DecoderState { hidden, prev_action: p.dims.begin(), step: 0 })
}

pub fn observation_tensor(g: &mut Graph, obs: &Observation) -> Result<DiffTensor> {
    Ok(g.constant(obs.views, obs.dim, obs.features.clone())?)
}

/// Per-sector embedding `tanh(X W + b)`, `[views, embed]`.
pub fn embed_observation(g: &mut Graph, enc: EncoderIds, obs: DiffTensor) -> Result<DiffTensor> {
    let w = g.param(enc.w)?;
    let b = g.param(enc.b)?;
    let x = g.matmul(obs, w)?;
    let x = g.add(x, b)?;
    Ok(g.tanh(x)?)
}

/// `sum_i softmax_i(f_i . (W_F^T h)) f_i` over the rows of `features`.
/// `w_f` is stored as `[hidden, embed]`, so the query is `h W_F`.
pub fn attend_visual(g: &mut Graph, features: DiffTensor, w_f: DiffTensor, hidden: DiffTensor) -> Result<DiffTensor> {
    let query = g.matmul(hidden, w_f)?;
    let scores = g.matmul_nt(query, features)?;
    let weights = g.softmax(scores)?;
    Ok(g.matmul(weights, features)?)
}

/// One decoder step on already-embedded observation features.
pub fn decode_step(
    g: &mut Graph,
    p: &AgentParams,
    state: &DecoderState,
    features: DiffTensor,
    navigable: &[bool],
    instr: &Instruction,
) -> Result<StepOutput> {
    if state.step >= p.config.max_steps {
        return Err(AgentError::MaxStepsExceeded(state.step));
    }
    let ids = &p.ids;
    let h = p.config.hidden;
    let w_f = g.param(ids.attn_visual)?;
    let visual = attend_visual(g, features, w_f, state.hidden)?;
    let table = g.param(ids.action_embed)?;
    let prev = g.row_of(table, state.prev_action)?;
    let x = g.concat(&[visual, prev])?;
    let wx = g.param(ids.dec.wx)?;
    let x = g.matmul(x, wx)?;
    let cell = gru_step(g, x, state.hidden, ids.dec, h)?;

    let w_u = g.param(ids.attn_instr)?;
    let query = g.matmul(cell, w_u)?;
    let scores = g.matmul_nt(query, instr.tokens)?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, instr.tokens)?;
    let both = g.concat(&[context, cell])?;
    let w = g.param(ids.combine)?;
    let hidden = g.matmul(both, w)?;
    let hidden = g.tanh(hidden)?;

    let w_g = g.param(ids.action_head)?;
    let stop = g.param(ids.action_stop)?;
    let q = g.matmul(hidden, w_g)?;
    let sector_logits = g.matmul_nt(q, features)?;
    let stop_logit = g.matmul_nt(q, stop)?;
    let logits = g.concat(&[sector_logits, stop_logit])?;
    let mut mask = vec![0.0; p.dims.actions()];
    for (m, nav) in mask.iter_mut().zip(navigable) {
        if !nav {
            *m = -1e9;
        }
    }
    let mask = g.row(&mask)?;
    let logits = g.add(logits, mask)?;
    let state = DecoderState { hidden, prev_action: state.prev_action, step: state.step + 1 };
    Ok(StepOutput { state, logits, visual })
}

/// Splits the first layer weight into its observation and action blocks.
fn first_layer(g: &mut Graph, c: CriticIds, obs_dim: usize, actions: usize, frozen: bool) -> Result<[DiffTensor; 4]> {
    let (w1, b1, w2, b2) = if frozen {
        (g.param_const(c.w1)?, g.param_const(c.b1)?, g.param_const(c.w2)?, g.param_const(c.b2)?)
    } else {
        (g.param(c.w1)?, g.param(c.b1)?, g.param(c.w2)?, g.param(c.b2)?)
    };
    let cols = w1.cols();
    let w_obs = g.slice(w1, 0, 0, obs_dim, cols)?;
    let w_act = g.slice(w1, obs_dim, 0, actions, cols)?;
    let act_rows = g.add(w_act, b1)?;
    Ok([w_obs, act_rows, w2, b2])
}

/// Hidden layer of critic `c` for every action, `[actions, critic_hidden]`.
/// `frozen` reads the weights as constants.
pub fn critic_hidden(g: &mut Graph, c: CriticIds, obs: DiffTensor, actions: usize, frozen: bool) -> Result<DiffTensor> {
    let [w_obs, act_rows, _, _] = first_layer(g, c, obs.cols(), actions, frozen)?;
    let o = g.matmul(obs, w_obs)?;
    let pre = g.add(act_rows, o)?;
    Ok(g.tanh(pre)?)
}

/// Q values of every action, `[1, actions]`.
pub fn critic_all(g: &mut Graph, c: CriticIds, obs: DiffTensor, actions: usize, frozen: bool) -> Result<DiffTensor> {
    let [w_obs, act_rows, w2, b2] = first_layer(g, c, obs.cols(), actions, frozen)?;
    let o = g.matmul(obs, w_obs)?;
    let pre = g.add(act_rows, o)?;
    let hid = g.tanh(pre)?;
    let q = g.matmul(hid, w2)?;
    let q = g.add(q, b2)?;
    Ok(g.transpose(q)?)
}

/// Scalar Q value of one action: two-layer tanh head on `[obs; onehot(action)]`.
pub fn critic_q(g: &mut Graph, c: CriticIds, obs: DiffTensor, action: usize, actions: usize) -> Result<DiffTensor> {
    if action >= actions {
        return Err(AgentError::InvalidAction { action, max: actions - 1 });
    }
    let mut onehot = vec![0.0; actions];
    onehot[action] = 1.0;
    let a = g.row(&onehot)?;
    let input = g.concat(&[obs, a])?;
    let w1 = g.param(c.w1)?;
    let b1 = g.param(c.b1)?;
    let w2 = g.param(c.w2)?;
    let b2 = g.param(c.b2)?;
    let hid = g.matmul(input, w1)?;
    let hid = g.add(hid, b1)?;
    let hid = g.tanh(hid)?;
    let q = g.matmul(hid, w2)?;
    Ok(g.add(q, b2)?)
}
