//! Per-episode navigation metrics.
//!
//! With `R` the executed node sequence, `Q` the reference path, `d` the
//! geodesic distance and `d_th` the success radius:
//!
//! - `TL` sum of walked edge lengths; `NE = d(R_last, target)`;
//!   `SR = [NE <= d_th]`; `SPL = SR * l / max(l, TL)` with `l` the reference length.
//! - `nDTW = exp(-DTW(R, Q) / (|Q| d_th))` where `DTW` is the minimum total
//!   `d(r_i, q_j)` over monotone alignments (steps `(1,0)`, `(0,1)`, `(1,1)`)
//!   from `(R_0, Q_0)` to `(R_last, Q_last)`; `sDTW = SR * nDTW`.
//! - `CLS = PC * LS` with path coverage `PC = mean_{q in Q} exp(-d(q, R) / d_th)`,
//!   `d(q, R) = min_r d(q, r)`, expected length `EPL = PC * L(Q)` and length
//!   score `LS = EPL / (EPL + |EPL - L(R)|)`.

use serde::{Deserialize, Serialize};

use crate::world::{EnvironmentGraph, Episode, WorldError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Stopped,
    MaxSteps,
}

/// What one navigation attempt did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub scene_id: String,
    pub nodes: Vec<usize>,
    /// Action taken at each step; the last is STOP unless `stop_reason` is `max_steps`.
    pub actions: Vec<usize>,
    pub action_probs: Vec<Vec<f64>>,
    pub entropies: Vec<f64>,
    pub stop_reason: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub episode_id: String,
    pub scene_id: String,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 7] {
        [self.tl, self.ne, self.sr, self.spl, self.cls, self.ndtw, self.sdtw]
    }
}

pub const METRIC_NAMES: [&str; 7] = ["TL", "NE", "SR", "SPL", "CLS", "nDTW", "sDTW"];

fn check_walk(graph: &EnvironmentGraph, nodes: &[usize]) -> Result<f64, WorldError> {
    if nodes.is_empty() {
        return Err(WorldError::InvalidGraph("empty trajectory".into()));
    }
    for &n in nodes {
        if n >= graph.num_nodes() {
            return Err(WorldError::UnknownNode { scene: graph.scene_id.clone(), node: n });
        }
    }
    graph
        .path_length(nodes)
        .ok_or_else(|| WorldError::InvalidGraph(format!("trajectory in {} is not a walk", graph.scene_id)))
}

/// Dynamic-time-warping cost between two node sequences under geodesic distance.
pub fn dtw(graph: &EnvironmentGraph, a: &[usize], b: &[usize]) -> Result<f64, WorldError> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![f64::INFINITY; (n + 1) * (m + 1)];
    table[0] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let cost = graph.distance(a[i - 1], b[j - 1])?;
            let best = table[(i - 1) * (m + 1) + j].min(table[i * (m + 1) + j - 1]).min(table[(i - 1) * (m + 1) + j - 1]);
            table[i * (m + 1) + j] = cost + best;
        }
    }
    Ok(table[n * (m + 1) + m])
}

pub fn ndtw(graph: &EnvironmentGraph, path: &[usize], reference: &[usize], d_th: f64) -> Result<f64, WorldError> {
    Ok((-dtw(graph, path, reference)? / (reference.len() as f64 * d_th)).exp())
}

pub fn cls(graph: &EnvironmentGraph, path: &[usize], reference: &[usize], d_th: f64) -> Result<f64, WorldError> {
    let mut pc = 0.0;
    for &q in reference {
        let mut best = f64::INFINITY;
        for &r in path {
            best = best.min(graph.distance(q, r)?);
        }
        pc += (-best / d_th).exp();
    }
    pc /= reference.len() as f64;
    let ref_len = check_walk(graph, reference)?;
    let path_len = check_walk(graph, path)?;
    let epl = pc * ref_len;
    let denom = epl + (epl - path_len).abs();
    let ls = if denom > 0.0 { epl / denom } else { 1.0 };
    Ok(pc * ls)
}

/// All metrics of one trajectory against its episode.
pub fn compute_metrics(
    traj: &TrajectoryRecord,
    episode: &Episode,
    graph: &EnvironmentGraph,
    d_th: f64,
) -> Result<MetricRow, WorldError> {
    if traj.scene_id != episode.scene_id || graph.scene_id != episode.scene_id {
        return Err(WorldError::SceneMissing(format!(
            "trajectory scene {} / graph {} do not match episode scene {}",
            traj.scene_id, graph.scene_id, episode.scene_id
        )));
    }
    let tl = check_walk(graph, &traj.nodes)?;
    let last = *traj.nodes.last().expect("checked non-empty");
    let ne = graph.distance(last, episode.target)?;
    let sr = if ne <= d_th { 1.0 } else { 0.0 };
    let reference = graph.path_length(&episode.gt_path).expect("episode paths are walks");
    let spl = if sr > 0.0 { sr * reference / reference.max(tl) } else { 0.0 };
    let nd = ndtw(graph, &traj.nodes, &episode.gt_path, d_th)?;
    Ok(MetricRow {
        episode_id: episode.episode_id.clone(),
        scene_id: episode.scene_id.clone(),
        tl,
        ne,
        sr,
        spl,
        cls: cls(graph, &traj.nodes, &episode.gt_path, d_th)?,
        ndtw: nd,
        sdtw: sr * nd,
    })
}
