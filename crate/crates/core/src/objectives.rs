//! Training and adaptation losses.
//!
//! Supervised objective: `L_ml = L_rl + lambda_ml * L_il` where
//! `L_rl = critic_mse + lambda_rl * actor`. Full training objective:
//! `L = L_ml + lambda_cl_il * L_cl_il + lambda_cl_rl * L_cl_rl`, each term
//! gated by its ablation switch. Contrastive terms are the negated log of
//! the softmax weight of the positive key (standard InfoNCE, minimized).
//! Test-time objective: mean prediction entropy over augmented views.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{DiffTensor, NumError, Tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("not a probability distribution (sum {0})")]
    InvalidDistribution(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite input to {0}")]
    NonFiniteValue(&'static str),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Imitation term inside the supervised objective.
    pub lambda_ml: f64,
    /// Actor term inside the reinforcement objective.
    pub lambda_rl: f64,
    pub lambda_cl_il: f64,
    pub lambda_cl_rl: f64,
    /// Entropy temperature.
    pub alpha: f64,
    /// Discount.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ml: 0.2, lambda_rl: 0.2, lambda_cl_il: 0.2, lambda_cl_rl: 0.2, alpha: 0.05, gamma: 0.95 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ml, self.lambda_rl, self.lambda_cl_il, self.lambda_cl_rl, self.alpha, self.gamma];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ObjectiveError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        if self.gamma >= 1.0 {
            return Err(ObjectiveError::InvalidWeights(format!("gamma {} must be < 1", self.gamma)));
        }
        Ok(())
    }
}

/// Ablation switches for the three objective families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Switches {
    pub ml: bool,
    pub cl_il: bool,
    pub cl_rl: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::ALL
    }
}

impl Switches {
    pub const ALL: Switches = Switches { ml: true, cl_il: true, cl_rl: true };
    pub const ML_ONLY: Switches = Switches { ml: true, cl_il: false, cl_rl: false };

    pub fn any_cl(&self) -> bool {
        self.cl_il || self.cl_rl
    }

    pub fn any(&self) -> bool {
        self.ml || self.any_cl()
    }

    /// Comma-separated names, e.g. `ml,cl_il`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ml {
            parts.push("ml");
        }
        if self.cl_il {
            parts.push("cl_il");
        }
        if self.cl_rl {
            parts.push("cl_rl");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }

    /// Every non-empty combination, full model first.
    pub fn grid() -> Vec<Switches> {
        let mut out = Vec::new();
        for bits in (1..8u8).rev() {
            out.push(Switches { ml: bits & 4 != 0, cl_il: bits & 2 != 0, cl_rl: bits & 1 != 0 });
        }
        out
    }
}

impl std::str::FromStr for Switches {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut out = Switches { ml: false, cl_il: false, cl_rl: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "ml" => out.ml = true,
                "cl_il" => out.cl_il = true,
                "cl_rl" => out.cl_rl = true,
                "all" | "full" => out = Switches::ALL,
                other => return Err(format!("unknown switch `{other}` (expected ml, cl_il, cl_rl)")),
            }
        }
        if !out.any() {
            return Err("at least one switch must be on".into());
        }
        Ok(out)
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(ObjectiveError::InvalidDistribution(total));
    }
    Ok(())
}

/// `sum_t -log p_t(a*_t)` from per-step log-probability rows.
pub fn il_loss(tape: &mut Tape, log_probs: &[DiffTensor], teacher: &[usize]) -> Result<DiffTensor> {
    if log_probs.len() != teacher.len() {
        return Err(ObjectiveError::LengthMismatch(log_probs.len(), teacher.len()));
    }
    if log_probs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut picked = Vec::with_capacity(teacher.len());
    for (&lp, &a) in log_probs.iter().zip(teacher) {
        let probs: Vec<f64> = tape.value(lp).iter().map(|x| x.exp()).collect();
        check_distribution(&probs)?;
        if a >= lp.cols() {
            return Err(ObjectiveError::DimensionMismatch(a, lp.cols()));
        }
        picked.push(tape.slice(lp, 0, a, 1, 1)?);
    }
    let all = tape.concat(&picked)?;
    let total = tape.sum(all)?;
    Ok(tape.scale(total, -1.0)?)
}

/// `r + gamma (1 - d) (min_target_q - alpha log pi(a'|o'))`.
pub fn sac_target(reward: f64, done: bool, next_logprob: f64, min_target_q: f64, weights: &LossWeights) -> Result<f64> {
    if !reward.is_finite() || !min_target_q.is_finite() || next_logprob.is_nan() {
        return Err(ObjectiveError::NonFiniteValue("sac_target"));
    }
    if done {
        return Ok(reward);
    }
    Ok(reward + weights.gamma * (min_target_q - weights.alpha * next_logprob))
}

/// Expectation of [`sac_target`] over a discrete next-action distribution.
/// Actions with zero probability are skipped.
pub fn expected_sac_target(
    reward: f64,
    done: bool,
    next_probs: &[f64],
    min_target_q: &[f64],
    weights: &LossWeights,
) -> Result<f64> {
    if next_probs.len() != min_target_q.len() {
        return Err(ObjectiveError::LengthMismatch(next_probs.len(), min_target_q.len()));
    }
    if done {
        return sac_target(reward, true, 0.0, 0.0, weights);
    }
    check_distribution(next_probs)?;
    let mut total = 0.0;
    for (p, q) in next_probs.iter().zip(min_target_q) {
        if *p > 0.0 {
            total += p * sac_target(reward, false, p.ln(), *q, weights)?;
        }
    }
    Ok(total)
}

/// Mean squared error of `q_values` (`[1, n]`) against constant targets.
pub fn critic_loss(tape: &mut Tape, q_values: DiffTensor, targets: &[f64]) -> Result<DiffTensor> {
    if targets.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if q_values.len() != targets.len() {
        return Err(ObjectiveError::LengthMismatch(q_values.len(), targets.len()));
    }
    let t = tape.constant(q_values.rows(), q_values.cols(), targets.to_vec())?;
    let d = tape.sub(q_values, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// `sum_a pi(a) (alpha log pi(a) - Q(a))` with `pi = softmax(logits)` and
/// constant `Q`; the negated soft policy objective.
pub fn actor_loss(tape: &mut Tape, logits: DiffTensor, q_values: &[f64], alpha: f64) -> Result<DiffTensor> {
    if logits.cols() != q_values.len() || logits.rows() != 1 {
        return Err(ObjectiveError::DimensionMismatch(logits.cols(), q_values.len()));
    }
    let probs = tape.softmax(logits)?;
    let q = tape.row(q_values)?;
    let pq = tape.mul(probs, q)?;
    let value = tape.sum(pq)?;
    let neg_h = tape.xlogx(probs)?;
    let neg_h = tape.sum(neg_h)?;
    let ent = tape.scale(neg_h, alpha)?;
    Ok(tape.sub(ent, value)?)
}

/// `-log softmax([q W k+, q W k_0, ...])[0]` for query `[1,p]`, positive
/// key `[1,p]`, negatives `[K,p]` (or none) and bilinear `W` `[p,p]`.
pub fn info_nce(
    tape: &mut Tape,
    query: DiffTensor,
    positive: DiffTensor,
    negatives: Option<DiffTensor>,
    w: DiffTensor,
) -> Result<DiffTensor> {
    let p = query.cols();
    for t in [positive, w] {
        if t.cols() != p {
            return Err(ObjectiveError::DimensionMismatch(p, t.cols()));
        }
    }
    if w.rows() != p {
        return Err(ObjectiveError::DimensionMismatch(p, w.rows()));
    }
    let keys = match negatives {
        Some(n) => {
            if n.cols() != p {
                return Err(ObjectiveError::DimensionMismatch(p, n.cols()));
            }
            tape.concat_rows(&[positive, n])?
        }
        None => positive,
    };
    let qw = tape.matmul(query, w)?;
    let logits = tape.matmul_nt(qw, keys)?;
    let lsm = tape.log_softmax(logits)?;
    let first = tape.slice(lsm, 0, 0, 1, 1)?;
    Ok(tape.scale(first, -1.0)?)
}

/// `l_rl + lambda_ml * l_il`.
pub fn ml_aggregate(tape: &mut Tape, l_rl: DiffTensor, l_il: DiffTensor, weights: &LossWeights) -> Result<DiffTensor> {
    let il = tape.scale(l_il, weights.lambda_ml)?;
    Ok(tape.add(l_rl, il)?)
}

/// Sum of the enabled terms; a term is dropped from the graph (not scaled
/// by zero) when its switch is off or it is absent.
pub fn train_objective(
    tape: &mut Tape,
    l_ml: Option<DiffTensor>,
    l_cl_il: Option<DiffTensor>,
    l_cl_rl: Option<DiffTensor>,
    weights: &LossWeights,
    switches: Switches,
) -> Result<Option<DiffTensor>> {
    let mut terms = Vec::new();
    if let (true, Some(t)) = (switches.ml, l_ml) {
        terms.push(t);
    }
    if let (true, Some(t)) = (switches.cl_il, l_cl_il) {
        terms.push(tape.scale(t, weights.lambda_cl_il)?);
    }
    if let (true, Some(t)) = (switches.cl_rl, l_cl_rl) {
        terms.push(tape.scale(t, weights.lambda_cl_rl)?);
    }
    let mut it = terms.into_iter();
    let Some(mut total) = it.next() else { return Ok(None) };
    for t in it {
        total = tape.add(total, t)?;
    }
    Ok(Some(total))
}

/// `-sum p ln p` of a `[1, n]` probability row, with `0 ln 0 = 0`.
pub fn entropy(tape: &mut Tape, probs: DiffTensor) -> Result<DiffTensor> {
    check_distribution(tape.value(probs))?;
    let t = tape.xlogx(probs)?;
    let s = tape.sum(t)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Mean entropy over a batch of predictions.
pub fn tta_objective(tape: &mut Tape, probs: &[DiffTensor]) -> Result<DiffTensor> {
    if probs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut total = entropy(tape, probs[0])?;
    for p in &probs[1..] {
        let h = entropy(tape, *p)?;
        total = tape.add(total, h)?;
    }
    Ok(tape.scale(total, 1.0 / probs.len() as f64)?)
}

/// Plain entropy of a probability vector.
pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Reward of one transition: progress in geodesic distance for moves,
/// `+success_bonus` / `-success_bonus` for stopping inside / outside the
/// success radius.
pub fn step_reward(dist_before: f64, dist_after: f64, stopped: bool, radius: f64, success_bonus: f64) -> f64 {
    if stopped {
        if dist_after <= radius {
            success_bonus
        } else {
            -success_bonus
        }
    } else {
        dist_before - dist_after
    }
}
