use serde::{Deserialize, Serialize};

use super::params::{GradSet, ParamId, ParamStore};
use super::{NumError, Result};

/// Adaptive-moment optimizer state with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Indexed by parameter id; empty for parameters never optimized.
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_betas(learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let ok = learning_rate > 0.0
            && learning_rate.is_finite()
            && (0.0..1.0).contains(&beta1)
            && beta1 > 0.0
            && (0.0..1.0).contains(&beta2)
            && beta2 > 0.0
            && epsilon > 0.0
            && epsilon < 1e-2;
        if !ok {
            return Err(NumError::InvalidArgument(format!(
                "invalid optimizer settings lr={learning_rate} beta1={beta1} beta2={beta2} eps={epsilon}"
            )));
        }
        Ok(Self {
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }
}

/// One bias-corrected Adam update of `ids`, consuming `grads`.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], grads: &mut GradSet, state: &mut OptimizerState) -> Result<()> {
    for id in ids {
        if grads.get(*id).is_none() {
            return Err(NumError::MissingGradient(store.get(*id).name.clone()));
        }
    }
    if state.first_moment.len() < store.len() {
        state.first_moment.resize(store.len(), Vec::new());
        state.second_moment.resize(store.len(), Vec::new());
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for id in ids {
        let g = grads.get(*id).expect("checked above");
        let param = store.get_mut(*id);
        let m = &mut state.first_moment[id.0];
        let v = &mut state.second_moment[id.0];
        if m.len() != param.len() {
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        for i in 0..param.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            param.values[i] -= state.learning_rate * mh / (vh.sqrt() + state.epsilon);
        }
    }
    grads.clear();
    Ok(())
}
