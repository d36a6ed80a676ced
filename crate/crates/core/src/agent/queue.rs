use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numcore::NumError;

/// FIFO of unit-normalized key vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyQueue {
    capacity: usize,
    entries: VecDeque<Vec<f64>>,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Normalizes and appends `key`, evicting the oldest entry when full.
    pub fn push(&mut self, key: &[f64]) -> Result<(), NumError> {
        if !key.iter().all(|x| x.is_finite()) {
            return Err(NumError::NonFiniteValue { op: "enqueue_key" });
        }
        let norm = key.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(NumError::InvalidArgument("cannot enqueue a zero key".into()));
        }
        if let Some(first) = self.entries.front() {
            if first.len() != key.len() {
                return Err(NumError::ShapeMismatch { op: "enqueue_key", lhs: [1, first.len()], rhs: [1, key.len()] });
            }
        }
        self.entries.push_back(key.iter().map(|x| x / norm).collect());
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}
