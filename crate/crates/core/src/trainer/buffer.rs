use std::collections::VecDeque;

use rand::seq::index::sample;

use super::{Result, TrainError};
use crate::rng::Rng;

/// One transition. Observations are critic inputs (decoder state and
/// action distribution), detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayTuple {
    pub o: Vec<f64>,
    pub a: usize,
    pub o_next: Vec<f64>,
    /// Policy at `o_next` when the tuple was collected.
    pub next_probs: Vec<f64>,
    pub r: f64,
    /// Episode ended with this transition.
    pub d: bool,
}

/// Ring buffer of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<ReplayTuple>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, storage: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: ReplayTuple) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayTuple> {
        self.storage.iter()
    }

    /// Uniform draw of `n` distinct tuples.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<&ReplayTuple>> {
        if n > self.storage.len() || n == 0 {
            return Err(TrainError::InsufficientSamples { have: self.storage.len(), want: n });
        }
        Ok(sample(rng, self.storage.len(), n).into_iter().map(|i| &self.storage[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tuple(a: usize) -> ReplayTuple {
        ReplayTuple { o: vec![0.0], a, o_next: vec![0.0], next_probs: vec![1.0], r: 0.0, d: false }
    }

    #[test]
    fn oldest_is_evicted() {
        let mut b = ReplayBuffer::new(2);
        for a in 0..3 {
            b.push(tuple(a));
        }
        let actions: Vec<usize> = b.iter().map(|t| t.a).collect();
        assert_eq!(actions, vec![1, 2]);
    }

    #[test]
    fn full_sample_is_whole_buffer() {
        let mut b = ReplayBuffer::new(5);
        for a in 0..5 {
            b.push(tuple(a));
        }
        let mut got: Vec<usize> = b.sample(5, &mut rng::stream(0, "t")).unwrap().iter().map(|t| t.a).collect();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        assert!(matches!(b.sample(6, &mut rng::stream(0, "t")), Err(TrainError::InsufficientSamples { .. })));
    }
}
