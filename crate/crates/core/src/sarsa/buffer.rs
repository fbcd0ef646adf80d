use std::collections::VecDeque;

use rand::Rng;

use super::TransitionTuple;

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// Bounded FIFO of transition tuples with uniform sampling with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    tuples: VecDeque<TransitionTuple>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            tuples: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Appends a tuple, evicting the oldest one when full.
    pub fn push(&mut self, d: TransitionTuple) {
        if self.tuples.len() == self.capacity {
            self.tuples.pop_front();
        }
        self.tuples.push_back(d);
    }

    pub fn extend(&mut self, tuples: impl IntoIterator<Item = TransitionTuple>) {
        for d in tuples {
            self.push(d);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionTuple> {
        self.tuples.iter()
    }

    /// `n` draws, uniform with replacement. Empty when the buffer is empty.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&TransitionTuple> {
        if self.tuples.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.tuples[rng.gen_range(0..self.tuples.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{Action, UserId, UserState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tuple(k: u32) -> TransitionTuple {
        TransitionTuple::terminal(k, UserState::tabular(UserId(k as u64), 0), Action(1), 0).unwrap()
    }

    #[test]
    fn evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        b.extend((0..5).map(tuple));
        assert_eq!(b.len(), 3);
        let ts: Vec<u32> = b.iter().map(|d| d.t).collect();
        assert_eq!(ts, vec![2, 3, 4]);
    }

    #[test]
    fn sampling_is_roughly_uniform() {
        let mut b = ReplayBuffer::new(10);
        b.extend((0..4).map(tuple));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for d in b.sample(40_000, &mut rng) {
            counts[d.t as usize] += 1;
        }
        // binomial sd = sqrt(40000 * 0.25 * 0.75) ≈ 87
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 4.0 * 87.0, "{counts:?}");
        }
        assert!(ReplayBuffer::new(2).sample(5, &mut rng).is_empty());
    }
}
