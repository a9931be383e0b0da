use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};

/// Endless stream of mini-batches. Every epoch is a fresh seeded permutation
/// of the ids cut into disjoint batches; a trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    ids: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(ids: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if ids.is_empty() {
            return contract("cannot sample batches from an empty dataset");
        }
        if batch_size == 0 || batch_size > ids.len() {
            return contract(format!("batch size {batch_size} must lie in 1..={}", ids.len()));
        }
        Ok(Self { ids, batch_size, rng: ChaCha8Rng::seed_from_u64(seed), order: Vec::new(), cursor: 0, epoch: 0 })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ids.len() / self.batch_size
    }

    /// Epochs started so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order = self.ids.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        b
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_cases_two_batches_partition() {
        let mut s = BatchSampler::new((0..8).collect(), 4, 3).unwrap();
        let mut seen: Vec<usize> = s.next_batch();
        seen.extend(s.next_batch());
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 1);
        s.next_batch();
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<_> = BatchSampler::new((0..10).collect(), 3, 9).unwrap().take(7).collect();
        let b: Vec<_> = BatchSampler::new((0..10).collect(), 3, 9).unwrap().take(7).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn remainder_dropped() {
        let mut s = BatchSampler::new((0..10).collect(), 4, 1).unwrap();
        let first: Vec<_> = (0..2).flat_map(|_| s.next_batch()).collect();
        let mut uniq = first.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert_eq!(s.epoch(), 1);
        s.next_batch();
        assert_eq!(s.epoch(), 2);
    }

    #[test]
    fn invalid_inputs() {
        assert!(BatchSampler::new(vec![], 1, 0).is_err());
        assert!(BatchSampler::new(vec![1, 2], 3, 0).is_err());
        assert!(BatchSampler::new(vec![1, 2], 0, 0).is_err());
    }
}
