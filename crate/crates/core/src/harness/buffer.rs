use std::collections::VecDeque;

use rand::Rng;

use super::batch::{Episode, EpisodeBatch};
use crate::error::{contract_err, Result};

/// FIFO store of whole episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return contract_err("buffer capacity must be at least 1");
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append, evicting the oldest episode when full.
    pub fn insert(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Uniform draw of `batch_size` stored indices, with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.episodes.is_empty() {
            return contract_err("cannot sample from an empty buffer");
        }
        Ok((0..batch_size).map(|_| rng.gen_range(0..self.episodes.len())).collect())
    }

    pub fn get(&self, index: usize) -> Option<&Episode> {
        self.episodes.get(index)
    }

    pub fn sample(&self, batch_size: usize, n_actions: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
        let idx = self.sample_indices(batch_size, rng)?;
        let eps: Vec<&Episode> = idx.iter().map(|&i| &self.episodes[i]).collect();
        EpisodeBatch::from_episodes(&eps, n_actions)
    }
}
