//! Teacher: Thompson-sampling task curriculum driven by per-task reward
//! buffers of recent ΔAUC observations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Reward drawn for a task whose buffer is still empty. Optimism makes
/// every task get sampled early on.
pub const OPTIMISTIC_REWARD: f64 = 1.0;

/// Ring buffer of the most recent rewards of one task, plus the last
/// observation used to turn the next observation into a reward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardBuffer {
    rewards: VecDeque<f64>,
    capacity: usize,
    last_observation: Option<f64>,
}

impl RewardBuffer {
    pub fn new(capacity: usize) -> Self {
        RewardBuffer { rewards: VecDeque::new(), capacity: capacity.max(1), last_observation: None }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.rewards.iter().copied()
    }

    /// Records a raw reward, evicting the oldest entry beyond capacity.
    pub fn push_reward(&mut self, reward: f64) {
        if self.rewards.len() == self.capacity {
            self.rewards.pop_front();
        }
        self.rewards.push_back(reward);
    }

    /// Records an observation `O` (a ΔAUC). The reward is the change
    /// against the previous observation; the very first observation is
    /// its own reward. Returns the recorded reward.
    pub fn observe(&mut self, observation: f64) -> f64 {
        let reward = match self.last_observation {
            Some(prev) => observation - prev,
            None => observation,
        };
        self.push_reward(reward);
        self.last_observation = Some(observation);
        reward
    }

    /// One Thompson draw: a uniformly sampled stored reward, or the
    /// optimistic constant while the buffer is empty.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.rewards.is_empty() {
            OPTIMISTIC_REWARD
        } else {
            self.rewards[rng.gen_range(0..self.rewards.len())]
        }
    }
}

/// Buffers of all tasks plus the meta-iteration bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurriculumState {
    buffers: Vec<RewardBuffer>,
}

impl CurriculumState {
    pub fn new(tasks: usize, capacity: usize) -> Self {
        CurriculumState { buffers: (0..tasks).map(|_| RewardBuffer::new(capacity)).collect() }
    }

    pub fn tasks(&self) -> usize {
        self.buffers.len()
    }

    pub fn buffer(&self, task: usize) -> &RewardBuffer {
        &self.buffers[task]
    }

    pub fn buffer_mut(&mut self, task: usize) -> &mut RewardBuffer {
        &mut self.buffers[task]
    }

    /// One slot: draw once from every task's buffer (in task order) and
    /// keep the task with the largest absolute draw, ties broken
    /// uniformly at random.
    pub fn sample_slot<R: Rng>(&self, rng: &mut R) -> usize {
        let draws: Vec<f64> = self.buffers.iter().map(|b| b.draw(rng)).collect();
        let best = draws.iter().map(|d| d.abs()).fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..draws.len()).filter(|&i| draws[i].abs() == best).collect();
        tied[rng.gen_range(0..tied.len())]
    }

    /// A meta-batch worth of task selections, sampled with replacement.
    pub fn sample_slots<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        (0..count).map(|_| self.sample_slot(rng)).collect()
    }
}
