//! FIFO replay buffer and "final"-strategy hindsight relabeling.

use std::collections::VecDeque;

use rand::Rng as _;

use super::env::{compute_reward, RewardNorm};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Network features of the state (see `MdpState::features`).
    pub state: Vec<f32>,
    /// Normalized action in `[-1, 1]`.
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_state: Vec<f32>,
    /// True only when the episode ended by success; time-outs still bootstrap.
    pub done: bool,
    pub goal: Vec<f32>,
    /// Embedding of the next state.
    pub achieved: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.clamp(1, 1 << 16)),
        }
    }

    /// Append, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// `k` copies of every transition with the goal replaced by the episode's
/// final achieved embedding and the reward recomputed against it.
///
/// A relabeled transition is terminal when its achieved embedding lies within
/// `threshold` of the substituted goal.
pub fn her_final(episode: &[Transition], k: usize, norm: RewardNorm, threshold: f64) -> Result<Vec<Transition>> {
    let Some(last) = episode.last() else {
        return Ok(Vec::new());
    };
    let goal = last.achieved.clone();
    let mut out = Vec::with_capacity(episode.len() * k);
    for t in episode {
        let reward = compute_reward(&t.achieved, &goal, norm)?;
        let relabeled = Transition {
            reward: reward as f32,
            done: -reward <= threshold,
            goal: goal.clone(),
            ..t.clone()
        };
        out.extend(std::iter::repeat_n(relabeled, k));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tr(i: usize) -> Transition {
        Transition {
            state: vec![i as f32],
            action: vec![0.0],
            reward: -1.0,
            next_state: vec![i as f32 + 1.0],
            done: false,
            goal: vec![9.0, 9.0],
            achieved: vec![i as f32, 0.0],
        }
    }

    #[test]
    fn fifo_eviction_keeps_the_newest() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(tr(i));
        }
        assert_eq!(b.len(), 3);
        let kept: Vec<f32> = b.iter().map(|t| t.state[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn her_final_relabels_with_the_last_achieved_goal() {
        let ep: Vec<Transition> = (0..4).map(tr).collect();
        let out = her_final(&ep, 4, RewardNorm::L2, 0.0).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|t| t.goal == vec![3.0, 0.0]));
        assert!(out.iter().all(|t| t.reward <= 0.0));
        let last = &out[15];
        assert_eq!(last.reward, 0.0);
        assert!(last.done);
        assert_eq!(out[0].reward, -3.0);
        assert!(!out[0].done);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let mut b = ReplayBuffer::new(10);
        (0..10).for_each(|i| b.push(tr(i)));
        let a: Vec<f32> = b.sample(5, &mut substream(3, "s")).iter().map(|t| t.state[0]).collect();
        let c: Vec<f32> = b.sample(5, &mut substream(3, "s")).iter().map(|t| t.state[0]).collect();
        assert_eq!(a, c);
    }
}
