//! FIFO replay buffer of `(s_prev, a_prev, r, s)` transitions.

use std::collections::VecDeque;

use rand::Rng;

use crate::envs::{Action, EnvState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Training phase during which a transition was collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Warmup,
    Dual,
}

impl Phase {
    pub fn code(self) -> u8 {
        match self {
            Phase::Warmup => 0,
            Phase::Dual => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Phase::Warmup),
            1 => Some(Phase::Dual),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub s_prev: EnvState<T>,
    pub a_prev: Action<T>,
    /// Reward observed on arriving at `s`.
    pub r: T,
    pub s: EnvState<T>,
    /// `s` ended its episode.
    pub terminal: bool,
    pub episode_id: u64,
    pub phase: Phase,
}

impl<T: Scalar> Transition<T> {
    pub fn validate(&self) -> Result<()> {
        if self.s_prev.kind != self.s.kind || self.s_prev.dim() != self.s.dim() {
            return Err(Error::InvalidArgument("transition states have different layouts".into()));
        }
        if !self.r.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite reward {}", self.r)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<Transition<T>>,
    pushed: u64,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            pushed: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of pushes over the buffer's lifetime, including evicted items.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, transition: Transition<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
        self.pushed += 1;
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Retained transitions, oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Transition<T>> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        self.items.get(i)
    }

    /// `n` uniform draws with replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition<T>>> {
        if self.items.is_empty() {
            return Err(Error::Precondition("cannot sample from an empty replay buffer".into()));
        }
        let len = self.items.len();
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..len)]).collect())
    }

    pub(crate) fn from_parts(capacity: usize, items: Vec<Transition<T>>, pushed: u64) -> Result<Self> {
        if capacity == 0 || items.len() > capacity {
            return Err(Error::Format(format!(
                "buffer holds {} items but capacity is {capacity}",
                items.len()
            )));
        }
        Ok(Self {
            capacity,
            items: items.into(),
            pushed,
        })
    }
}
