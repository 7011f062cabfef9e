//! Prioritized transition replay on a sum tree, and the whole-trajectory
//! buffer of the risk-adjusted variant.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::state::AugmentedState;
use crate::error::{CoreError, Result};
use crate::greedy::GreedyProblem;

/// One experienced step with its one-step greedy expert action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: AugmentedState,
    pub action: Vec<f64>,
    /// Reward as stored, after any scaling.
    pub reward: f64,
    pub next: AugmentedState,
    pub expert: Vec<f64>,
    /// The greedy problem `expert` solves, kept for auditing.
    pub problem: GreedyProblem,
}

/// Binary tree whose internal nodes hold the sum of their leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    cap: usize,
    /// `nodes[1]` is the root; leaves start at `cap`.
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(cap: usize) -> Self {
        let cap = cap.max(1).next_power_of_two();
        Self {
            cap,
            nodes: vec![0.0; 2 * cap],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.cap + i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let mut k = self.cap + i;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`, for
    /// `0 <= mass < total`. Rounding never lands on a zero leaf.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut k = 1;
        while k < self.cap {
            let left = self.nodes[2 * k];
            if mass < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        k - self.cap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub beta0: f64,
    /// Added to `|TD|` so no priority is zero.
    pub eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            alpha: 0.6,
            beta0: 0.4,
            eps: 1e-6,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(CoreError::Config("replay capacity must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(0.0..=1.0).contains(&self.beta0) || !(self.eps > 0.0) {
            return Err(CoreError::Config("PER needs alpha >= 0, beta0 in [0, 1], eps > 0".into()));
        }
        Ok(())
    }

    /// Importance exponent annealed linearly from `beta0` to 1.
    pub fn beta(&self, step: usize, total: usize) -> f64 {
        let frac = if total == 0 { 1.0 } else { (step as f64 / total as f64).min(1.0) };
        self.beta0 + (1.0 - self.beta0) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSample {
    pub indices: Vec<usize>,
    /// `(size * P(i))^-beta`, divided by the batch maximum.
    pub weights: Vec<f64>,
}

/// FIFO ring of transitions sampled with probability `p_i^alpha / sum`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    cfg: PerConfig,
    items: Vec<Transition>,
    /// Raw priorities `|TD| + eps`, parallel to `items`.
    raw: Vec<f64>,
    next: usize,
    tree: SumTree,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(cfg: PerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            items: Vec::with_capacity(cfg.capacity),
            raw: Vec::with_capacity(cfg.capacity),
            next: 0,
            tree: SumTree::new(cfg.capacity),
            max_priority: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Raw priority `|TD| + eps` of slot `i`.
    pub fn priority(&self, i: usize) -> f64 {
        self.raw[i]
    }

    /// Sampling mass `p_i^alpha` of slot `i`.
    pub fn mass(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    /// Stores at the highest priority seen so far, evicting the oldest item
    /// when full. Returns the slot used.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = if self.items.len() < self.cfg.capacity {
            self.items.push(t);
            self.raw.push(self.max_priority);
            self.items.len() - 1
        } else {
            let s = self.next;
            self.items[s] = t;
            self.raw[s] = self.max_priority;
            s
        };
        self.next = (slot + 1) % self.cfg.capacity;
        self.tree.set(slot, self.max_priority.powf(self.cfg.alpha));
        slot
    }

    /// Draws `n` slots with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> Result<PerSample> {
        if self.items.is_empty() {
            return Err(CoreError::InsufficientData("replay buffer is empty".into()));
        }
        let total = self.tree.total();
        let size = self.items.len() as f64;
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.tree.find(rng.random::<f64>() * total).min(self.items.len() - 1);
            let p = self.tree.get(i) / total;
            indices.push(i);
            weights.push((size * p).powf(-beta));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        Ok(PerSample { indices, weights })
    }

    pub fn update_priorities(&mut self, indices: &[usize], td: &[f64]) -> Result<()> {
        if indices.len() != td.len() {
            return Err(CoreError::Invalid("one TD error per sampled index".into()));
        }
        for (&i, d) in indices.iter().zip(td) {
            if !d.is_finite() {
                return Err(CoreError::NonFinite("TD error"));
            }
            let p = d.abs() + self.cfg.eps;
            self.max_priority = self.max_priority.max(p);
            self.raw[i] = p;
            self.tree.set(i, p.powf(self.cfg.alpha));
        }
        Ok(())
    }
}

/// FIFO store of complete episodes.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    capacity: usize,
    items: VecDeque<Vec<Transition>>,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(CoreError::Config("trajectory capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &[Transition] {
        &self.items[i]
    }

    pub fn push(&mut self, trajectory: Vec<Transition>) -> Result<()> {
        if trajectory.is_empty() {
            return Err(CoreError::InsufficientData("empty trajectory".into()));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(trajectory);
        Ok(())
    }

    /// `k` trajectory indices drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(CoreError::InsufficientData("trajectory buffer is empty".into()));
        }
        Ok((0..k).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}
