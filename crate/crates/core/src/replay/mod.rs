//! Proportional prioritized experience replay.
//!
//! Transitions are stored in a fixed-capacity ring; sampling probability is
//! proportional to priority^α via a [`sum_tree::SumTree`]. Batches are drawn
//! with stratified sampling (one uniform draw per equal slice of the total
//! mass) and come with importance weights (N · P(i))^−β, normalized by the
//! batch maximum. Priority updates are addressed by slot + generation, so
//! an update aimed at a transition that has since been overwritten is
//! skipped and counted instead of corrupting an unrelated entry.

pub mod sum_tree;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::net::HistoryWindow;
use sum_tree::SumTree;

/// One logged step, as seen by the learner.
#[derive(Debug, Clone)]
pub struct Transition {
    /// Observation history up to and including the decision point.
    pub window: HistoryWindow,
    /// Per-episode static features (shared, not copied per step).
    pub statics: Arc<Vec<f64>>,
    pub action: usize,
    pub reward: f64,
    /// History window after the step; `None` marks a terminal transition.
    pub next_window: Option<HistoryWindow>,
}

impl Transition {
    pub fn terminal(&self) -> bool {
        self.next_window.is_none()
    }
}

/// Stable address of a buffer slot at the time a batch was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotId {
    pub slot: usize,
    pub generation: u64,
}

/// A sampled batch with its importance weights.
#[derive(Debug, Clone)]
pub struct PrioritizedBatch {
    pub slots: Vec<SlotId>,
    pub transitions: Vec<Transition>,
    /// (N · P(i))^−β / max over the batch; equals 1 for every sample when
    /// priorities are uniform or β = 0.
    pub weights: Vec<f64>,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    tree: SumTree,
    raw_priority: Vec<f64>,
    generations: Vec<u64>,
    items: Vec<Option<Transition>>,
    next_slot: usize,
    size: usize,
    max_raw_seen: f64,
    stale_updates: u64,
    rng: ChaCha12Rng,
}

impl ReplayBuffer {
    /// `alpha` is the priority exponent (0 = uniform sampling).
    pub fn new(capacity: usize, alpha: f64, rng: ChaCha12Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("replay capacity must be at least 1"));
        }
        if !(0.0..=10.0).contains(&alpha) {
            return Err(Error::contract(format!(
                "priority exponent alpha must be in [0, 10], got {alpha}"
            )));
        }
        Ok(ReplayBuffer {
            capacity,
            alpha,
            tree: SumTree::new(capacity)?,
            raw_priority: vec![0.0; capacity],
            generations: vec![0; capacity],
            items: (0..capacity).map(|_| None).collect(),
            next_slot: 0,
            size: 0,
            max_raw_seen: 1.0,
            stale_updates: 0,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of priority updates that were skipped because their target
    /// had been overwritten.
    pub fn stale_update_count(&self) -> u64 {
        self.stale_updates
    }

    /// Total priority mass (Σ priority^α).
    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    /// Priority mass of one slot (test and diagnostics access).
    pub fn slot_mass(&self, slot: usize) -> f64 {
        self.tree.get(slot)
    }

    pub fn slot_priority(&self, slot: usize) -> f64 {
        self.raw_priority[slot]
    }

    /// Inserts a transition with the maximum priority seen so far (at least
    /// 1.0), overwriting the oldest slot once full.
    pub fn push(&mut self, t: Transition) -> SlotId {
        let slot = self.next_slot;
        self.next_slot = (self.next_slot + 1) % self.capacity;
        if self.items[slot].is_none() {
            self.size += 1;
        }
        self.generations[slot] += 1;
        let priority = self.max_raw_seen.max(1.0);
        self.items[slot] = Some(t);
        self.raw_priority[slot] = priority;
        self.tree
            .set(slot, priority.powf(self.alpha))
            .expect("slot index and priority are validated");
        SlotId {
            slot,
            generation: self.generations[slot],
        }
    }

    /// Draws a stratified batch: the total mass is divided into
    /// `batch_size` equal segments and one uniform point is drawn in each.
    pub fn sample(&mut self, batch_size: usize, beta: f64) -> Result<PrioritizedBatch> {
        if batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if self.is_empty() {
            return Err(Error::contract("cannot sample from an empty replay buffer"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::contract(format!(
                "importance exponent beta must be in [0, 1], got {beta}"
            )));
        }
        let total = self.tree.total();
        if total <= 0.0 {
            return Err(Error::contract(
                "replay buffer has zero total priority mass",
            ));
        }

        let segment = total / batch_size as f64;
        let n = self.size as f64;
        let mut slots = Vec::with_capacity(batch_size);
        let mut transitions = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let lo = segment * i as f64;
            let u = lo + self.rng.gen::<f64>() * segment;
            let slot = self.tree.find(u)?;
            let item = self.items[slot].as_ref().ok_or_else(|| {
                Error::contract(format!("sampled slot {slot} holds no transition"))
            })?;
            let p = self.tree.get(slot) / total;
            weights.push((n * p).powf(-beta));
            slots.push(SlotId {
                slot,
                generation: self.generations[slot],
            });
            transitions.push(item.clone());
        }
        let max_w = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(PrioritizedBatch {
            slots,
            transitions,
            weights,
        })
    }

    /// Reassigns priorities for a previously sampled batch. Returns how
    /// many updates were skipped as stale. Priorities must be finite and
    /// non-negative (the caller supplies |δ| + ε).
    pub fn update_priorities(&mut self, slots: &[SlotId], priorities: &[f64]) -> Result<usize> {
        if slots.len() != priorities.len() {
            return Err(Error::contract(format!(
                "{} slots but {} priorities",
                slots.len(),
                priorities.len()
            )));
        }
        let mut stale = 0usize;
        for (id, &p) in slots.iter().zip(priorities) {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::contract(format!(
                    "priority must be finite and non-negative, got {p}"
                )));
            }
            if id.slot >= self.capacity
                || self.items[id.slot].is_none()
                || self.generations[id.slot] != id.generation
            {
                stale += 1;
                continue;
            }
            self.raw_priority[id.slot] = p;
            self.tree.set(id.slot, p.powf(self.alpha))?;
            if p > self.max_raw_seen {
                self.max_raw_seen = p;
            }
        }
        self.stale_updates += stale as u64;
        Ok(stale)
    }
}
