//! Binary sum tree over leaf masses, for proportional sampling in O(log n).
//!
//! Leaves hold non-negative masses; every internal node holds the sum of
//! its children. Updates recompute sums along the leaf-to-root path (rather
//! than adding differences), so the root never drifts from the true total
//! by more than floating-point reassociation error.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::contract("sum tree capacity must be at least 1"));
        }
        Ok(SumTree {
            capacity,
            nodes: vec![0.0; 2 * capacity - 1],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn leaf_index(&self, slot: usize) -> usize {
        slot + self.capacity - 1
    }

    /// Sets the mass of one leaf and refreshes sums up to the root.
    pub fn set(&mut self, slot: usize, mass: f64) -> Result<()> {
        if slot >= self.capacity {
            return Err(Error::contract(format!(
                "slot {slot} out of range for capacity {}",
                self.capacity
            )));
        }
        if !mass.is_finite() || mass < 0.0 {
            return Err(Error::contract(format!(
                "leaf mass must be finite and non-negative, got {mass}"
            )));
        }
        let mut i = self.leaf_index(slot);
        self.nodes[i] = mass;
        while i > 0 {
            i = (i - 1) / 2;
            let left = self.nodes[2 * i + 1];
            let right = self
                .nodes
                .get(2 * i + 2)
                .copied()
                .unwrap_or(0.0);
            self.nodes[i] = left + right;
        }
        Ok(())
    }

    pub fn get(&self, slot: usize) -> f64 {
        self.nodes[self.leaf_index(slot)]
    }

    /// Total mass (value at the root).
    pub fn total(&self) -> f64 {
        self.nodes[0]
    }

    /// Finds the leaf whose cumulative mass interval contains `prefix`.
    ///
    /// `prefix` should lie in [0, total); values at or beyond the total are
    /// clamped inward so a boundary draw still lands on a massive leaf. The
    /// descent never enters an empty subtree, so zero-mass leaves are
    /// unreachable whenever the total is positive.
    pub fn find(&self, prefix: f64) -> Result<usize> {
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::contract("cannot sample from an empty sum tree"));
        }
        let mut p = prefix.clamp(0.0, total);
        let mut i = 0usize;
        while i < self.capacity - 1 {
            let left = 2 * i + 1;
            let right = 2 * i + 2;
            let left_mass = self.nodes[left];
            let right_mass = self.nodes.get(right).copied().unwrap_or(0.0);
            if (p < left_mass && left_mass > 0.0) || right_mass == 0.0 {
                i = left;
            } else {
                p -= left_mass;
                i = right;
            }
        }
        Ok(i - (self.capacity - 1))
    }
}
