//! Ancestor-only additive attention masks.
//!
//! A [`TreeMask`] has one row per speculative slot and `L + S` columns: the
//! `L` committed prefix positions followed by the `S` speculative slots.
//! Entries are `0` (visible) or [`Real::mask_neg`] (blocked). The mask is a
//! single 2D matrix shared by every head.

use crate::real::Real;
use crate::tree::{AncestorTable, SpecTree};

#[derive(Debug, Clone, PartialEq)]
pub struct TreeMask<T> {
    slots: usize,
    prefix_len: usize,
    data: Vec<T>,
}

impl<T: Real> TreeMask<T> {
    /// Every entry blocked.
    pub fn blocked(prefix_len: usize, slots: usize) -> Self {
        Self {
            slots,
            prefix_len,
            data: vec![T::mask_neg(); slots * (prefix_len + slots)],
        }
    }

    /// Full prefix visibility plus a lower-triangular block over the slots.
    pub fn causal(prefix_len: usize, slots: usize) -> Self {
        let mut m = Self::blocked(prefix_len, slots);
        for k in 0..slots {
            for j in 0..prefix_len + k + 1 {
                m.allow(k, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.slots
    }

    pub fn cols(&self) -> usize {
        self.prefix_len + self.slots
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn row(&self, k: usize) -> &[T] {
        let c = self.cols();
        &self.data[k * c..(k + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == T::zero()
    }

    pub fn allow(&mut self, row: usize, col: usize) {
        let c = self.cols();
        self.data[row * c + col] = T::zero();
    }

    pub fn block(&mut self, row: usize, col: usize) {
        let c = self.cols();
        self.data[row * c + col] = T::mask_neg();
    }

    /// Whether speculative slot `k` may see speculative slot `j`.
    pub fn allows_slot(&self, k: usize, j: usize) -> bool {
        self.allows(k, self.prefix_len + j)
    }

    pub fn zero_count(&self) -> usize {
        self.data.iter().filter(|&&x| x == T::zero()).count()
    }
}

/// Mask from the ancestor table: slot `k` sees the prefix and each
/// `anc[l][k]` for `l ≤ depth[k]`; invalid slots see nothing and are seen by
/// nothing.
pub fn build_tree_mask<T: Real>(tree: &SpecTree, anc: &AncestorTable, prefix_len: usize) -> TreeMask<T> {
    let slots = tree.slot_count();
    let mut mask = TreeMask::blocked(prefix_len, slots);
    for k in (0..slots).filter(|&k| tree.valid[k]) {
        for j in 0..prefix_len {
            mask.allow(k, j);
        }
        for level in 0..=tree.depth[k].min(anc.max_depth) {
            let j = anc.get(level, k);
            if tree.valid[j] {
                mask.allow(k, prefix_len + j);
            }
        }
    }
    mask
}

/// Reference mask built by walking parent pointers for every pair.
pub fn brute_force_mask<T: Real>(tree: &SpecTree, prefix_len: usize) -> TreeMask<T> {
    let slots = tree.slot_count();
    let mut mask = TreeMask::blocked(prefix_len, slots);
    for k in 0..slots {
        if !tree.valid[k] {
            continue;
        }
        for j in 0..prefix_len {
            mask.allow(k, j);
        }
        for j in 0..slots {
            if tree.valid[j] && tree.is_ancestor(j, k) {
                mask.allow(k, prefix_len + j);
            }
        }
    }
    mask
}
