use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Physical nodes behind the job: the roster maps each cluster slot to a
/// node; spares wait idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePool {
    pub roster: Vec<usize>,
    pub spares: BTreeSet<usize>,
    pub evicted: Vec<usize>,
    /// Nodes that failed health checks and are unusable until repaired.
    pub quarantined: BTreeSet<usize>,
}

impl NodePool {
    /// Fills `need` slots from healthy nodes in id order; the remaining
    /// healthy nodes become spares.
    pub fn allocate(total_nodes: usize, need: usize, healthy: impl Fn(usize) -> bool) -> Result<Self> {
        let (ok, bad): (Vec<usize>, Vec<usize>) = (0..total_nodes).partition(|&n| healthy(n));
        if ok.len() < need {
            return Err(Error::Shortage { need, have: ok.len(), deficit: need - ok.len() });
        }
        Ok(NodePool {
            roster: ok[..need].to_vec(),
            spares: ok[need..].iter().copied().collect(),
            evicted: Vec::new(),
            quarantined: bad.into_iter().collect(),
        })
    }

    pub fn slot_of(&self, node: usize) -> Option<usize> {
        self.roster.iter().position(|&n| n == node)
    }

    pub fn contains(&self, node: usize) -> bool {
        self.slot_of(node).is_some()
    }

    pub fn is_spare(&self, node: usize) -> bool {
        self.spares.contains(&node)
    }

    /// Lowest-numbered spare not in `exclude`.
    pub fn next_spare(&self, exclude: &BTreeSet<usize>) -> Option<usize> {
        self.spares.iter().copied().find(|n| !exclude.contains(n))
    }

    /// Puts spare `replacement` into the slot held by `node`.
    pub fn swap(&mut self, node: usize, replacement: usize) -> Result<usize> {
        let slot = self.slot_of(node).ok_or(Error::UnknownNode(node))?;
        if !self.spares.remove(&replacement) {
            return Err(Error::UnknownNode(replacement));
        }
        self.roster[slot] = replacement;
        self.evicted.push(node);
        Ok(slot)
    }

    pub fn quarantine_spare(&mut self, node: usize) {
        if self.spares.remove(&node) {
            self.quarantined.insert(node);
        }
    }

    /// A repaired node returns as a spare.
    pub fn return_repaired(&mut self, node: usize) {
        if !self.contains(node) {
            self.quarantined.remove(&node);
            self.spares.insert(node);
        }
    }
}
