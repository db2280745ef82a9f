//! Reward-balanced continuation allocation.
//!
//! Leaves are visited from highest to lowest reward. Each takes the ceiling
//! of its softmax share of the budget still unassigned, where the softmax
//! runs over itself and the leaves not yet visited. The last leaf with any
//! budget left takes all of it, so the weights always sum to the budget.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tree::NodeId;

/// Slack applied before `ceil` so that shares like `2.0000000000000004`
/// produced by `exp` rounding do not round up to the next integer.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAllocation {
    /// `(leaf, continuations)` in allocation order: reward descending, id ascending.
    pub entries: Vec<(NodeId, u32)>,
    pub budget: u32,
    pub temperature: f64,
}

impl WeightAllocation {
    pub fn weight_of(&self, id: NodeId) -> Option<u32> {
        self.entries.iter().find(|(l, _)| *l == id).map(|&(_, w)| w)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, w)| u64::from(w)).sum()
    }

    /// Leaves that receive at least one continuation, in id order.
    pub fn support(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self
            .entries
            .iter()
            .filter(|&&(_, w)| w > 0)
            .map(|&(id, _)| id)
            .collect();
        ids.sort_unstable();
        ids
    }
}

/// Sort by reward descending, ties by ascending id.
pub(crate) fn reward_order(leaves: &[(NodeId, f64)]) -> Vec<(NodeId, f64)> {
    let mut sorted = leaves.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted
}

pub fn allocate(
    leaves: &[(NodeId, f64)],
    budget: u32,
    temperature: f64,
) -> Result<WeightAllocation> {
    if budget < 1 {
        return Err(invalid("budget must be at least 1"));
    }
    if leaves.is_empty() {
        return Err(invalid("no leaves to allocate over"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some((id, r)) = leaves.iter().find(|(_, r)| !r.is_finite()) {
        return Err(invalid(format!("reward of {id} is not finite: {r}")));
    }

    let sorted = reward_order(leaves);
    let n = sorted.len();

    // tail[i] = sum_{k >= i} exp((R_k - R_i) / T). R_i is the largest reward
    // of the tail, so every term is at most 1 and the sum is at least 1.
    let mut tail = vec![1.0f64; n];
    for i in (0..n.saturating_sub(1)).rev() {
        let step = ((sorted[i + 1].1 - sorted[i].1) / temperature).exp();
        tail[i] = 1.0 + step * tail[i + 1];
    }

    let mut remaining = budget;
    let mut entries = Vec::with_capacity(n);
    for (i, &(id, _)) in sorted.iter().enumerate() {
        let w = if remaining == 0 {
            0
        } else {
            let share = f64::from(remaining) / tail[i];
            let w = (share - CEIL_SLACK).ceil().max(0.0) as u32;
            w.min(remaining)
        };
        remaining -= w;
        entries.push((id, w));
    }
    debug_assert_eq!(remaining, 0);

    Ok(WeightAllocation {
        entries,
        budget,
        temperature,
    })
}

/// Same procedure as [`allocate`], applied to the leaves that survived pruning.
pub fn reallocate(
    retained: &[(NodeId, f64)],
    budget: u32,
    temperature: f64,
) -> Result<WeightAllocation> {
    allocate(retained, budget, temperature)
}
