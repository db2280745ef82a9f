//! Efficiency accounting for one search.
//!
//! The KV proxy is sampled once per search step: after the policy has pruned
//! the tree and the retained leaves have been expanded, the live token total
//! of the tree is appended to `per_step_kv_tokens`. Reward and embedding
//! models are tracked as call counts only.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::serde_secs;
use crate::error::{invalid, Result};
use crate::tree::SearchTree;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub per_step_kv_tokens: Vec<u64>,
    pub cumulative_kv_tokens: u64,
    /// Tokens produced by the generator; proportional to generation FLOPs.
    pub generated_tokens: u64,
    /// Generation requests issued (one per expanded leaf per step).
    pub model_calls: u64,
    pub reward_calls: u64,
    pub embed_calls: u64,
    pub solves: u64,
    pub solves_nonoptimal: u64,
    /// Wall-clock breakdown. Kept out of result records so that they stay
    /// reproducible; written to a separate timing file instead.
    #[serde(skip)]
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    #[serde(with = "serde_secs")]
    pub generation: Duration,
    #[serde(with = "serde_secs")]
    pub reward: Duration,
    #[serde(with = "serde_secs")]
    pub embed: Duration,
    #[serde(with = "serde_secs")]
    pub cluster: Duration,
    #[serde(with = "serde_secs")]
    pub solver: Duration,
}

impl Timing {
    pub fn total(&self) -> Duration {
        self.generation + self.reward + self.embed + self.cluster + self.solver
    }

    pub fn add(&mut self, other: &Timing) {
        self.generation += other.generation;
        self.reward += other.reward;
        self.embed += other.embed;
        self.cluster += other.cluster;
        self.solver += other.solver;
    }
}

impl SearchMetrics {
    /// Sample the tree's KV footprint for the step just finished.
    pub fn record_step(&mut self, tree: &SearchTree, new_tokens: u64, calls: u64) {
        self.record_kv(tree.live_token_total(), new_tokens, calls);
    }

    /// As [`record_step`](Self::record_step) with an explicit KV sample.
    pub fn record_kv(&mut self, kv_tokens: u64, new_tokens: u64, calls: u64) {
        self.per_step_kv_tokens.push(kv_tokens);
        self.cumulative_kv_tokens += kv_tokens;
        self.generated_tokens += new_tokens;
        self.model_calls += calls;
    }

    pub fn steps(&self) -> usize {
        self.per_step_kv_tokens.len()
    }

    pub fn peak_kv_tokens(&self) -> u64 {
        self.per_step_kv_tokens.iter().copied().max().unwrap_or(0)
    }
}

/// Ratio of cumulative KV tokens, baseline over candidate.
pub fn kv_reduction(baseline: &SearchMetrics, candidate: &SearchMetrics) -> Result<f64> {
    ratio(
        baseline.cumulative_kv_tokens as f64,
        candidate.cumulative_kv_tokens as f64,
    )
}

pub(crate) fn ratio(baseline: f64, candidate: f64) -> Result<f64> {
    if candidate <= 0.0 {
        return Err(invalid("candidate has zero cumulative KV"));
    }
    Ok(baseline / candidate)
}

/// Share of measured time spent embedding, clustering and solving.
pub fn overhead_fraction(m: &SearchMetrics) -> f64 {
    timing_overhead(&m.timing)
}

pub fn timing_overhead(t: &Timing) -> f64 {
    let total = t.total().as_secs_f64();
    if total == 0.0 {
        return 0.0;
    }
    (t.solver + t.cluster + t.embed).as_secs_f64() / total
}
