//! Per-step selection policies: beam search, DVTS, REBASE and ETS.
//!
//! Every policy turns the scored active leaves into a [`WeightAllocation`]
//! whose weights sum to the current search width. Leaves left with weight
//! zero are pruned from the tree by the engine.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::Embedder;
use crate::clock::Stopwatch;
use crate::error::{invalid, Error, Result};
use crate::metrics::Timing;
use crate::pruner::{self, CoverageMode, PruneDecision, PruneInstance, SolveLimits};
use crate::rebase::{self, reward_order, WeightAllocation};
use crate::semantics::{agglomerative_cluster, embed_last_steps, ClusterAssignment};
use crate::tree::{NodeId, SearchTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Beam,
    Dvts,
    Rebase,
    Ets,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Beam => "beam",
            Method::Dvts => "dvts",
            Method::Rebase => "rebase",
            Method::Ets => "ets",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beam" => Ok(Method::Beam),
            "dvts" => Ok(Method::Dvts),
            "rebase" => Ok(Method::Rebase),
            "ets" => Ok(Method::Ets),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Trajectories kept per step by beam search, or subtrees for DVTS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeepK {
    Fixed(u32),
    /// `round(sqrt(width))`
    Sqrt,
}

impl KeepK {
    pub fn resolve(self, width: u32) -> u32 {
        match self {
            KeepK::Fixed(k) => k,
            KeepK::Sqrt => ((f64::from(width)).sqrt().round() as u32).max(1),
        }
    }
}

impl fmt::Display for KeepK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeepK::Fixed(k) => write!(f, "{k}"),
            KeepK::Sqrt => f.write_str("sqrt"),
        }
    }
}

impl FromStr for KeepK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "sqrt" {
            return Ok(KeepK::Sqrt);
        }
        s.parse::<u32>().map(KeepK::Fixed).map_err(|_| {
            invalid(format!(
                "keep_k must be a positive integer or \"sqrt\", got {s:?}"
            ))
        })
    }
}

impl Serialize for KeepK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KeepK::Fixed(k) => s.serialize_u32(*k),
            KeepK::Sqrt => s.serialize_str("sqrt"),
        }
    }
}

impl<'de> Deserialize<'de> for KeepK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u32),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(KeepK::Fixed(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub method: Method,
    pub width: u32,
    pub keep_k: KeepK,
    pub rebase_temperature: f64,
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub cluster_threshold: f64,
    pub sampling_temperature: f64,
    pub coverage: CoverageMode,
    pub solver_time_budget_ms: u64,
    /// Branch-and-bound node cap; keeps truncated solves reproducible.
    pub solver_node_limit: Option<u64>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            method: Method::Ets,
            width: 64,
            keep_k: KeepK::Fixed(4),
            rebase_temperature: 0.2,
            lambda_b: 1.0,
            lambda_d: 1.0,
            cluster_threshold: 0.3,
            sampling_temperature: 1.0,
            coverage: CoverageMode::Any,
            solver_time_budget_ms: 250,
            solver_node_limit: Some(25_000),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 {
            return Err(invalid("policy.width must be at least 1"));
        }
        let keep = self.keep_k.resolve(self.width);
        if keep < 1 || keep > self.width {
            return Err(invalid(format!(
                "policy.keep_k resolves to {keep}, outside [1, {}]",
                self.width
            )));
        }
        for (name, v) in [
            ("rebase_temperature", self.rebase_temperature),
            ("cluster_threshold", self.cluster_threshold),
            ("sampling_temperature", self.sampling_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("policy.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_b", self.lambda_b), ("lambda_d", self.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "policy.{name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn keep(&self) -> u32 {
        self.keep_k.resolve(self.width)
    }

    pub fn solve_limits(&self) -> SolveLimits {
        SolveLimits {
            time_budget: Duration::from_millis(self.solver_time_budget_ms),
            node_limit: self.solver_node_limit,
        }
    }
}

/// Keep the `keep` best leaves and split `budget` evenly between them, the
/// remainder going one apiece to the best of them.
pub fn beam_select(leaves: &[(NodeId, f64)], keep: u32, budget: u32) -> Result<WeightAllocation> {
    if leaves.is_empty() {
        return Err(invalid("no leaves to select from"));
    }
    if keep < 1 || budget < 1 {
        return Err(invalid("keep and budget must be at least 1"));
    }
    let sorted = reward_order(leaves);
    let kept = (keep.min(budget) as usize).min(sorted.len());
    let base = budget / kept as u32;
    let extra = budget as usize % kept;
    let entries = sorted
        .iter()
        .enumerate()
        .map(|(rank, &(id, _))| {
            let w = if rank < kept {
                base + u32::from(rank < extra)
            } else {
                0
            };
            (id, w)
        })
        .collect();
    Ok(WeightAllocation {
        entries,
        budget,
        temperature: 0.0,
    })
}

/// Move the budget of subtrees without active leaves to the others, evenly,
/// remainder to the lowest subtree index.
pub fn rebalance_subtree_budgets(budgets: &mut [u32], has_leaves: &[bool]) {
    let live: Vec<usize> = (0..budgets.len()).filter(|&m| has_leaves[m]).collect();
    if live.is_empty() {
        return;
    }
    let freed: u32 = (0..budgets.len())
        .filter(|&m| !has_leaves[m])
        .map(|m| std::mem::take(&mut budgets[m]))
        .sum();
    let share = freed / live.len() as u32;
    let extra = (freed % live.len() as u32) as usize;
    for (rank, &m) in live.iter().enumerate() {
        budgets[m] += share + u32::from(rank < extra);
    }
}

/// Beam search with one survivor inside each subtree. `leaves` carry their
/// subtree index; `budgets` holds each subtree's width and is rebalanced in
/// place when a subtree has run out of active leaves.
pub fn dvts_select(
    leaves: &[(NodeId, f64, Option<usize>)],
    budgets: &mut [u32],
) -> Result<WeightAllocation> {
    if leaves.is_empty() {
        return Err(invalid("no leaves to select from"));
    }
    let m = budgets.len();
    let mut groups: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); m];
    for &(id, r, tag) in leaves {
        let tag = tag.ok_or_else(|| invalid(format!("leaf {id} has no subtree tag")))?;
        if tag >= m {
            return Err(invalid(format!(
                "leaf {id} tagged with subtree {tag} of {m}"
            )));
        }
        groups[tag].push((id, r));
    }
    let has_leaves: Vec<bool> = groups.iter().map(|g| !g.is_empty()).collect();
    rebalance_subtree_budgets(budgets, &has_leaves);

    let mut entries = Vec::with_capacity(leaves.len());
    for (group, &budget) in groups.iter().zip(budgets.iter()) {
        if group.is_empty() {
            continue;
        }
        if budget == 0 {
            entries.extend(group.iter().map(|&(id, _)| (id, 0)));
        } else {
            entries.extend(beam_select(group, 1, budget)?.entries);
        }
    }
    Ok(WeightAllocation {
        entries,
        budget: budgets.iter().sum(),
        temperature: 0.0,
    })
}

pub fn rebase_select(
    leaves: &[(NodeId, f64)],
    budget: u32,
    temperature: f64,
) -> Result<WeightAllocation> {
    rebase::allocate(leaves, budget, temperature)
}

#[derive(Debug, Clone)]
pub struct EtsOutcome {
    pub decision: PruneDecision,
    pub allocation: WeightAllocation,
    pub clusters: ClusterAssignment,
    pub timing: Timing,
    pub embed_calls: u64,
}

/// A scored candidate leaf and the text of its last step.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: NodeId,
    pub reward: f64,
    pub step_text: String,
}

/// REBASE weights, semantic clustering of last steps, ILP pruning and
/// reallocation of the budget over the retained leaves.
pub fn ets_select(
    tree: &SearchTree,
    leaves: &[Candidate],
    cfg: &PolicyConfig,
    budget: u32,
    embedder: &dyn Embedder,
) -> Result<EtsOutcome> {
    if leaves.is_empty() {
        return Err(invalid("no leaves to select from"));
    }
    let scored: Vec<(NodeId, f64)> = leaves.iter().map(|c| (c.id, c.reward)).collect();
    let initial = rebase::allocate(&scored, budget, cfg.rebase_temperature)?;
    let mut timing = Timing::default();
    let mut embed_calls = 0;

    // Coverage only matters with a positive coverage weight.
    let clusters = if cfg.lambda_d > 0.0 && leaves.len() > 1 {
        let watch = Stopwatch::start();
        let texts: Vec<(NodeId, String)> =
            leaves.iter().map(|c| (c.id, c.step_text.clone())).collect();
        let embedded = embed_last_steps(&texts, embedder)?;
        embed_calls += 1;
        timing.embed = watch.elapsed();

        let watch = Stopwatch::start();
        let vectors: Vec<_> = embedded.into_iter().map(|(_, e)| e).collect();
        let c = agglomerative_cluster(&vectors, cfg.cluster_threshold)?;
        timing.cluster = watch.elapsed();
        c
    } else {
        ClusterAssignment::from_groups(&vec![0; leaves.len()])
    };

    let weights: Vec<(NodeId, u32)> = leaves
        .iter()
        .map(|c| (c.id, initial.weight_of(c.id).unwrap_or(0)))
        .collect();
    let instance = PruneInstance::from_tree(tree, &weights, &clusters, cfg.lambda_b, cfg.lambda_d)?
        .with_coverage(cfg.coverage);
    let decision = pruner::solve(&instance, cfg.solve_limits())?;
    timing.solver = decision.solve_time;

    let retained: BTreeSet<NodeId> = decision.retained_leaves.iter().copied().collect();
    let support: BTreeSet<NodeId> = initial.support().into_iter().collect();
    // Pruning only zero-weight leaves frees no budget, so the first
    // allocation already stands.
    let allocation = if retained == support {
        initial
    } else {
        let kept: Vec<(NodeId, f64)> = scored
            .iter()
            .copied()
            .filter(|(id, _)| retained.contains(id))
            .collect();
        rebase::reallocate(&kept, budget, cfg.rebase_temperature)?
    };
    Ok(EtsOutcome {
        decision,
        allocation,
        clusters,
        timing,
        embed_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EmbedRequest, EmbedResponse};
    use crate::error::BackendError;

    fn leaves(rewards: &[f64]) -> Vec<(NodeId, f64)> {
        rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| (NodeId(i as u32 + 1), r))
            .collect()
    }

    fn kept_weights(a: &WeightAllocation) -> Vec<u32> {
        a.entries
            .iter()
            .map(|&(_, w)| w)
            .filter(|&w| w > 0)
            .collect()
    }

    #[test]
    fn beam_examples() {
        let l = leaves(&(0..16).map(|i| i as f64 / 16.0).collect::<Vec<_>>());
        let a = beam_select(&l, 4, 16).unwrap();
        assert_eq!(kept_weights(&a), vec![4, 4, 4, 4]);
        assert_eq!(KeepK::Sqrt.resolve(16), 4);
        assert_eq!(KeepK::Sqrt.resolve(256), 16);

        let l = leaves(&[0.9, 0.1, 0.5, 0.3, 0.2]);
        let a = beam_select(&l, 2, 5).unwrap();
        assert_eq!(a.weight_of(NodeId(1)), Some(3));
        assert_eq!(a.weight_of(NodeId(3)), Some(2));
        assert_eq!(a.total(), 5);
    }

    #[test]
    fn beam_with_fewer_leaves_than_keep() {
        let a = beam_select(&leaves(&[0.2, 0.4]), 4, 16).unwrap();
        assert_eq!(kept_weights(&a), vec![8, 8]);
    }

    #[test]
    fn dvts_one_survivor_per_subtree() {
        let mut l = Vec::new();
        for s in 0..4usize {
            for j in 0..4u32 {
                l.push((
                    NodeId(s as u32 * 4 + j + 1),
                    f64::from(j) / 4.0 + s as f64 * 0.01,
                    Some(s),
                ));
            }
        }
        let mut budgets = vec![4; 4];
        let a = dvts_select(&l, &mut budgets).unwrap();
        assert_eq!(kept_weights(&a), vec![4, 4, 4, 4]);
        for s in 0..4u32 {
            assert_eq!(a.weight_of(NodeId(s * 4 + 4)), Some(4));
        }
    }

    #[test]
    fn dvts_single_subtree_is_beam_keep_one() {
        let plain = leaves(&[0.3, 0.8, 0.5]);
        let tagged: Vec<_> = plain.iter().map(|&(id, r)| (id, r, Some(0))).collect();
        let d = dvts_select(&tagged, &mut [16]).unwrap();
        let b = beam_select(&plain, 1, 16).unwrap();
        assert_eq!(d.entries, b.entries);
    }

    #[test]
    fn dvts_exhausted_subtree_budget_moves() {
        let l = vec![(NodeId(1), 0.5, Some(0)), (NodeId(2), 0.5, Some(2))];
        let mut budgets = vec![4, 5, 4];
        let a = dvts_select(&l, &mut budgets).unwrap();
        assert_eq!(budgets, vec![7, 0, 6]);
        assert_eq!(a.total(), 13);
    }

    #[test]
    fn dvts_requires_tags() {
        let l = vec![(NodeId(1), 0.5, None)];
        assert!(dvts_select(&l, &mut [4]).is_err());
    }

    #[test]
    fn keep_k_parsing() {
        assert_eq!("sqrt".parse::<KeepK>().unwrap(), KeepK::Sqrt);
        assert_eq!("4".parse::<KeepK>().unwrap(), KeepK::Fixed(4));
        assert!("-1".parse::<KeepK>().is_err());
        let k: KeepK = serde_json::from_str("\"sqrt\"").unwrap();
        assert_eq!(k, KeepK::Sqrt);
        let k: KeepK = serde_json::from_str("8").unwrap();
        assert_eq!(k, KeepK::Fixed(8));
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig::default().validate().is_ok());
        assert!(PolicyConfig {
            lambda_b: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PolicyConfig {
            keep_k: KeepK::Fixed(65),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PolicyConfig {
            width: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    /// Embeds "x:<label>" texts as the unit vector of axis <label>.
    struct AxisEmbedder;

    impl Embedder for AxisEmbedder {
        fn embed(&self, req: &EmbedRequest) -> std::result::Result<EmbedResponse, BackendError> {
            let embeddings = req
                .texts
                .iter()
                .map(|t| {
                    let axis: usize = t.rsplit(':').next().unwrap().parse().unwrap();
                    let mut v = vec![0.0; 4];
                    v[axis] = 1.0;
                    v
                })
                .collect();
            Ok(EmbedResponse { embeddings })
        }
    }

    /// root -> {A -> {a1, a2}, B -> {b1}} with rewards chosen so the REBASE
    /// weights at N = 6 come out as W = (3, 1, 2).
    fn coverage_tree() -> (SearchTree, Vec<Candidate>) {
        let mut t = SearchTree::new("p", 10);
        let a = t.add_child(t.root(), "A", 10, 0.5).unwrap();
        let b = t.add_child(t.root(), "B", 10, 0.5).unwrap();
        let a1 = t.add_child(a, "x:0", 10, 0.74).unwrap();
        let a2 = t.add_child(a, "x:1", 10, 0.62).unwrap();
        let b1 = t.add_child(b, "x:0", 10, 0.66).unwrap();
        let c = |id, reward, s: &str| Candidate {
            id,
            reward,
            step_text: s.into(),
        };
        let cands = vec![c(a1, 0.74, "x:0"), c(a2, 0.62, "x:1"), c(b1, 0.66, "x:0")];
        (t, cands)
    }

    #[test]
    fn ets_without_penalties_matches_rebase() {
        let (t, cands) = coverage_tree();
        let cfg = PolicyConfig {
            lambda_b: 0.0,
            lambda_d: 0.0,
            ..Default::default()
        };
        let out = ets_select(&t, &cands, &cfg, 4, &AxisEmbedder).unwrap();
        let scored: Vec<_> = cands.iter().map(|c| (c.id, c.reward)).collect();
        let plain = rebase_select(&scored, 4, 0.2).unwrap();
        assert_eq!(out.allocation, plain);
        assert_eq!(out.decision.retained_leaves, plain.support());
    }

    #[test]
    fn ets_coverage_keeps_distinct_leaf() {
        let (t, cands) = coverage_tree();
        let scored: Vec<_> = cands.iter().map(|c| (c.id, c.reward)).collect();
        let w = rebase::allocate(&scored, 6, 0.2).unwrap();
        assert_eq!(
            (
                w.weight_of(cands[0].id),
                w.weight_of(cands[1].id),
                w.weight_of(cands[2].id)
            ),
            (Some(3), Some(1), Some(2))
        );
        let cfg = PolicyConfig {
            lambda_b: 1.5,
            lambda_d: 1.0,
            ..Default::default()
        };
        let out = ets_select(&t, &cands, &cfg, 6, &AxisEmbedder).unwrap();
        assert_eq!(out.clusters.num_clusters, 2);
        assert_eq!(out.decision.retained_leaves, vec![cands[0].id, cands[1].id]);
        // reallocation over {a1, a2}
        let expect = rebase::reallocate(&[scored[0], scored[1]], 6, 0.2).unwrap();
        assert_eq!(out.allocation, expect);
        assert!(expect.weight_of(cands[0].id) > expect.weight_of(cands[1].id));
        assert_eq!(out.allocation.total(), 6);
    }

    #[test]
    fn ets_single_leaf_gets_everything() {
        let mut t = SearchTree::new("p", 10);
        let a = t.add_child(t.root(), "x:0", 5, 0.4).unwrap();
        let cands = vec![Candidate {
            id: a,
            reward: 0.4,
            step_text: "x:0".into(),
        }];
        let out = ets_select(&t, &cands, &PolicyConfig::default(), 8, &AxisEmbedder).unwrap();
        assert_eq!(out.decision.retained_leaves, vec![a]);
        assert_eq!(out.allocation.entries, vec![(a, 8)]);
    }
}
