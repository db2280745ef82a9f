//! KV-aware pruning as an exact integer program.
//!
//! Given candidate leaves with continuation weights, choose a nonempty
//! subset `S` maximizing
//!
//! ```text
//!   sum_{i in S} W_i / sum_i W_i
//!     - lambda_b * |nodes(S)| / (P + L)
//!     + lambda_d * |clusters(S)| / K
//! ```
//!
//! where `nodes(S)` is the path closure of `S` (retained internal nodes,
//! root included, plus the leaves themselves) and `clusters(S)` the semantic
//! clusters it covers. Internal-node and cluster indicators are functions of
//! the leaf indicators at any optimum, so the solver branches on leaves only.
//!
//! Optimal sets are compared by objective, then by fewer retained nodes, then
//! by the lexicographically smallest sorted leaf-id list.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{serde_secs, Stopwatch, ThreadCpuClock};
use crate::error::{invalid, Error, Result};
use crate::semantics::ClusterAssignment;
use crate::tree::{NodeId, SearchTree};

/// Objective values closer than this are treated as equal.
const TIE_EPS: f64 = 1e-9;

/// Subgradient steps spent tightening the coverage relaxation per node.
const BONUS_STEPS: usize = 6;

/// How a cluster counts as covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Covered when any member leaf is retained.
    #[default]
    Any,
    /// Covered only when every member leaf is retained (`z_k <= x_i` for all members).
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLeaf {
    pub id: NodeId,
    pub weight: u32,
    /// Internal nodes from the root down to the leaf's parent.
    pub path: Vec<NodeId>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneInstance {
    pub leaves: Vec<PruneLeaf>,
    pub internal_nodes: Vec<NodeId>,
    pub num_clusters: usize,
    pub lambda_b: f64,
    pub lambda_d: f64,
    #[serde(default)]
    pub coverage: CoverageMode,
}

impl PruneInstance {
    /// Build an instance from the live tree. `clusters.labels` is aligned with `weights`.
    pub fn from_tree(
        tree: &SearchTree,
        weights: &[(NodeId, u32)],
        clusters: &ClusterAssignment,
        lambda_b: f64,
        lambda_d: f64,
    ) -> Result<Self> {
        if clusters.labels.len() != weights.len() {
            return Err(invalid("cluster labels do not line up with leaves"));
        }
        let mut internal = BTreeSet::new();
        let mut leaves = Vec::with_capacity(weights.len());
        for (&(id, weight), &cluster) in weights.iter().zip(&clusters.labels) {
            let path = tree.ancestors(id)?;
            internal.extend(path.iter().copied());
            leaves.push(PruneLeaf {
                id,
                weight,
                path,
                cluster,
            });
        }
        leaves.sort_by_key(|l| l.id);
        Ok(PruneInstance {
            leaves,
            internal_nodes: internal.into_iter().collect(),
            num_clusters: clusters.num_clusters,
            lambda_b,
            lambda_d,
            coverage: CoverageMode::Any,
        })
    }

    pub fn with_coverage(mut self, coverage: CoverageMode) -> Self {
        self.coverage = coverage;
        self
    }

    pub fn weight_total(&self) -> u64 {
        self.leaves.iter().map(|l| u64::from(l.weight)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub retained_leaves: Vec<NodeId>,
    pub objective_value: f64,
    pub optimal: bool,
    pub nodes_retained: usize,
    pub clusters_covered: usize,
    #[serde(with = "serde_secs")]
    pub solve_time: Duration,
    /// Branch-and-bound nodes visited (subsets, for brute force).
    pub explored: u64,
}

/// Limits for [`solve`]. Either limit ending the search yields the best
/// incumbent with `optimal = false`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveLimits {
    pub time_budget: Duration,
    pub node_limit: Option<u64>,
}

impl Default for SolveLimits {
    fn default() -> Self {
        SolveLimits {
            time_budget: Duration::from_millis(250),
            node_limit: None,
        }
    }
}

/// Instance flattened to dense indices.
struct Compiled<'a> {
    inst: &'a PruneInstance,
    l: usize,
    p: usize,
    k: usize,
    total_w: u64,
    weight_frac: Vec<f64>,
    node_cost: f64,
    cover_gain: f64,
    paths: Vec<Vec<usize>>,
    leaf_parent: Vec<usize>,
    internal_parent: Vec<Option<usize>>,
    leaf_cluster: Vec<usize>,
    members: Vec<Vec<usize>>,
    index_of: HashMap<NodeId, usize>,
    /// Leaf indices in ascending id order.
    by_id: Vec<usize>,
}

impl<'a> Compiled<'a> {
    fn new(inst: &'a PruneInstance) -> Result<Self> {
        let l = inst.leaves.len();
        let p = inst.internal_nodes.len();
        let k = inst.num_clusters;
        if l == 0 {
            return Err(invalid("instance has no leaves"));
        }
        if p == 0 {
            return Err(invalid("instance has no internal nodes"));
        }
        if k == 0 {
            return Err(invalid("instance has no clusters"));
        }
        for (name, v) in [("lambda_b", inst.lambda_b), ("lambda_d", inst.lambda_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }

        let mut internal_index = HashMap::with_capacity(p);
        for (j, &id) in inst.internal_nodes.iter().enumerate() {
            if internal_index.insert(id, j).is_some() {
                return Err(invalid(format!("internal node {id} listed twice")));
            }
        }
        let mut seen_leaves = BTreeSet::new();
        let mut internal_parent: Vec<Option<Option<usize>>> = vec![None; p];
        let mut on_path = vec![false; p];
        let mut paths = Vec::with_capacity(l);
        let mut leaf_parent = Vec::with_capacity(l);
        let mut leaf_cluster = Vec::with_capacity(l);
        let mut members = vec![Vec::new(); k];
        let root = inst.leaves[0].path.first().copied();

        for (i, leaf) in inst.leaves.iter().enumerate() {
            if !seen_leaves.insert(leaf.id) || internal_index.contains_key(&leaf.id) {
                return Err(invalid(format!(
                    "leaf {} is duplicated or internal",
                    leaf.id
                )));
            }
            if leaf.path.is_empty() || leaf.path.first().copied() != root {
                return Err(invalid(format!(
                    "path of leaf {} does not start at the root",
                    leaf.id
                )));
            }
            if leaf.cluster >= k {
                return Err(invalid(format!(
                    "leaf {} has cluster {} >= {k}",
                    leaf.id, leaf.cluster
                )));
            }
            members[leaf.cluster].push(i);
            leaf_cluster.push(leaf.cluster);

            let mut idx = Vec::with_capacity(leaf.path.len());
            let mut prev: Option<usize> = None;
            for node in &leaf.path {
                let j = *internal_index
                    .get(node)
                    .ok_or_else(|| invalid(format!("path node {node} is not an internal node")))?;
                match internal_parent[j] {
                    None => internal_parent[j] = Some(prev),
                    Some(existing) if existing == prev => {}
                    Some(_) => return Err(invalid(format!("node {node} has two parents"))),
                }
                on_path[j] = true;
                idx.push(j);
                prev = Some(j);
            }
            leaf_parent.push(prev.expect("nonempty path"));
            paths.push(idx);
        }
        if let Some(j) = on_path.iter().position(|&b| !b) {
            return Err(invalid(format!(
                "internal node {} lies on no leaf path",
                inst.internal_nodes[j]
            )));
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(invalid(format!("cluster {c} has no members")));
        }

        let mut by_id: Vec<usize> = (0..l).collect();
        by_id.sort_by_key(|&i| inst.leaves[i].id);
        let total_w = inst.weight_total();
        let weight_frac = inst
            .leaves
            .iter()
            .map(|leaf| {
                if total_w > 0 {
                    f64::from(leaf.weight) / total_w as f64
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Compiled {
            inst,
            l,
            p,
            k,
            total_w,
            weight_frac,
            node_cost: inst.lambda_b / (p + l) as f64,
            cover_gain: inst.lambda_d / k as f64,
            paths,
            leaf_parent,
            internal_parent: internal_parent.into_iter().map(|x| x.flatten()).collect(),
            leaf_cluster,
            members,
            index_of: inst
                .leaves
                .iter()
                .enumerate()
                .map(|(i, leaf)| (leaf.id, i))
                .collect(),
            by_id,
        })
    }

    /// The objective as a function of integer counts only, so equal counts
    /// always give bit-identical values whatever order they were summed in.
    fn score(&self, sum_w: u64, nodes: usize, covered: usize) -> f64 {
        let reward = if self.total_w > 0 {
            sum_w as f64 / self.total_w as f64
        } else {
            0.0
        };
        reward - self.inst.lambda_b * nodes as f64 / (self.p + self.l) as f64
            + self.inst.lambda_d * covered as f64 / self.k as f64
    }

    /// Evaluate a set of leaf indices from scratch.
    fn evaluate(&self, chosen: &[usize]) -> Candidate {
        let mut internal = vec![false; self.p];
        let mut per_cluster = vec![0usize; self.k];
        let mut sum_w = 0u64;
        for &i in chosen {
            sum_w += u64::from(self.inst.leaves[i].weight);
            per_cluster[self.leaf_cluster[i]] += 1;
            for &j in &self.paths[i] {
                internal[j] = true;
            }
        }
        let nodes = internal.iter().filter(|&&b| b).count() + chosen.len();
        let covered = self.count_covered(&per_cluster);
        let mut ids: Vec<NodeId> = chosen.iter().map(|&i| self.inst.leaves[i].id).collect();
        ids.sort_unstable();
        Candidate {
            objective: self.score(sum_w, nodes, covered),
            nodes,
            covered,
            ids,
        }
    }

    fn count_covered(&self, per_cluster: &[usize]) -> usize {
        per_cluster
            .iter()
            .zip(&self.members)
            .filter(|(&n, m)| match self.inst.coverage {
                CoverageMode::Any => n > 0,
                CoverageMode::All => n == m.len(),
            })
            .count()
    }

    fn decision(
        &self,
        best: Candidate,
        optimal: bool,
        watch: Stopwatch,
        explored: u64,
    ) -> PruneDecision {
        PruneDecision {
            retained_leaves: best.ids,
            objective_value: best.objective,
            optimal,
            nodes_retained: best.nodes,
            clusters_covered: best.covered,
            solve_time: watch.elapsed(),
            explored,
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    objective: f64,
    nodes: usize,
    covered: usize,
    ids: Vec<NodeId>,
}

impl Candidate {
    /// `Less` when `self` is the preferred solution.
    fn rank(&self, other: &Candidate) -> Ordering {
        if self.objective > other.objective + TIE_EPS {
            Ordering::Less
        } else if other.objective > self.objective + TIE_EPS {
            Ordering::Greater
        } else {
            self.nodes
                .cmp(&other.nodes)
                .then_with(|| self.ids.cmp(&other.ids))
        }
    }
}

pub fn objective(instance: &PruneInstance, subset: &BTreeSet<NodeId>) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::ConstraintViolation(
            "at least one leaf must be retained".into(),
        ));
    }
    let compiled = Compiled::new(instance)?;
    let index: HashMap<NodeId, usize> = instance
        .leaves
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id, i))
        .collect();
    let chosen = subset
        .iter()
        .map(|id| index.get(id).copied().ok_or(Error::InvalidNode(*id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(compiled.evaluate(&chosen).objective)
}

/// Exhaustive search over every nonempty leaf subset. Testing oracle.
pub fn brute_force(instance: &PruneInstance) -> Result<PruneDecision> {
    let watch = Stopwatch::start();
    let compiled = Compiled::new(instance)?;
    if compiled.l > 20 {
        return Err(Error::Refused(format!(
            "brute force over {} leaves; the limit is 20",
            compiled.l
        )));
    }
    let mut best: Option<Candidate> = None;
    let mut chosen = Vec::with_capacity(compiled.l);
    for mask in 1u32..(1u32 << compiled.l) {
        chosen.clear();
        chosen.extend((0..compiled.l).filter(|i| mask >> i & 1 == 1));
        let cand = compiled.evaluate(&chosen);
        if best.as_ref().is_none_or(|b| cand.rank(b) == Ordering::Less) {
            best = Some(cand);
        }
    }
    let explored = (1u64 << compiled.l) - 1;
    Ok(compiled.decision(best.expect("at least one subset"), true, watch, explored))
}

/// Exact branch-and-bound over leaf indicators.
pub fn solve(instance: &PruneInstance, limits: SolveLimits) -> Result<PruneDecision> {
    let watch = Stopwatch::start();
    let compiled = Compiled::new(instance)?;
    let mut search = Search::new(&compiled, limits);
    search.warm_start();
    search.branch(0, false);
    let optimal = !search.aborted;
    let explored = search.explored;
    let best = search.best.expect("warm start always yields an incumbent");
    Ok(compiled.decision(best, optimal, watch, explored))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fixed {
    Open,
    In,
    Out,
}

/// Value of the best leaf selection within a subtree under the current
/// fixings, ignoring coverage.
#[derive(Clone, Copy)]
enum SubtreeValue {
    Unreachable,
    Optional(f64),
    Forced(f64),
}

struct Search<'c, 'a> {
    c: &'c Compiled<'a>,
    limits: SolveLimits,
    cpu: ThreadCpuClock,
    order: Vec<usize>,
    fixed: Vec<Fixed>,
    below: Vec<u32>,
    per_cluster: Vec<usize>,
    excluded_per_cluster: Vec<usize>,
    open_per_cluster: Vec<usize>,
    chosen: Vec<usize>,
    sum_w: u64,
    closure: usize,
    covered: usize,
    best: Option<Candidate>,
    explored: u64,
    aborted: bool,
    internal_values: Vec<SubtreeValue>,
    in_incumbent: Vec<bool>,
    /// From the last tree bound: the coverage-free optimum and the sorted
    /// forcing penalties of the clusters still to cover.
    tree_base: f64,
    penalties: Vec<f64>,
    /// Sum of the children's contributions to each internal node's value.
    child_terms: Vec<f64>,
    outside: Vec<f64>,
    /// Best coverage-free value with some open member of the cluster forced in.
    best_forced: Vec<f64>,
    bonus: Vec<f64>,
    relaxed_members: Vec<usize>,
    stack: Vec<usize>,
    /// Bound value below which the current node is pruned anyway.
    cutoff: f64,
    children: Vec<Vec<Child>>,
    /// Internal nodes with every parent before its children.
    topo: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Child {
    Internal(usize),
    Leaf(usize),
}

impl<'c, 'a> Search<'c, 'a> {
    fn new(c: &'c Compiled<'a>, limits: SolveLimits) -> Self {
        let mut order: Vec<usize> = (0..c.l).collect();
        order.sort_by(|&a, &b| {
            c.inst.leaves[b]
                .weight
                .cmp(&c.inst.leaves[a].weight)
                .then(c.inst.leaves[a].id.cmp(&c.inst.leaves[b].id))
        });
        let mut children = vec![Vec::new(); c.p];
        for j in 0..c.p {
            if let Some(parent) = c.internal_parent[j] {
                children[parent].push(Child::Internal(j));
            }
        }
        for i in 0..c.l {
            children[c.leaf_parent[i]].push(Child::Leaf(i));
        }
        let mut topo: Vec<usize> = (0..c.p)
            .filter(|&j| c.internal_parent[j].is_none())
            .collect();
        let mut head = 0;
        while head < topo.len() {
            let j = topo[head];
            head += 1;
            for child in &children[j] {
                if let Child::Internal(x) = child {
                    topo.push(*x);
                }
            }
        }
        Search {
            c,
            limits,
            cpu: ThreadCpuClock::start(),
            order,
            fixed: vec![Fixed::Open; c.l],
            below: vec![0; c.p],
            per_cluster: vec![0; c.k],
            excluded_per_cluster: vec![0; c.k],
            open_per_cluster: c.members.iter().map(Vec::len).collect(),
            chosen: Vec::with_capacity(c.l),
            sum_w: 0,
            closure: 0,
            covered: 0,
            best: None,
            explored: 0,
            aborted: false,
            internal_values: vec![SubtreeValue::Unreachable; c.p],
            in_incumbent: vec![false; c.l],
            tree_base: 0.0,
            penalties: Vec::with_capacity(c.k),
            child_terms: vec![0.0; c.p],
            outside: vec![0.0; c.p],
            best_forced: vec![f64::NEG_INFINITY; c.k],
            bonus: vec![0.0; c.k],
            relaxed_members: vec![0; c.k],
            stack: Vec::with_capacity(c.p),
            cutoff: f64::NEG_INFINITY,
            children,
            topo,
        }
    }

    fn include(&mut self, i: usize) {
        self.fixed[i] = Fixed::In;
        self.open_per_cluster[self.c.leaf_cluster[i]] -= 1;
        self.chosen.push(i);
        self.sum_w += u64::from(self.c.inst.leaves[i].weight);
        self.closure += 1;
        for &j in &self.c.paths[i] {
            if self.below[j] == 0 {
                self.closure += 1;
            }
            self.below[j] += 1;
        }
        let k = self.c.leaf_cluster[i];
        let before = self.cluster_covered(k);
        self.per_cluster[k] += 1;
        if !before && self.cluster_covered(k) {
            self.covered += 1;
        }
    }

    fn uninclude(&mut self, i: usize) {
        let k = self.c.leaf_cluster[i];
        let before = self.cluster_covered(k);
        self.per_cluster[k] -= 1;
        if before && !self.cluster_covered(k) {
            self.covered -= 1;
        }
        for &j in &self.c.paths[i] {
            self.below[j] -= 1;
            if self.below[j] == 0 {
                self.closure -= 1;
            }
        }
        self.closure -= 1;
        self.sum_w -= u64::from(self.c.inst.leaves[i].weight);
        self.chosen.pop();
        self.open_per_cluster[k] += 1;
        self.fixed[i] = Fixed::Open;
    }

    fn exclude(&mut self, i: usize) {
        self.fixed[i] = Fixed::Out;
        let k = self.c.leaf_cluster[i];
        self.open_per_cluster[k] -= 1;
        self.excluded_per_cluster[k] += 1;
    }

    fn unexclude(&mut self, i: usize) {
        let k = self.c.leaf_cluster[i];
        self.open_per_cluster[k] += 1;
        self.excluded_per_cluster[k] -= 1;
        self.fixed[i] = Fixed::Open;
    }

    fn cluster_covered(&self, k: usize) -> bool {
        match self.c.inst.coverage {
            CoverageMode::Any => self.per_cluster[k] > 0,
            CoverageMode::All => self.per_cluster[k] == self.c.members[k].len(),
        }
    }

    /// Clusters not covered now that some completion could still cover.
    fn coverable(&self) -> usize {
        (0..self.c.k)
            .filter(|&k| {
                !self.cluster_covered(k)
                    && match self.c.inst.coverage {
                        CoverageMode::Any => self.open_per_cluster[k] > 0,
                        CoverageMode::All => self.excluded_per_cluster[k] == 0,
                    }
            })
            .count()
    }

    fn current(&self) -> Candidate {
        let mut ids: Vec<NodeId> = self
            .chosen
            .iter()
            .map(|&i| self.c.inst.leaves[i].id)
            .collect();
        ids.sort_unstable();
        Candidate {
            objective: self.c.score(self.sum_w, self.closure, self.covered),
            nodes: self.closure,
            covered: self.covered,
            ids,
        }
    }

    fn offer(&mut self, cand: Candidate) {
        if self
            .best
            .as_ref()
            .is_none_or(|b| cand.rank(b) == Ordering::Less)
        {
            self.best = Some(cand);
        }
    }

    fn offer_current(&mut self) {
        if !self.chosen.is_empty() {
            let cand = self.current();
            self.offer(cand);
        }
    }

    /// Start from the best single leaf and add leaves while the objective
    /// improves, most gain per newly retained node first.
    fn warm_start(&mut self) {
        let mut best_single: Option<Candidate> = None;
        for i in 0..self.c.l {
            let cand = self.c.evaluate(&[i]);
            if best_single
                .as_ref()
                .is_none_or(|b| cand.rank(b) == Ordering::Less)
            {
                best_single = Some(cand);
            }
        }
        let first = best_single.expect("nonempty instance");
        let mut chosen: Vec<usize> = vec![self
            .c
            .inst
            .leaves
            .iter()
            .position(|l| l.id == first.ids[0])
            .expect("known leaf")];
        let mut current = first;
        loop {
            let mut pick: Option<(f64, usize, Candidate)> = None;
            for i in 0..self.c.l {
                if chosen.contains(&i) {
                    continue;
                }
                chosen.push(i);
                let cand = self.c.evaluate(&chosen);
                chosen.pop();
                let gain = cand.objective - current.objective;
                if gain <= TIE_EPS {
                    continue;
                }
                let ratio = gain / (cand.nodes - current.nodes) as f64;
                if pick.as_ref().is_none_or(|(r, _, _)| ratio > *r) {
                    pick = Some((ratio, i, cand));
                }
            }
            match pick {
                Some((_, i, cand)) => {
                    chosen.push(i);
                    current = cand;
                }
                None => break,
            }
        }
        let root_bound = self.additive_bound().min(self.tree_bound());
        let current = if root_bound > current.objective + TIE_EPS {
            self.polish(chosen, current)
        } else {
            current
        };
        self.offer(current);
    }

    /// Local search from the greedy set: apply the best single add, drop or
    /// swap until none improves the ranking.
    fn polish(&self, mut chosen: Vec<usize>, mut current: Candidate) -> Candidate {
        loop {
            let mut next: Option<(Vec<usize>, Candidate)> = None;
            let mut consider = |set: Vec<usize>, best: &Candidate| {
                if set.is_empty() {
                    return;
                }
                let cand = self.c.evaluate(&set);
                let bar = next.as_ref().map_or(best, |(_, c)| c);
                if cand.rank(bar) == Ordering::Less {
                    next = Some((set, cand));
                }
            };
            for pos in 0..chosen.len() {
                let mut set = chosen.clone();
                set.swap_remove(pos);
                consider(set, &current);
            }
            for i in 0..self.c.l {
                if chosen.contains(&i) {
                    continue;
                }
                let mut set = chosen.clone();
                set.push(i);
                consider(set.clone(), &current);
                for pos in 0..chosen.len() {
                    let mut swapped = set.clone();
                    swapped.swap_remove(pos);
                    consider(swapped, &current);
                }
            }
            match next {
                Some((set, cand)) => {
                    chosen = set;
                    current = cand;
                }
                None => return current,
            }
        }
    }

    fn out_of_budget(&mut self) -> bool {
        if self.aborted {
            return true;
        }
        if let Some(limit) = self.limits.node_limit {
            if self.explored >= limit {
                self.aborted = true;
            }
        }
        if self.explored.is_multiple_of(256) && self.cpu.elapsed() > self.limits.time_budget {
            self.aborted = true;
        }
        self.aborted
    }

    /// Additive bound: every open leaf pays only for itself, and each
    /// coverable cluster is credited once through its cheapest member.
    #[allow(clippy::needless_range_loop)]
    fn additive_bound(&self) -> f64 {
        let cost = self.c.node_cost;
        let mut bound = self.c.score(self.sum_w, self.closure, self.covered);
        let mut cluster_bonus = vec![f64::NEG_INFINITY; self.c.k];
        for i in 0..self.c.l {
            if self.fixed[i] != Fixed::Open {
                continue;
            }
            let net = self.c.weight_frac[i] - cost;
            bound += net.max(0.0);
            let k = self.c.leaf_cluster[i];
            cluster_bonus[k] = cluster_bonus[k].max(net.min(0.0));
        }
        for k in 0..self.c.k {
            if self.cluster_covered(k) {
                continue;
            }
            let reachable = match self.c.inst.coverage {
                CoverageMode::Any => self.open_per_cluster[k] > 0,
                CoverageMode::All => {
                    self.excluded_per_cluster[k] == 0 && self.open_per_cluster[k] > 0
                }
            };
            if reachable {
                let bonus = match self.c.inst.coverage {
                    CoverageMode::Any => self.c.cover_gain + cluster_bonus[k],
                    CoverageMode::All => self.c.cover_gain,
                };
                bound += bonus.max(0.0);
            }
        }
        bound
    }

    /// Tree bound. A bottom-up pass computes, for every internal node, the
    /// best reward-minus-node-cost of its subtree given the node is kept;
    /// the root value is the exact optimum ignoring coverage. A top-down
    /// pass then gives the optimum with any single open leaf forced in.
    /// Covering a new cluster costs at least the drop from forcing its best
    /// member, and a set of new clusters at least the largest such drop.
    /// A second bound prices coverage into the leaves instead; the smaller
    /// of the two is returned.
    fn tree_bound(&mut self) -> f64 {
        let base = self.subtree_pass(false);
        if base == f64::NEG_INFINITY {
            return base;
        }
        self.penalties.clear();
        self.tree_base = base;
        let g = self.c.cover_gain;
        if !(g > 0.0 && self.c.inst.coverage == CoverageMode::Any) {
            return base + g * (self.covered + self.coverable()) as f64;
        }
        let by_largest = base + g * self.covered as f64 + self.coverage_credit(base);

        // Relax "cluster k is covered" to alpha + (1 - alpha) * (members kept)
        // and pay each open member of an uncovered cluster its bonus
        // g * (1 - alpha), set to the cluster's forcing penalty.
        let mut prepaid = g * self.covered as f64;
        for k in 0..self.c.k {
            self.bonus[k] = 0.0;
            if !self.cluster_covered(k) && self.best_forced[k] > f64::NEG_INFINITY {
                let b = (base - self.best_forced[k]).clamp(0.0, g);
                self.bonus[k] = b;
                prepaid += g - b;
            }
        }
        let mut by_bonus = prepaid + self.subtree_pass(true);

        // A few subgradient steps: raise the bonus of clusters the relaxed
        // optimum leaves uncovered, lower it where it keeps several members.
        let mut step = 0.5 * g;
        for _ in 0..BONUS_STEPS {
            if by_bonus < by_largest.min(self.cutoff) {
                break;
            }
            self.count_relaxed_members();
            let mut moved = false;
            for k in 0..self.c.k {
                if self.cluster_covered(k) || self.best_forced[k] == f64::NEG_INFINITY {
                    continue;
                }
                let slope = self.relaxed_members[k] as f64 - 1.0;
                let b = (self.bonus[k] - step * slope).clamp(0.0, g);
                if b != self.bonus[k] {
                    prepaid += self.bonus[k] - b;
                    self.bonus[k] = b;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
            by_bonus = by_bonus.min(prepaid + self.subtree_pass(true));
            step *= 0.5;
        }
        by_largest.min(by_bonus)
    }

    /// Members of each cluster kept by the optimum of the last bonus pass.
    fn count_relaxed_members(&mut self) {
        self.relaxed_members.iter_mut().for_each(|n| *n = 0);
        self.stack.clear();
        self.stack.push(self.topo[0]);
        while let Some(j) = self.stack.pop() {
            let mut fallback: Option<(f64, Child)> = None;
            let mut any = false;
            for idx in 0..self.children[j].len() {
                let child = self.children[j][idx];
                let v = match (child, self.child_value(child)) {
                    (Child::Leaf(i), SubtreeValue::Optional(x)) => {
                        SubtreeValue::Optional(x + self.bonus[self.c.leaf_cluster[i]])
                    }
                    (_, v) => v,
                };
                let take = match v {
                    SubtreeValue::Unreachable => false,
                    SubtreeValue::Forced(_) => true,
                    SubtreeValue::Optional(x) => {
                        if fallback.is_none_or(|(f, _)| x > f) {
                            fallback = Some((x, child));
                        }
                        x > 0.0
                    }
                };
                if take {
                    any = true;
                    self.keep_relaxed(child);
                }
            }
            if !any {
                if let Some((_, child)) = fallback {
                    self.keep_relaxed(child);
                }
            }
        }
    }

    fn keep_relaxed(&mut self, child: Child) {
        match child {
            Child::Internal(x) => self.stack.push(x),
            Child::Leaf(i) => self.relaxed_members[self.c.leaf_cluster[i]] += 1,
        }
    }

    /// Bottom-up pass over the internal nodes; returns the root value, the
    /// best reward-minus-node-cost over completions (plus leaf bonuses when
    /// `with_bonus`).
    fn subtree_pass(&mut self, with_bonus: bool) -> f64 {
        let cost = self.c.node_cost;
        for t in (0..self.topo.len()).rev() {
            let j = self.topo[t];
            let mut forced_sum = 0.0;
            let mut has_forced = false;
            let mut optional_gain = 0.0;
            let mut best_optional = f64::NEG_INFINITY;
            for &child in &self.children[j] {
                let mut v = self.child_value(child);
                if let (true, Child::Leaf(i), SubtreeValue::Optional(x)) = (with_bonus, child, v) {
                    v = SubtreeValue::Optional(x + self.bonus[self.c.leaf_cluster[i]]);
                }
                match v {
                    SubtreeValue::Unreachable => {}
                    SubtreeValue::Forced(x) => {
                        has_forced = true;
                        forced_sum += x;
                    }
                    SubtreeValue::Optional(x) => {
                        optional_gain += x.max(0.0);
                        best_optional = best_optional.max(x);
                    }
                }
            }
            self.child_terms[j] = forced_sum + optional_gain;
            self.internal_values[j] = if has_forced {
                SubtreeValue::Forced(forced_sum + optional_gain - cost)
            } else if best_optional > f64::NEG_INFINITY {
                let gain = if optional_gain > 0.0 {
                    optional_gain
                } else {
                    best_optional
                };
                SubtreeValue::Optional(gain - cost)
            } else {
                SubtreeValue::Unreachable
            };
        }
        match self.internal_values[self.topo[0]] {
            SubtreeValue::Unreachable => f64::NEG_INFINITY,
            SubtreeValue::Optional(x) | SubtreeValue::Forced(x) => x,
        }
    }

    fn child_value(&self, child: Child) -> SubtreeValue {
        match child {
            Child::Internal(x) => self.internal_values[x],
            Child::Leaf(i) => match self.fixed[i] {
                Fixed::Out => SubtreeValue::Unreachable,
                Fixed::In => SubtreeValue::Forced(self.c.weight_frac[i] - self.c.node_cost),
                Fixed::Open => SubtreeValue::Optional(self.c.weight_frac[i] - self.c.node_cost),
            },
        }
    }

    /// Upper bound on the coverage gain from clusters not yet covered, net
    /// of what forcing their members costs the coverage-free optimum `base`.
    fn coverage_credit(&mut self, base: f64) -> f64 {
        let cost = self.c.node_cost;
        let term = |v: SubtreeValue| match v {
            SubtreeValue::Unreachable => 0.0,
            SubtreeValue::Forced(x) => x,
            SubtreeValue::Optional(x) => x.max(0.0),
        };
        // outside[j]: best value outside the subtree of j, given j is kept.
        self.outside[self.topo[0]] = 0.0;
        self.best_forced
            .iter_mut()
            .for_each(|b| *b = f64::NEG_INFINITY);
        for t in 0..self.topo.len() {
            let j = self.topo[t];
            if matches!(self.internal_values[j], SubtreeValue::Unreachable) {
                continue;
            }
            let around = self.outside[j] - cost + self.child_terms[j];
            for idx in 0..self.children[j].len() {
                let child = self.children[j][idx];
                let v = self.child_value(child);
                match child {
                    Child::Internal(x) => self.outside[x] = around - term(v),
                    Child::Leaf(i) => {
                        if self.fixed[i] == Fixed::Open {
                            let forced = around - term(v) + self.c.weight_frac[i] - cost;
                            let k = self.c.leaf_cluster[i];
                            self.best_forced[k] = self.best_forced[k].max(forced);
                        }
                    }
                }
            }
        }
        let mut penalties = std::mem::take(&mut self.penalties);
        penalties.extend(
            (0..self.c.k)
                .filter(|&k| !self.cluster_covered(k) && self.best_forced[k] > f64::NEG_INFINITY)
                .map(|k| (base - self.best_forced[k]).max(0.0)),
        );
        penalties.sort_by(f64::total_cmp);
        self.penalties = penalties;
        self.penalties
            .iter()
            .enumerate()
            .map(|(n, p)| self.c.cover_gain * (n + 1) as f64 - p)
            .fold(0.0, f64::max)
    }

    /// Whether every completion of the current fixings that ties the
    /// incumbent on objective and node count has a larger leaf-id list.
    /// Such sets are never prefixes of one another, so the lists compare at
    /// the smallest id in which the sets differ; if that id is decided, no
    /// smaller id is open, and only the incumbent holds it, the incumbent wins.
    fn incumbent_wins_ties(&mut self) -> bool {
        let Some(best) = &self.best else { return false };
        self.in_incumbent.iter_mut().for_each(|b| *b = false);
        for id in &best.ids {
            if let Some(&i) = self.c.index_of.get(id) {
                self.in_incumbent[i] = true;
            }
        }
        for &i in &self.c.by_id {
            match self.fixed[i] {
                Fixed::Open => return false,
                Fixed::In if !self.in_incumbent[i] => return false,
                Fixed::Out if self.in_incumbent[i] => return true,
                _ => {}
            }
        }
        false
    }

    /// Fewest leaves a completion must add to cover enough new clusters to
    /// reach `target`, going by the penalties of the last tree bound.
    fn cover_leaves_needed(&self, target: f64) -> usize {
        let g = self.c.cover_gain;
        let fixed = self.tree_base + g * self.covered as f64;
        if fixed >= target - TIE_EPS {
            return 0;
        }
        self.penalties
            .iter()
            .enumerate()
            .position(|(n, p)| fixed + g * (n + 1) as f64 - p >= target - TIE_EPS)
            .map_or(self.penalties.len(), |n| n + 1)
    }

    /// Fewest nodes any feasible completion can retain.
    fn min_nodes(&self, depth: usize) -> usize {
        if !self.chosen.is_empty() {
            return self.closure;
        }
        self.order[depth..]
            .iter()
            .map(|&i| self.c.paths[i].len() + 1)
            .min()
            .unwrap_or(usize::MAX)
    }

    fn branch(&mut self, depth: usize, grew: bool) {
        self.explored += 1;
        if self.out_of_budget() {
            return;
        }
        if grew {
            self.offer_current();
        }
        if depth == self.order.len() {
            return;
        }

        let best = self.best.as_ref().expect("incumbent");
        let (best_objective, best_nodes) = (best.objective, best.nodes);
        self.cutoff = best_objective - TIE_EPS;
        let bound = self.additive_bound().min(self.tree_bound());
        if bound < best_objective - TIE_EPS {
            return;
        }
        if bound <= best_objective + TIE_EPS {
            let mut min_nodes = self.min_nodes(depth);
            if !self.penalties.is_empty() {
                min_nodes = min_nodes.max(self.closure + self.cover_leaves_needed(best_objective));
            }
            if min_nodes > best_nodes || (min_nodes == best_nodes && self.incumbent_wins_ties()) {
                return;
            }
        }

        let i = self.order[depth];
        // Including a leaf that cannot add coverage and whose weight does not
        // pay for its own node never beats leaving it out.
        let k = self.c.leaf_cluster[i];
        let no_cover = self.c.cover_gain == 0.0
            || (self.c.inst.coverage == CoverageMode::Any && self.per_cluster[k] > 0);
        let dominated = no_cover && self.c.weight_frac[i] <= self.c.node_cost;
        // Conversely, a leaf whose weight pays for every node it would add
        // improves any completion that leaves it out.
        let new_nodes = 1 + self.c.paths[i]
            .iter()
            .filter(|&&j| self.below[j] == 0)
            .count();
        let forced = self.c.weight_frac[i] > self.c.node_cost * new_nodes as f64 + TIE_EPS;

        if !dominated {
            self.include(i);
            self.branch(depth + 1, true);
            self.uninclude(i);
        }
        if forced {
            return;
        }
        self.exclude(i);
        self.branch(depth + 1, false);
        self.unexclude(i);
    }
}
