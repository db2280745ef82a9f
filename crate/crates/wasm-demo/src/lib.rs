//! Browser demo: REBASE allocation, ETS pruning of a simulated search tree,
//! and semantic clustering of simulated step embeddings.
//!
//! Every export returns a JSON string; `www/index.html` draws the results.

use std::collections::BTreeSet;

use ets_core::pruner::{self, PruneInstance, SolveLimits};
use ets_core::rebase::{self, WeightAllocation};
use ets_core::semantics::{agglomerative_cluster, ClusterAssignment};
use ets_core::simenv::{self, SimProblem, StepLabel};
use ets_core::streams::{derive, rng};
use ets_core::{NodeId, Result, SearchTree, SimConfig};
use rand::Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const REBASE_TEMPERATURE: f64 = 0.2;
const CLUSTER_THRESHOLD: f64 = 0.3;

/// Search nodes explored per solve; no wall clock is available in the browser.
const NODE_LIMIT: u64 = 200_000;

#[derive(Debug, Serialize)]
pub struct AllocationView {
    pub weights: Vec<u32>,
    /// Leaf indices in the order the allocation visits them.
    pub order: Vec<usize>,
    pub total: u64,
}

pub fn allocation(rewards: &[f64], budget: u32, temperature: f64) -> Result<AllocationView> {
    let leaves: Vec<(NodeId, f64)> = rewards
        .iter()
        .enumerate()
        .map(|(i, &r)| (NodeId(i as u32), r))
        .collect();
    let alloc = rebase::allocate(&leaves, budget, temperature)?;
    let mut weights = vec![0; rewards.len()];
    for &(id, w) in &alloc.entries {
        weights[id.0 as usize] = w;
    }
    Ok(AllocationView {
        weights,
        order: alloc.entries.iter().map(|(id, _)| id.0 as usize).collect(),
        total: alloc.total(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeView {
    pub id: u32,
    pub parent: Option<u32>,
    pub depth: u32,
    pub text: String,
    pub reward: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeafView {
    pub id: u32,
    pub reward: f64,
    pub weight: u32,
    pub cluster: usize,
}

/// A REBASE search grown on one simulated problem, stopped before the
/// final pruning decision.
pub struct SimTree {
    tree: SearchTree,
    nodes: Vec<NodeView>,
    leaves: Vec<LeafView>,
    allocation: WeightAllocation,
    clusters: ClusterAssignment,
}

impl SimTree {
    pub fn grow(seed: u32, width: u32, depth: u32) -> Result<Self> {
        let cfg = SimConfig::default();
        let depth = depth.clamp(1, cfg.depth - 1);
        let problem = SimProblem::new(u64::from(seed), &cfg);
        let mut tree = SearchTree::new("problem", cfg.prompt_tokens);
        let mut moves: Vec<Vec<u32>> = vec![Vec::new()];
        let mut frontier: Vec<(NodeId, u32)> = vec![(tree.root(), width)];
        for step in 0..depth {
            let mut next = Vec::new();
            for &(parent, n) in &frontier {
                let prefix = moves[parent.0 as usize].clone();
                let mut r = rng(derive(&[
                    u64::from(seed),
                    u64::from(step),
                    u64::from(parent.0),
                ]));
                for _ in 0..n {
                    let s = simenv::gen_step(&problem, &cfg, &prefix, &mut r)?;
                    let mut texts = tree.trajectory_texts(parent)?;
                    texts.push(s.text.clone());
                    let reward = simenv::score(&problem, &cfg, &texts)?;
                    let id = tree.add_child(parent, s.text, s.token_count, reward)?;
                    let mut path = prefix.clone();
                    path.push(s.label.mv);
                    if moves.len() <= id.0 as usize {
                        moves.resize(id.0 as usize + 1, Vec::new());
                    }
                    moves[id.0 as usize] = path;
                    next.push((id, reward));
                }
            }
            let alloc = rebase::allocate(&next, width, REBASE_TEMPERATURE)?;
            let keep: BTreeSet<NodeId> = alloc.support().into_iter().collect();
            tree.prune_to(&keep)?;
            frontier = alloc
                .entries
                .iter()
                .copied()
                .filter(|&(_, w)| w > 0)
                .collect();
            frontier.sort_by_key(|&(id, _)| id);
        }

        let scored: Vec<(NodeId, f64)> = tree
            .active_leaves()
            .into_iter()
            .map(|id| Ok((id, tree.node(id)?.reward.unwrap_or(0.0))))
            .collect::<Result<_>>()?;
        let allocation = rebase::allocate(&scored, width, REBASE_TEMPERATURE)?;
        let embeddings = scored
            .iter()
            .map(|&(id, _)| simenv::embed(&cfg, &tree.node(id)?.text))
            .collect::<Result<Vec<_>>>()?;
        let clusters = agglomerative_cluster(&embeddings, CLUSTER_THRESHOLD)?;
        let leaves = scored
            .iter()
            .zip(&clusters.labels)
            .map(|(&(id, reward), &cluster)| LeafView {
                id: id.0,
                reward,
                weight: allocation.weight_of(id).unwrap_or(0),
                cluster,
            })
            .collect();
        let nodes = tree
            .nodes()
            .map(|n| NodeView {
                id: n.id.0,
                parent: n.parent.map(|p| p.0),
                depth: n.depth,
                text: n.text.clone(),
                reward: n.reward,
            })
            .collect();
        Ok(SimTree {
            tree,
            nodes,
            leaves,
            allocation,
            clusters,
        })
    }

    pub fn instance(&self, lambda_b: f64, lambda_d: f64) -> Result<PruneInstance> {
        let weights: Vec<(NodeId, u32)> = self
            .leaves
            .iter()
            .map(|l| (NodeId(l.id), l.weight))
            .collect();
        PruneInstance::from_tree(&self.tree, &weights, &self.clusters, lambda_b, lambda_d)
    }

    pub fn prune(&self, lambda_b: f64, lambda_d: f64) -> Result<PruneView> {
        let inst = self.instance(lambda_b, lambda_d)?;
        let limits = SolveLimits {
            time_budget: std::time::Duration::from_secs(3600),
            node_limit: Some(NODE_LIMIT),
        };
        let d = pruner::solve(&inst, limits)?;
        let mut kept: BTreeSet<u32> = BTreeSet::new();
        for leaf in &d.retained_leaves {
            kept.insert(leaf.0);
            kept.extend(self.tree.ancestors(*leaf)?.iter().map(|a| a.0));
        }
        Ok(PruneView {
            retained_leaves: d.retained_leaves.iter().map(|n| n.0).collect(),
            retained_nodes: kept.into_iter().collect(),
            objective: d.objective_value,
            nodes_retained: d.nodes_retained,
            total_nodes: inst.internal_nodes.len() + inst.leaves.len(),
            clusters_covered: d.clusters_covered,
            clusters: self.clusters.num_clusters,
            optimal: d.optimal,
            explored: d.explored,
        })
    }

    pub fn view(&self) -> TreeView<'_> {
        TreeView {
            nodes: &self.nodes,
            leaves: &self.leaves,
            budget: self.allocation.budget,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TreeView<'a> {
    pub nodes: &'a [NodeView],
    pub leaves: &'a [LeafView],
    pub budget: u32,
}

#[derive(Debug, Serialize)]
pub struct PruneView {
    pub retained_leaves: Vec<u32>,
    /// Retained leaves and all their ancestors.
    pub retained_nodes: Vec<u32>,
    pub objective: f64,
    pub nodes_retained: usize,
    pub total_nodes: usize,
    pub clusters_covered: usize,
    pub clusters: usize,
    pub optimal: bool,
    pub explored: u64,
}

#[derive(Debug, Serialize)]
pub struct ClusterView {
    /// Fixed random 2-D projection of each embedding.
    pub points: Vec<[f64; 2]>,
    pub moves: Vec<u32>,
    pub labels: Vec<usize>,
    pub clusters: usize,
    pub rand_index: f64,
}

/// Embed `count` random steps at one depth and cluster them.
pub fn clustering(seed: u32, count: u32, noise: f64, threshold: f64) -> Result<ClusterView> {
    let cfg = SimConfig {
        embed_noise: noise,
        ..SimConfig::default()
    };
    let mut r = rng(derive(&[u64::from(seed), 0xc1u64]));
    let labels: Vec<StepLabel> = (0..count.max(1))
        .map(|_| StepLabel {
            depth: 0,
            mv: r.random_range(0..cfg.moves_per_depth),
            variant: r.random_range(0..cfg.variants_per_move),
        })
        .collect();
    let embeddings = labels
        .iter()
        .map(|l| simenv::embed(&cfg, &l.text()))
        .collect::<Result<Vec<_>>>()?;
    let found = agglomerative_cluster(&embeddings, threshold)?;
    let axes = projection_axes(cfg.embed_dim, derive(&[u64::from(seed), 0xa5]));
    let points = embeddings
        .iter()
        .map(|e| {
            let v = e.vector();
            [dot(v, &axes[0]), dot(v, &axes[1])]
        })
        .collect();
    let moves: Vec<u32> = labels.iter().map(|l| l.mv).collect();
    let planted: Vec<usize> = moves.iter().map(|&m| m as usize).collect();
    Ok(ClusterView {
        points,
        rand_index: rand_index(&found.labels, &planted),
        moves,
        clusters: found.num_clusters,
        labels: found.labels,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projection_axes(dim: usize, seed: u64) -> [Vec<f64>; 2] {
    let mut r = rng(seed);
    let mut axis = || -> Vec<f64> { (0..dim).map(|_| r.random_range(-1.0..1.0)).collect() };
    [axis(), axis()]
}

pub fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0u64;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            pairs += 1;
            agree += u64::from((a[i] == a[j]) == (b[i] == b[j]));
        }
    }
    if pairs == 0 {
        1.0
    } else {
        agree as f64 / pairs as f64
    }
}

fn to_json<T: Serialize>(value: &Result<T>) -> std::result::Result<String, JsError> {
    match value {
        Ok(v) => serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string())),
        Err(e) => Err(JsError::new(&e.to_string())),
    }
}

/// REBASE weights for `rewards` (a JS `Float64Array`).
#[wasm_bindgen]
pub fn rebase_allocation(
    rewards: &[f64],
    budget: u32,
    temperature: f64,
) -> std::result::Result<String, JsError> {
    to_json(&allocation(rewards, budget, temperature))
}

/// Simulated step embeddings clustered at `threshold`.
#[wasm_bindgen]
pub fn cluster_steps(
    seed: u32,
    count: u32,
    noise: f64,
    threshold: f64,
) -> std::result::Result<String, JsError> {
    to_json(&clustering(seed, count, noise, threshold))
}

#[wasm_bindgen]
pub struct TreeDemo {
    inner: SimTree,
}

#[wasm_bindgen]
impl TreeDemo {
    /// Grow a REBASE tree of `depth` steps with `width` continuations per step.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, width: u32, depth: u32) -> std::result::Result<TreeDemo, JsError> {
        SimTree::grow(seed, width.max(1), depth)
            .map(|inner| TreeDemo { inner })
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn tree(&self) -> String {
        serde_json::to_string(&self.inner.view()).expect("tree view serializes")
    }

    /// ETS pruning decision for the final frontier.
    pub fn prune(&self, lambda_b: f64, lambda_d: f64) -> std::result::Result<String, JsError> {
        to_json(&self.inner.prune(lambda_b, lambda_d))
    }
}
