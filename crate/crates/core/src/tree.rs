//! Search tree of reasoning steps.
//!
//! Every node holds the tokens of a single step; a trajectory is the path
//! from the root (the prompt) to a leaf. Trajectories that share a prefix
//! share those nodes, which is how KV-cache sharing is modelled: the KV
//! footprint of the search is the token total of the nodes that still
//! back an active trajectory.
//!
//! A node's tokens are counted while it is the root or has at least one
//! active leaf in its subtree. Completed leaves release their KV once
//! scored, and so do ancestors left with nothing but completed leaves
//! below them. They remain in the tree for voting and traces.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    ActiveLeaf,
    Internal,
    CompletedLeaf,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub token_count: u64,
    pub text: String,
    /// PRM score of the partial trajectory ending here. `None` only on the root.
    pub reward: Option<f64>,
    pub depth: u32,
    pub status: NodeStatus,
    children: Vec<NodeId>,
    /// Active leaves in this subtree, counting the node itself.
    active_below: u32,
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self.status,
            NodeStatus::ActiveLeaf | NodeStatus::CompletedLeaf
        )
    }

    fn holds_kv(&self) -> bool {
        self.parent.is_none() || self.active_below > 0
    }
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<Option<Node>>,
    root: NodeId,
    total_tokens: u64,
}

impl SearchTree {
    /// A tree holding only the prompt. The root is never a leaf candidate.
    pub fn new(prompt: impl Into<String>, prompt_tokens: u64) -> Self {
        let root = Node {
            id: NodeId(0),
            parent: None,
            token_count: prompt_tokens,
            text: prompt.into(),
            reward: None,
            depth: 0,
            status: NodeStatus::Internal,
            children: Vec::new(),
            active_below: 0,
        };
        SearchTree {
            nodes: vec![Some(root)],
            root: NodeId(0),
            total_tokens: prompt_tokens,
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn get(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.get(id).ok_or(Error::InvalidNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        self.nodes
            .get_mut(id.0 as usize)
            .and_then(Option::as_mut)
            .ok_or(Error::InvalidNode(id))
    }

    pub fn is_live(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }

    /// Live nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter_map(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        text: impl Into<String>,
        token_count: u64,
        reward: f64,
    ) -> Result<NodeId> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::InvalidArgument(format!(
                "reward {reward} outside [0, 1]"
            )));
        }
        let p = self.node(parent)?;
        if p.status == NodeStatus::CompletedLeaf {
            return Err(Error::ConstraintViolation(format!(
                "cannot extend completed leaf {parent}"
            )));
        }
        let depth = p.depth + 1;
        let parent_was_leaf = p.status == NodeStatus::ActiveLeaf;

        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Some(Node {
            id,
            parent: Some(parent),
            token_count,
            text: text.into(),
            reward: Some(reward),
            depth,
            status: NodeStatus::ActiveLeaf,
            children: Vec::new(),
            active_below: 1,
        }));
        self.total_tokens += token_count;

        let p = self.node_mut(parent)?;
        p.children.push(id);
        p.status = NodeStatus::Internal;
        // An active leaf already counted itself; its subtree count is unchanged.
        if !parent_was_leaf {
            self.adjust_active(parent, 1);
        }
        Ok(id)
    }

    /// Walk from `from` to the root adding `delta` to every subtree count,
    /// acquiring or releasing KV as counts cross zero.
    fn adjust_active(&mut self, from: NodeId, delta: i32) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            let node = self.nodes[id.0 as usize]
                .as_mut()
                .expect("ancestor is live");
            let before = node.holds_kv();
            node.active_below = (node.active_below as i64 + delta as i64) as u32;
            let after = node.holds_kv();
            match (before, after) {
                (false, true) => self.total_tokens += node.token_count,
                (true, false) => self.total_tokens -= node.token_count,
                _ => {}
            }
            cur = node.parent;
        }
    }

    /// Freeze an active leaf as a finished trajectory and release its KV.
    pub fn complete(&mut self, leaf: NodeId) -> Result<()> {
        let node = self.node_mut(leaf)?;
        if node.status != NodeStatus::ActiveLeaf {
            return Err(Error::ConstraintViolation(format!(
                "{leaf} is not an active leaf"
            )));
        }
        node.status = NodeStatus::CompletedLeaf;
        self.adjust_active(leaf, -1);
        Ok(())
    }

    pub fn active_leaves(&self) -> Vec<NodeId> {
        self.nodes()
            .filter(|n| n.status == NodeStatus::ActiveLeaf)
            .map(|n| n.id)
            .collect()
    }

    pub fn completed_leaves(&self) -> Vec<NodeId> {
        self.nodes()
            .filter(|n| n.status == NodeStatus::CompletedLeaf)
            .map(|n| n.id)
            .collect()
    }

    /// Active and completed leaves under `node`, in id order.
    pub fn descendant_leaves(&self, node: NodeId) -> Result<Vec<NodeId>> {
        self.node(node)?;
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(id) = stack.pop() {
            let n = self.node(id)?;
            if n.is_leaf() {
                out.push(id);
            }
            stack.extend_from_slice(&n.children);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Ancestors of `node` ordered root first, excluding the node itself.
    pub fn ancestors(&self, node: NodeId) -> Result<Vec<NodeId>> {
        let mut path = Vec::new();
        let mut cur = self.node(node)?.parent;
        while let Some(id) = cur {
            path.push(id);
            cur = self.node(id)?.parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Step texts from the first step down to `node` (the prompt excluded).
    pub fn trajectory_texts(&self, node: NodeId) -> Result<Vec<String>> {
        let mut texts = Vec::new();
        let mut cur = Some(node);
        while let Some(id) = cur {
            let n = self.node(id)?;
            if n.parent.is_none() {
                break;
            }
            texts.push(n.text.clone());
            cur = n.parent;
        }
        texts.reverse();
        Ok(texts)
    }

    /// Keep exactly the root-to-leaf paths of `retained` plus every completed
    /// leaf. Returns the number of nodes removed.
    pub fn prune_to(&mut self, retained: &BTreeSet<NodeId>) -> Result<usize> {
        if retained.is_empty() {
            return Err(Error::ConstraintViolation(
                "at least one leaf must be retained".into(),
            ));
        }
        for &id in retained {
            if self.node(id)?.status != NodeStatus::ActiveLeaf {
                return Err(Error::ConstraintViolation(format!(
                    "{id} is not an active leaf"
                )));
            }
        }

        let mut keep = vec![false; self.nodes.len()];
        keep[self.root.0 as usize] = true;
        let anchors = retained.iter().copied().chain(self.completed_leaves());
        for leaf in anchors {
            let mut cur = Some(leaf);
            while let Some(id) = cur {
                if keep[id.0 as usize] {
                    break;
                }
                keep[id.0 as usize] = true;
                cur = self.nodes[id.0 as usize].as_ref().and_then(|n| n.parent);
            }
        }

        let dropped_leaves: Vec<NodeId> = self
            .nodes()
            .filter(|n| n.status == NodeStatus::ActiveLeaf && !keep[n.id.0 as usize])
            .map(|n| n.id)
            .collect();
        for leaf in dropped_leaves {
            self.adjust_active(leaf, -1);
        }

        let mut removed = 0;
        for (idx, slot) in self.nodes.iter_mut().enumerate() {
            if slot.is_some() && !keep[idx] {
                *slot = None;
                removed += 1;
            }
        }
        for slot in self.nodes.iter_mut().flatten() {
            slot.children.retain(|c| keep[c.0 as usize]);
        }
        Ok(removed)
    }

    /// Tokens currently held in KV, including the prompt.
    pub fn live_token_total(&self) -> u64 {
        self.total_tokens
    }

    /// As [`live_token_total`](Self::live_token_total), optionally leaving out
    /// the shared prompt.
    pub fn kv_tokens(&self, include_prompt: bool) -> u64 {
        if include_prompt {
            self.total_tokens
        } else {
            let prompt = self.nodes[self.root.0 as usize]
                .as_ref()
                .map_or(0, |n| n.token_count);
            self.total_tokens - prompt
        }
    }

    /// From-scratch recomputation of the KV token total.
    pub fn recount_tokens(&self) -> u64 {
        let mut active_below = vec![0u32; self.nodes.len()];
        // Children always carry larger ids than their parents.
        for node in self.nodes.iter().rev().flatten() {
            let own = u32::from(node.status == NodeStatus::ActiveLeaf);
            let total = active_below[node.id.0 as usize] + own;
            active_below[node.id.0 as usize] = total;
            if let Some(p) = node.parent {
                active_below[p.0 as usize] += total;
            }
        }
        self.nodes()
            .filter(|n| n.parent.is_none() || active_below[n.id.0 as usize] > 0)
            .map(|n| n.token_count)
            .sum()
    }

    /// Check structural invariants; used by tests and snapshot loading.
    pub fn validate(&self) -> Result<()> {
        for node in self.nodes() {
            match node.parent {
                None => {
                    if node.id != self.root || node.depth != 0 {
                        return Err(Error::ConstraintViolation(format!(
                            "stray root {}",
                            node.id
                        )));
                    }
                }
                Some(p) => {
                    let parent = self.node(p).map_err(|_| {
                        Error::ConstraintViolation(format!("{} has dead parent {p}", node.id))
                    })?;
                    if parent.depth + 1 != node.depth || p >= node.id {
                        return Err(Error::ConstraintViolation(format!(
                            "bad depth or ordering at {}",
                            node.id
                        )));
                    }
                    if !parent.children.contains(&node.id) {
                        return Err(Error::ConstraintViolation(format!(
                            "{} missing from children of {p}",
                            node.id
                        )));
                    }
                    if node.reward.is_none() {
                        return Err(Error::ConstraintViolation(format!(
                            "{} has no reward",
                            node.id
                        )));
                    }
                }
            }
            let internal = !node.children.is_empty();
            if node.parent.is_some() && internal != (node.status == NodeStatus::Internal) {
                return Err(Error::ConstraintViolation(format!(
                    "status of {} disagrees with its children",
                    node.id
                )));
            }
        }
        if self.recount_tokens() != self.total_tokens {
            return Err(Error::ConstraintViolation("token counter drifted".into()));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            root: self.root,
            next_id: self.nodes.len() as u32,
            nodes: self
                .nodes()
                .map(|n| SnapshotNode {
                    id: n.id,
                    parent: n.parent,
                    tokens: n.token_count,
                    reward: n.reward,
                    depth: n.depth,
                    status: n.status,
                    text: n.text.clone(),
                })
                .collect(),
        }
    }

    /// Rebuild a tree from a snapshot, re-deriving all counters.
    pub fn from_snapshot(snap: &TreeSnapshot) -> Result<Self> {
        let mut nodes: Vec<Option<Node>> = vec![None; snap.next_id as usize];
        for s in &snap.nodes {
            let slot = nodes
                .get_mut(s.id.0 as usize)
                .ok_or_else(|| Error::InvalidArgument(format!("{} beyond next_id", s.id)))?;
            *slot = Some(Node {
                id: s.id,
                parent: s.parent,
                token_count: s.tokens,
                text: s.text.clone(),
                reward: s.reward,
                depth: s.depth,
                status: s.status,
                children: Vec::new(),
                active_below: 0,
            });
        }
        for s in &snap.nodes {
            if let Some(p) = s.parent {
                let parent = nodes
                    .get_mut(p.0 as usize)
                    .and_then(Option::as_mut)
                    .ok_or(Error::InvalidNode(p))?;
                parent.children.push(s.id);
            }
        }
        let mut tree = SearchTree {
            nodes,
            root: snap.root,
            total_tokens: 0,
        };
        for node in tree.nodes.iter_mut().flatten() {
            node.children.sort_unstable();
        }
        let actives = tree.active_leaves();
        for leaf in actives {
            let mut cur = Some(leaf);
            while let Some(id) = cur {
                let n = tree.nodes[id.0 as usize]
                    .as_mut()
                    .ok_or(Error::InvalidNode(id))?;
                n.active_below += 1;
                cur = n.parent;
            }
        }
        tree.total_tokens = tree.recount_tokens();
        tree.validate()?;
        Ok(tree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub root: NodeId,
    pub next_id: u32,
    pub nodes: Vec<SnapshotNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub tokens: u64,
    pub reward: Option<f64>,
    pub depth: u32,
    pub status: NodeStatus,
    pub text: String,
}
