//! The search loop and suite runner.
//!
//! One search expands the root into `width` first steps, then alternates
//! scoring, completion handling, policy selection, pruning and expansion
//! until the width is used up or the depth limit is reached. The final
//! answer is the weighted majority over completed trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::{
    check_generation, check_rewards, with_retry, GenerationRequest, Providers, RewardRequest,
};
use crate::clock::Stopwatch;
use crate::error::{invalid, Error, Result};
use crate::metrics::{timing_overhead, SearchMetrics, Timing};
use crate::policies::{
    beam_select, dvts_select, ets_select, rebase_select, Candidate, Method, PolicyConfig,
};
use crate::rebase::WeightAllocation;
use crate::simenv::{check_answer, SimConfig, SimProblem};
use crate::streams::{continuation_seed, derive};
use crate::tree::{NodeId, SearchTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub max_depth: u32,
    /// Mixed into every problem's sampling streams.
    pub seed: u64,
    pub kv_bytes_per_token: f64,
    /// Count the shared prompt in the KV samples.
    pub include_prompt_kv: bool,
    pub stop: String,
    /// Attach a per-step log to each result.
    pub trace: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 6,
            seed: 0,
            kv_bytes_per_token: 1.0,
            include_prompt_kv: true,
            stop: "\n\n".into(),
            trace: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(invalid("search.max_depth must be at least 1"));
        }
        if !(self.kv_bytes_per_token > 0.0 && self.kv_bytes_per_token.is_finite()) {
            return Err(invalid("search.kv_bytes_per_token must be positive"));
        }
        Ok(())
    }
}

/// How a final answer is graded.
#[derive(Debug, Clone, PartialEq)]
pub enum AnswerKey {
    Exact(String),
    /// Any all-gold move tuple is correct.
    Sim(SimProblem),
}

impl AnswerKey {
    pub fn accepts(&self, answer: &str) -> bool {
        match self {
            AnswerKey::Exact(a) => a == answer,
            AnswerKey::Sim(p) => check_answer(p, answer),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    pub prompt_tokens: u64,
    pub seed: u64,
    pub answer_key: Option<AnswerKey>,
}

impl Problem {
    /// Problem `index` of the sim suite seeded with `suite_seed`.
    pub fn sim(suite_seed: u64, index: u64, cfg: &SimConfig) -> Self {
        let p = SimProblem::from_suite(suite_seed, index, cfg);
        Problem {
            id: p.id(),
            prompt: format!("Find a gold path for {}.", p.id()),
            prompt_tokens: cfg.prompt_tokens,
            seed: p.seed,
            answer_key: Some(AnswerKey::Sim(p)),
        }
    }

    pub fn sim_suite(suite_seed: u64, count: u64, cfg: &SimConfig) -> Vec<Problem> {
        (0..count)
            .map(|i| Problem::sim(suite_seed, i, cfg))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedTrajectory {
    pub answer: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunError {
    pub class: String,
    pub message: String,
}

impl RunError {
    fn from_error(e: &Error) -> Self {
        let class = match e {
            Error::Backend(b) => b.class(),
            Error::InvalidNode(_) => "invalid_node",
            Error::ConstraintViolation(_) => "constraint_violation",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Refused(_) => "refused",
        };
        RunError {
            class: class.into(),
            message: e.to_string(),
        }
    }
}

/// One policy round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u32,
    pub width: u32,
    pub leaves: Vec<(NodeId, f64)>,
    pub allocation: Vec<(NodeId, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimal: Option<bool>,
    /// KV sample taken after this round's expansion.
    pub kv_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub problem_id: String,
    pub final_answer: Option<String>,
    /// Set when the problem has an answer key.
    pub correct: Option<bool>,
    pub completed: Vec<CompletedTrajectory>,
    pub metrics: SearchMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RunError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
}

impl ProblemResult {
    pub fn aborted(&self) -> bool {
        self.error.is_some()
    }
}

/// Weighted majority vote: sum rewards per distinct answer and return the
/// heaviest, ties going to the lexicographically smallest answer.
pub fn aggregate(completed: &[CompletedTrajectory]) -> Option<String> {
    let mut votes: BTreeMap<&str, f64> = BTreeMap::new();
    for c in completed {
        *votes.entry(c.answer.as_str()).or_insert(0.0) += c.reward;
    }
    let mut best: Option<(&str, f64)> = None;
    for (answer, total) in votes {
        if best.is_none_or(|(_, b)| total > b) {
            best = Some((answer, total));
        }
    }
    best.map(|(a, _)| a.to_string())
}

struct Search<'a> {
    problem: &'a Problem,
    policy: &'a PolicyConfig,
    cfg: &'a SearchConfig,
    providers: Providers<'a>,
    seed: u64,
    tree: SearchTree,
    metrics: SearchMetrics,
    completed: Vec<CompletedTrajectory>,
    width: u32,
    /// DVTS subtree of each node, indexed by node id.
    subtree: Vec<Option<usize>>,
    subtree_budgets: Vec<u32>,
    trace: Option<Vec<StepTrace>>,
}

impl<'a> Search<'a> {
    fn new(
        problem: &'a Problem,
        policy: &'a PolicyConfig,
        cfg: &'a SearchConfig,
        providers: Providers<'a>,
    ) -> Self {
        Search {
            problem,
            policy,
            cfg,
            providers,
            seed: derive(&[cfg.seed, problem.seed]),
            tree: SearchTree::new(problem.prompt.clone(), problem.prompt_tokens),
            metrics: SearchMetrics::default(),
            completed: Vec::new(),
            width: policy.width,
            subtree: vec![None],
            subtree_budgets: Vec::new(),
            trace: cfg.trace.then(Vec::new),
        }
    }

    fn run(&mut self) -> Result<()> {
        let root = self.tree.root();
        let first = self.expand(&[(root, self.width)], 0)?;
        if self.policy.method == Method::Dvts {
            self.tag_subtrees(&first);
        }
        self.complete_terminals(&first)?;

        let mut depth = 1;
        while self.width > 0 && depth < self.cfg.max_depth {
            let active = self.tree.active_leaves();
            if active.is_empty() {
                break;
            }
            let mut trace = self.select(&active, depth)?;
            let requests: Vec<(NodeId, u32)> = {
                let mut r: Vec<(NodeId, u32)> = trace
                    .allocation
                    .iter()
                    .copied()
                    .filter(|&(_, w)| w > 0)
                    .collect();
                r.sort_unstable();
                r
            };
            let retained: BTreeSet<NodeId> = requests.iter().map(|&(id, _)| id).collect();
            self.tree.prune_to(&retained)?;
            let children = self.expand(&requests, depth)?;
            self.complete_terminals(&children)?;
            if let Some(log) = &mut self.trace {
                trace.kv_tokens = self.metrics.per_step_kv_tokens.last().copied().unwrap_or(0);
                log.push(trace);
            }
            depth += 1;
        }
        Ok(())
    }

    /// First-step child `j` of `n` goes to subtree `j * m / n`; each subtree's
    /// budget starts at its number of first steps.
    fn tag_subtrees(&mut self, first: &[Child]) {
        let n = first.len();
        if n == 0 {
            return;
        }
        let m = (self.policy.keep() as usize).min(n);
        self.subtree_budgets = vec![0; m];
        for (j, child) in first.iter().enumerate() {
            let tag = j * m / n;
            self.subtree[child.id.0 as usize] = Some(tag);
            self.subtree_budgets[tag] += 1;
        }
    }

    fn select(&mut self, active: &[NodeId], step: u32) -> Result<StepTrace> {
        let scored: Vec<(NodeId, f64)> = active
            .iter()
            .map(|&id| Ok((id, self.tree.node(id)?.reward.unwrap_or(0.0))))
            .collect::<Result<_>>()?;
        let mut trace = StepTrace {
            step,
            width: self.width,
            leaves: scored.clone(),
            allocation: Vec::new(),
            clusters: None,
            objective: None,
            optimal: None,
            kv_tokens: 0,
        };
        let allocation: WeightAllocation = match self.policy.method {
            Method::Beam => beam_select(&scored, self.policy.keep(), self.width)?,
            Method::Rebase => rebase_select(&scored, self.width, self.policy.rebase_temperature)?,
            Method::Dvts => {
                let tagged: Vec<(NodeId, f64, Option<usize>)> = scored
                    .iter()
                    .map(|&(id, r)| (id, r, self.subtree.get(id.0 as usize).copied().flatten()))
                    .collect();
                dvts_select(&tagged, &mut self.subtree_budgets)?
            }
            Method::Ets => {
                let candidates: Vec<Candidate> = scored
                    .iter()
                    .map(|&(id, reward)| {
                        Ok(Candidate {
                            id,
                            reward,
                            step_text: self.tree.node(id)?.text.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                let out = ets_select(
                    &self.tree,
                    &candidates,
                    self.policy,
                    self.width,
                    self.providers.embedder,
                )?;
                self.metrics.solves += 1;
                self.metrics.solves_nonoptimal += u64::from(!out.decision.optimal);
                self.metrics.embed_calls += out.embed_calls;
                self.metrics.timing.add(&out.timing);
                trace.clusters = Some(out.clusters.labels.clone());
                trace.objective = Some(out.decision.objective_value);
                trace.optimal = Some(out.decision.optimal);
                out.allocation
            }
        };
        if allocation.total() != u64::from(self.width) {
            return Err(Error::ConstraintViolation(format!(
                "allocation totals {} for width {}",
                allocation.total(),
                self.width
            )));
        }
        trace.allocation = allocation.entries;
        Ok(trace)
    }

    /// Sample `n` continuations of each listed leaf, score them in one
    /// batch, attach them to the tree and take the step's KV sample.
    fn expand(&mut self, requests: &[(NodeId, u32)], step: u32) -> Result<Vec<Child>> {
        let watch = Stopwatch::start();
        let mut pending = Vec::new();
        let mut calls = 0;
        for &(leaf, n) in requests {
            if n == 0 {
                continue;
            }
            let prefix = self.tree.trajectory_texts(leaf)?;
            let req = GenerationRequest {
                problem_id: self.problem.id.clone(),
                prompt: self.problem.prompt.clone(),
                prefix: prefix.clone(),
                n,
                temperature: self.policy.sampling_temperature,
                stop: self.cfg.stop.clone(),
                seed: continuation_seed(self.seed, step, leaf.0),
            };
            let resp = with_retry(|| {
                let resp = self.providers.generator.generate(&req)?;
                check_generation(&req, &resp)?;
                Ok(resp)
            })?;
            calls += 1;
            for s in resp.steps {
                let mut trajectory = prefix.clone();
                trajectory.push(s.text.clone());
                pending.push((leaf, s, trajectory));
            }
        }
        self.metrics.timing.generation += watch.elapsed();
        if pending.is_empty() {
            return Err(Error::Backend(crate::error::BackendError::Schema(
                "generator returned no steps".into(),
            )));
        }

        let watch = Stopwatch::start();
        let req = RewardRequest {
            problem_id: self.problem.id.clone(),
            prompt: self.problem.prompt.clone(),
            trajectories: pending.iter().map(|(_, _, t)| t.clone()).collect(),
        };
        let rewards = with_retry(|| {
            let resp = self.providers.reward.score(&req)?;
            check_rewards(&req, &resp)?;
            Ok(resp)
        })?
        .rewards;
        self.metrics.reward_calls += 1;
        self.metrics.timing.reward += watch.elapsed();

        let mut children = Vec::with_capacity(pending.len());
        let mut new_tokens = 0;
        for ((parent, s, _), reward) in pending.into_iter().zip(rewards) {
            let id = self
                .tree
                .add_child(parent, s.text.clone(), s.token_count, reward)?;
            let tag = self.subtree.get(parent.0 as usize).copied().flatten();
            if self.subtree.len() <= id.0 as usize {
                self.subtree.resize(id.0 as usize + 1, None);
            }
            self.subtree[id.0 as usize] = tag;
            new_tokens += s.token_count;
            children.push(Child {
                id,
                terminal: s.terminal,
                answer: s.answer.unwrap_or(s.text),
                reward,
            });
        }
        let kv = self.tree.kv_tokens(self.cfg.include_prompt_kv);
        self.metrics.record_kv(kv, new_tokens, calls);
        Ok(children)
    }

    /// Move terminal children to the completed set, shrinking the width.
    fn complete_terminals(&mut self, children: &[Child]) -> Result<()> {
        for c in children.iter().filter(|c| c.terminal) {
            self.tree.complete(c.id)?;
            self.completed.push(CompletedTrajectory {
                answer: c.answer.clone(),
                reward: c.reward,
            });
            self.width = self.width.saturating_sub(1);
            if let Some(tag) = self.subtree[c.id.0 as usize] {
                if let Some(b) = self.subtree_budgets.get_mut(tag) {
                    *b = b.saturating_sub(1);
                }
            }
        }
        Ok(())
    }
}

struct Child {
    id: NodeId,
    terminal: bool,
    answer: String,
    reward: f64,
}

/// Run one search. Failures end the search and are recorded in the result
/// together with the metrics gathered so far.
pub fn run_problem(
    problem: &Problem,
    policy: &PolicyConfig,
    cfg: &SearchConfig,
    providers: Providers<'_>,
) -> ProblemResult {
    let mut search = Search::new(problem, policy, cfg, providers);
    let outcome = policy
        .validate()
        .and_then(|_| cfg.validate())
        .and_then(|_| search.run());
    let error = outcome.err().map(|e| {
        log::warn!("{}: {e}", problem.id);
        RunError::from_error(&e)
    });
    let final_answer = if error.is_some() {
        None
    } else {
        aggregate(&search.completed)
    };
    let correct = problem
        .answer_key
        .as_ref()
        .map(|key| final_answer.as_deref().is_some_and(|a| key.accepts(a)));
    ProblemResult {
        problem_id: problem.id.clone(),
        final_answer,
        correct,
        completed: search.completed,
        metrics: search.metrics,
        error,
        trace: search.trace,
    }
}

/// Run every problem with at most `parallelism` concurrent searches.
/// Results come back in input order.
pub fn run_suite(
    problems: &[Problem],
    policy: &PolicyConfig,
    cfg: &SearchConfig,
    providers: Providers<'_>,
    parallelism: usize,
) -> Result<Vec<ProblemResult>> {
    if parallelism < 1 {
        return Err(invalid("parallelism must be at least 1"));
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ProblemResult>>> = Mutex::new(vec![None; problems.len()]);
    std::thread::scope(|s| {
        for _ in 0..parallelism.min(problems.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(problem) = problems.get(i) else {
                    break;
                };
                let result = run_problem(problem, policy, cfg, providers);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    Ok(slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every problem ran"))
        .collect())
}

/// Suite-level means and totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub problems: usize,
    pub graded: usize,
    pub correct: usize,
    pub unanswered: usize,
    pub aborted: usize,
    /// Percent of graded problems answered correctly.
    pub accuracy: f64,
    pub mean_cumulative_kv_tokens: f64,
    pub mean_cumulative_kv_bytes: f64,
    pub mean_peak_kv_tokens: f64,
    /// Mean generated tokens, a proxy for generation FLOPs.
    pub mean_generated_tokens: f64,
    pub mean_model_calls: f64,
    pub mean_reward_calls: f64,
    pub mean_embed_calls: f64,
    pub solves: u64,
    pub solves_nonoptimal: u64,
    #[serde(skip)]
    pub timing: Timing,
}

impl SuiteSummary {
    pub fn from_results(results: &[ProblemResult], kv_bytes_per_token: f64) -> Self {
        let n = results.len();
        let mean = |f: &dyn Fn(&ProblemResult) -> f64| {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let graded = results.iter().filter(|r| r.correct.is_some()).count();
        let correct = results.iter().filter(|r| r.correct == Some(true)).count();
        let mut timing = Timing::default();
        for r in results {
            timing.add(&r.metrics.timing);
        }
        let mean_kv = mean(&|r| r.metrics.cumulative_kv_tokens as f64);
        SuiteSummary {
            problems: n,
            graded,
            correct,
            unanswered: results.iter().filter(|r| r.final_answer.is_none()).count(),
            aborted: results.iter().filter(|r| r.aborted()).count(),
            accuracy: if graded == 0 {
                0.0
            } else {
                100.0 * correct as f64 / graded as f64
            },
            mean_cumulative_kv_tokens: mean_kv,
            mean_cumulative_kv_bytes: mean_kv * kv_bytes_per_token,
            mean_peak_kv_tokens: mean(&|r| r.metrics.peak_kv_tokens() as f64),
            mean_generated_tokens: mean(&|r| r.metrics.generated_tokens as f64),
            mean_model_calls: mean(&|r| r.metrics.model_calls as f64),
            mean_reward_calls: mean(&|r| r.metrics.reward_calls as f64),
            mean_embed_calls: mean(&|r| r.metrics.embed_calls as f64),
            solves: results.iter().map(|r| r.metrics.solves).sum(),
            solves_nonoptimal: results.iter().map(|r| r.metrics.solves_nonoptimal).sum(),
            timing,
        }
    }

    pub fn overhead_fraction(&self) -> f64 {
        timing_overhead(&self.timing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(v: &[(&str, f64)]) -> Vec<CompletedTrajectory> {
        v.iter()
            .map(|&(a, r)| CompletedTrajectory {
                answer: a.into(),
                reward: r,
            })
            .collect()
    }

    #[test]
    fn majority_examples() {
        assert_eq!(aggregate(&votes(&[("a", 0.9)])).as_deref(), Some("a"));
        assert_eq!(
            aggregate(&votes(&[("a", 0.4), ("b", 0.3), ("a", 0.2)])).as_deref(),
            Some("a")
        );
        assert_eq!(
            aggregate(&votes(&[("b", 0.5), ("a", 0.5)])).as_deref(),
            Some("a")
        );
        assert_eq!(aggregate(&[]), None);
    }

    #[test]
    fn weight_beats_count() {
        let v = votes(&[("x", 0.2), ("x", 0.2), ("y", 0.9)]);
        assert_eq!(aggregate(&v).as_deref(), Some("y"));
    }

    #[test]
    fn empty_summary() {
        let s = SuiteSummary::from_results(&[], 2.0);
        assert_eq!(s.problems, 0);
        assert_eq!(s.accuracy, 0.0);
    }
}
