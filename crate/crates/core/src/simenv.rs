//! Seeded synthetic reasoning environment.
//!
//! A problem is a sequence of `depth` decisions, each picking one of
//! `moves_per_depth` moves; `gold_moves` of them are correct at every depth.
//! A trajectory is correct iff every move is gold. The surrogate reward is
//! the fraction of gold steps plus trajectory-keyed Gaussian noise, and the
//! surrogate embedding maps every phrasing (variant) of the same move to
//! nearly the same direction.
//!
//! Step texts have the form `d{depth}:m{move}:v{variant}` with a 0-based
//! depth. A terminal step reports the problem's canonical answer when the
//! whole trajectory is gold, as correct solutions agree on their final
//! answer; any other trajectory reports its own move tuple `m0-m1-...`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::semantics::Embedding;
use crate::streams::{derive, hash_strs, rng};

const GOLD_SALT: u64 = 0x676f_6c64;
const REWARD_SALT: u64 = 0x7277_6421;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub depth: u32,
    pub moves_per_depth: u32,
    pub gold_moves: u32,
    pub p_good: f64,
    pub reward_noise: f64,
    pub embed_dim: usize,
    pub embed_noise: f64,
    pub tokens_per_step: u64,
    pub variants_per_move: u32,
    pub prompt_tokens: u64,
    pub embed_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            depth: 6,
            moves_per_depth: 8,
            gold_moves: 2,
            p_good: 0.55,
            reward_noise: 0.1,
            embed_dim: 32,
            embed_noise: 0.05,
            tokens_per_step: 40,
            variants_per_move: 4,
            prompt_tokens: 100,
            embed_seed: 0x5eed,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth as u64),
            ("moves_per_depth", self.moves_per_depth as u64),
            ("gold_moves", self.gold_moves as u64),
            ("embed_dim", self.embed_dim as u64),
            ("tokens_per_step", self.tokens_per_step),
            ("variants_per_move", self.variants_per_move as u64),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("sim.{name} must be positive")));
            }
        }
        if self.gold_moves > self.moves_per_depth {
            return Err(invalid("sim.gold_moves exceeds sim.moves_per_depth"));
        }
        if !(0.0..=1.0).contains(&self.p_good) {
            return Err(invalid("sim.p_good must lie in [0, 1]"));
        }
        if !(self.reward_noise >= 0.0 && self.reward_noise.is_finite()) {
            return Err(invalid("sim.reward_noise must be nonnegative"));
        }
        if !(self.embed_noise >= 0.0 && self.embed_noise.is_finite()) {
            return Err(invalid("sim.embed_noise must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimProblem {
    pub seed: u64,
    /// Sorted gold move indices per depth.
    pub gold: Vec<Vec<u32>>,
    pub canonical_answer: String,
}

impl SimProblem {
    pub fn new(seed: u64, cfg: &SimConfig) -> Self {
        let mut r = rng(derive(&[seed, GOLD_SALT]));
        let gold: Vec<Vec<u32>> = (0..cfg.depth)
            .map(|_| {
                let mut g: Vec<u32> = sample(
                    &mut r,
                    cfg.moves_per_depth as usize,
                    cfg.gold_moves as usize,
                )
                .into_iter()
                .map(|m| m as u32)
                .collect();
                g.sort_unstable();
                g
            })
            .collect();
        let smallest: Vec<u32> = gold.iter().map(|g| g[0]).collect();
        SimProblem {
            seed,
            canonical_answer: render_answer(&smallest),
            gold,
        }
    }

    /// Problem `index` of the suite seeded with `suite_seed`.
    pub fn from_suite(suite_seed: u64, index: u64, cfg: &SimConfig) -> Self {
        SimProblem::new(derive(&[suite_seed, index]), cfg)
    }

    pub fn id(&self) -> String {
        problem_id(self.seed)
    }

    pub fn is_gold(&self, depth: usize, mv: u32) -> bool {
        self.gold
            .get(depth)
            .is_some_and(|g| g.binary_search(&mv).is_ok())
    }
}

pub fn problem_id(seed: u64) -> String {
    format!("sim-{seed:016x}")
}

pub fn parse_problem_id(id: &str) -> Result<u64> {
    id.strip_prefix("sim-")
        .and_then(|hex| u64::from_str_radix(hex, 16).ok())
        .ok_or_else(|| invalid(format!("not a sim problem id: {id:?}")))
}

pub fn render_answer(moves: &[u32]) -> String {
    moves
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepLabel {
    pub depth: u32,
    pub mv: u32,
    pub variant: u32,
}

impl StepLabel {
    pub fn text(&self) -> String {
        format!("d{}:m{}:v{}", self.depth, self.mv, self.variant)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = || invalid(format!("unparseable sim step {text:?}"));
        let mut parts = text.split(':');
        let mut field = |prefix: char| -> Result<u32> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(prefix))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let label = StepLabel {
            depth: field('d')?,
            mv: field('m')?,
            variant: field('v')?,
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub label: StepLabel,
    pub text: String,
    pub token_count: u64,
    pub terminal: bool,
    /// Rendered move tuple, present on terminal steps.
    pub answer: Option<String>,
}

/// Sample the next step after `prefix` (the moves taken so far).
pub fn gen_step<R: Rng>(
    problem: &SimProblem,
    cfg: &SimConfig,
    prefix: &[u32],
    rng: &mut R,
) -> Result<SimStep> {
    let depth = prefix.len();
    if depth >= cfg.depth as usize {
        return Err(invalid(format!("prefix already has depth {depth}")));
    }
    let gold = &problem.gold[depth];
    let non_gold = cfg.moves_per_depth - cfg.gold_moves;
    let mv = if non_gold == 0 || rng.random_bool(cfg.p_good) {
        gold[rng.random_range(0..gold.len())]
    } else {
        // the r-th move that is not gold
        let mut r = rng.random_range(0..non_gold);
        let mut mv = 0;
        loop {
            if !problem.is_gold(depth, mv) {
                if r == 0 {
                    break mv;
                }
                r -= 1;
            }
            mv += 1;
        }
    };
    let variant = rng.random_range(0..cfg.variants_per_move);
    let label = StepLabel {
        depth: depth as u32,
        mv,
        variant,
    };
    let terminal = depth + 1 == cfg.depth as usize;
    let answer = terminal.then(|| {
        let mut moves = prefix.to_vec();
        moves.push(mv);
        if moves
            .iter()
            .enumerate()
            .all(|(d, &m)| problem.is_gold(d, m))
        {
            problem.canonical_answer.clone()
        } else {
            render_answer(&moves)
        }
    });
    Ok(SimStep {
        text: label.text(),
        label,
        token_count: cfg.tokens_per_step,
        terminal,
        answer,
    })
}

/// Surrogate process reward for a trajectory given as step texts.
pub fn score<S: AsRef<str>>(
    problem: &SimProblem,
    cfg: &SimConfig,
    trajectory: &[S],
) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(invalid("cannot score an empty trajectory"));
    }
    let mut gold = 0usize;
    for (depth, text) in trajectory.iter().enumerate() {
        let label = StepLabel::parse(text.as_ref())?;
        if problem.is_gold(depth, label.mv) {
            gold += 1;
        }
    }
    let base = gold as f64 / trajectory.len() as f64;
    let noise = if cfg.reward_noise > 0.0 {
        let mut r = rng(derive(&[problem.seed, REWARD_SALT, hash_strs(trajectory)]));
        Normal::new(0.0, cfg.reward_noise)
            .map_err(|e| invalid(e.to_string()))?
            .sample(&mut r)
    } else {
        0.0
    };
    Ok((base + noise).clamp(0.0, 1.0))
}

fn unit_gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut r = rng(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Surrogate sentence embedding: the move's direction plus a small
/// variant-specific perturbation.
pub fn embed(cfg: &SimConfig, text: &str) -> Result<Embedding> {
    let label = StepLabel::parse(text)?;
    let (d, m, v) = (
        u64::from(label.depth),
        u64::from(label.mv),
        u64::from(label.variant),
    );
    let base = unit_gaussian(derive(&[cfg.embed_seed, d, m]), cfg.embed_dim);
    let mut vector = base;
    if cfg.embed_noise > 0.0 {
        let noise = unit_gaussian(derive(&[cfg.embed_seed, d, m, v, 1]), cfg.embed_dim);
        for (x, u) in vector.iter_mut().zip(noise) {
            *x += cfg.embed_noise * u;
        }
    }
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(vector.into_iter().map(|x| x / norm).collect())
}

pub fn check_answer(problem: &SimProblem, answer: &str) -> bool {
    let moves: Option<Vec<u32>> = answer.split('-').map(|m| m.parse().ok()).collect();
    match moves {
        Some(moves) if moves.len() == problem.gold.len() => moves
            .iter()
            .enumerate()
            .all(|(d, &m)| problem.is_gold(d, m)),
        _ => false,
    }
}
