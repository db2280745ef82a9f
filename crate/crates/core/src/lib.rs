//! Verifier-guided tree search with KV-cache-aware pruning.
//!
//! A search grows a tree of reasoning steps. At every step a policy decides
//! how many continuations each active leaf receives. Besides the beam search,
//! DVTS and REBASE baselines, the ETS policy prunes the leaf set by solving
//! a small integer program that trades reward mass against the number of
//! tree nodes kept in the KV cache, while rewarding coverage of semantically
//! distinct steps.
//!
//! Generation, process rewards and embeddings come from [`backend`]
//! providers: a seeded synthetic environment ([`simenv`]) or HTTP services.

pub mod backend;
pub mod clock;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod policies;
pub mod pruner;
pub mod rebase;
pub mod semantics;
pub mod simenv;
pub mod streams;
pub mod tree;

pub use engine::{
    aggregate, run_problem, run_suite, Problem, ProblemResult, SearchConfig, SuiteSummary,
};
pub use error::{BackendError, Error, Result};
pub use metrics::SearchMetrics;
pub use policies::{KeepK, Method, PolicyConfig};
pub use pruner::{CoverageMode, PruneDecision, PruneInstance};
pub use rebase::WeightAllocation;
pub use simenv::SimConfig;
pub use tree::{NodeId, SearchTree};
