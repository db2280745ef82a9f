//! Provider interfaces for generation, process reward and embeddings.
//!
//! Wire format (JSON over HTTP, one endpoint per provider):
//!
//! * `POST /generate` with [`GenerationRequest`], answered by [`GenerationResponse`]
//! * `POST /score` with [`RewardRequest`], answered by [`RewardResponse`]
//! * `POST /embed` with [`EmbedRequest`], answered by [`EmbedResponse`]

use serde::{Deserialize, Serialize};

use crate::error::BackendError;

#[cfg(feature = "http")]
pub mod http;
#[cfg(feature = "http")]
pub mod mock;
pub mod sim;

pub use sim::SimBackend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub problem_id: String,
    pub prompt: String,
    /// Step texts from the first step to the leaf being extended.
    pub prefix: Vec<String>,
    pub n: u32,
    pub temperature: f64,
    /// Opaque step delimiter understood by the service.
    pub stop: String,
    /// Sampling seed for this request's stream.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedStep {
    pub text: String,
    pub token_count: u64,
    pub terminal: bool,
    /// Extracted final answer; expected on terminal steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub steps: Vec<GeneratedStep>,
    /// Set when the service returns fewer than `n` steps on purpose.
    #[serde(default)]
    pub early_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRequest {
    pub problem_id: String,
    pub prompt: String,
    /// Full trajectories (step texts), scored independently.
    pub trajectories: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardResponse {
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f64>>,
}

pub trait Generator: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

pub trait RewardModel: Send + Sync {
    fn score(&self, req: &RewardRequest) -> Result<RewardResponse, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError>;
}

/// The three providers a search needs.
#[derive(Clone, Copy)]
pub struct Providers<'a> {
    pub generator: &'a dyn Generator,
    pub reward: &'a dyn RewardModel,
    pub embedder: &'a dyn Embedder,
}

impl<'a> Providers<'a> {
    /// All three roles served by one backend.
    pub fn from_backend<B: Generator + RewardModel + Embedder>(backend: &'a B) -> Self {
        Providers {
            generator: backend,
            reward: backend,
            embedder: backend,
        }
    }
}

/// Run `call`, retrying once if it fails with a transport error.
pub fn with_retry<T>(mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
    match call() {
        Err(e) if e.is_transient() => {
            log::warn!("retrying after {e}");
            call()
        }
        other => other,
    }
}

pub fn check_generation(
    req: &GenerationRequest,
    resp: &GenerationResponse,
) -> Result<(), BackendError> {
    if resp.steps.len() > req.n as usize {
        return Err(BackendError::Schema(format!(
            "asked for {} steps, got {}",
            req.n,
            resp.steps.len()
        )));
    }
    if resp.steps.len() < req.n as usize && !resp.early_stop {
        return Err(BackendError::Schema(format!(
            "asked for {} steps, got {} without early_stop",
            req.n,
            resp.steps.len()
        )));
    }
    if let Some(s) = resp.steps.iter().find(|s| s.token_count == 0) {
        return Err(BackendError::Schema(format!(
            "step {:?} has zero tokens",
            s.text
        )));
    }
    Ok(())
}

pub fn check_rewards(req: &RewardRequest, resp: &RewardResponse) -> Result<(), BackendError> {
    if resp.rewards.len() != req.trajectories.len() {
        return Err(BackendError::Schema(format!(
            "expected {} rewards, got {}",
            req.trajectories.len(),
            resp.rewards.len()
        )));
    }
    if let Some(&r) = resp.rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(BackendError::RewardOutOfRange(r));
    }
    Ok(())
}

pub fn check_embeddings(req: &EmbedRequest, resp: &EmbedResponse) -> Result<(), BackendError> {
    if resp.embeddings.len() != req.texts.len() {
        return Err(BackendError::Schema(format!(
            "expected {} embeddings, got {}",
            req.texts.len(),
            resp.embeddings.len()
        )));
    }
    if let Some(first) = resp.embeddings.first() {
        if resp.embeddings.iter().any(|e| e.len() != first.len()) {
            return Err(BackendError::Schema("embedding dimensions differ".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_once_on_transport() {
        let calls = Cell::new(0);
        let out = with_retry(|| {
            calls.set(calls.get() + 1);
            if calls.get() == 1 {
                Err(BackendError::Transport("reset".into()))
            } else {
                Ok(5)
            }
        });
        assert_eq!(out, Ok(5));
        assert_eq!(calls.get(), 2);

        calls.set(0);
        let out: Result<(), _> = with_retry(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 2);

        calls.set(0);
        let out: Result<(), _> = with_retry(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Schema("bad".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.get(), 1, "schema errors are not retried");
    }

    #[test]
    fn reward_range_is_checked() {
        let req = RewardRequest {
            problem_id: "p".into(),
            prompt: String::new(),
            trajectories: vec![vec![]],
        };
        let err = check_rewards(&req, &RewardResponse { rewards: vec![1.5] }).unwrap_err();
        assert_eq!(err.class(), "reward_out_of_range");
        assert!(check_rewards(&req, &RewardResponse { rewards: vec![] }).is_err());
    }
}
