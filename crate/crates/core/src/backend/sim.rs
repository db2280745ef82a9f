//! Providers backed directly by the synthetic environment.

use crate::backend::{
    EmbedRequest, EmbedResponse, Embedder, GeneratedStep, GenerationRequest, GenerationResponse,
    Generator, RewardModel, RewardRequest, RewardResponse,
};
use crate::error::BackendError;
use crate::simenv::{self, parse_problem_id, SimConfig, SimProblem, StepLabel};
use crate::streams::rng;

#[derive(Debug, Clone)]
pub struct SimBackend {
    cfg: SimConfig,
}

impl SimBackend {
    pub fn new(cfg: SimConfig) -> Self {
        SimBackend { cfg }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn problem(&self, id: &str) -> Result<SimProblem, BackendError> {
        let seed = parse_problem_id(id).map_err(|e| BackendError::InvalidInput(e.to_string()))?;
        Ok(SimProblem::new(seed, &self.cfg))
    }
}

fn input(e: crate::error::Error) -> BackendError {
    BackendError::InvalidInput(e.to_string())
}

impl Generator for SimBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let problem = self.problem(&req.problem_id)?;
        let prefix = req
            .prefix
            .iter()
            .map(|t| StepLabel::parse(t).map(|l| l.mv))
            .collect::<Result<Vec<_>, _>>()
            .map_err(input)?;
        let mut stream = rng(req.seed);
        let steps = (0..req.n)
            .map(|_| {
                simenv::gen_step(&problem, &self.cfg, &prefix, &mut stream).map(|s| GeneratedStep {
                    text: s.text,
                    token_count: s.token_count,
                    terminal: s.terminal,
                    answer: s.answer,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(input)?;
        Ok(GenerationResponse {
            steps,
            early_stop: false,
        })
    }
}

impl RewardModel for SimBackend {
    fn score(&self, req: &RewardRequest) -> Result<RewardResponse, BackendError> {
        let problem = self.problem(&req.problem_id)?;
        let rewards = req
            .trajectories
            .iter()
            .map(|t| simenv::score(&problem, &self.cfg, t))
            .collect::<Result<Vec<_>, _>>()
            .map_err(input)?;
        Ok(RewardResponse { rewards })
    }
}

impl Embedder for SimBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let embeddings = req
            .texts
            .iter()
            .map(|t| simenv::embed(&self.cfg, t).map(|e| e.vector().to_vec()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(input)?;
        Ok(EmbedResponse { embeddings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::{cosine_distance, embed_last_steps};
    use crate::tree::NodeId;

    #[test]
    fn sim_embedder_same_label_zero_distance() {
        let b = SimBackend::new(SimConfig {
            embed_noise: 0.0,
            ..SimConfig::default()
        });
        let out = embed_last_steps(
            &[
                (NodeId(1), "d0:m3:v0".into()),
                (NodeId(2), "d0:m3:v2".into()),
            ],
            &b,
        )
        .unwrap();
        assert!(cosine_distance(&out[0].1, &out[1].1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn duplicate_texts_identical_vectors() {
        let b = SimBackend::new(SimConfig::default());
        let resp = b
            .embed(&EmbedRequest {
                texts: vec!["d1:m1:v1".into(), "d1:m1:v1".into()],
            })
            .unwrap();
        assert_eq!(resp.embeddings[0], resp.embeddings[1]);
        assert!(embed_last_steps(&[], &b).unwrap().is_empty());
    }

    #[test]
    fn generate_returns_n_steps() {
        let b = SimBackend::new(SimConfig::default());
        let p = SimProblem::new(1, b.config());
        let req = GenerationRequest {
            problem_id: p.id(),
            prompt: String::new(),
            prefix: vec!["d0:m1:v0".into()],
            n: 3,
            temperature: 1.0,
            stop: "\n\n".into(),
            seed: 9,
        };
        let resp = b.generate(&req).unwrap();
        assert_eq!(resp.steps.len(), 3);
        assert!(resp.steps.iter().all(|s| s.text.starts_with("d1:")));
        assert_eq!(resp, b.generate(&req).unwrap());
    }

    #[test]
    fn unknown_problem_is_invalid_input() {
        let b = SimBackend::new(SimConfig::default());
        let err = b
            .score(&RewardRequest {
                problem_id: "x".into(),
                prompt: String::new(),
                trajectories: vec![],
            })
            .unwrap_err();
        assert_eq!(err.class(), "invalid_input");
    }
}
