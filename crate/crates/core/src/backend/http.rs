//! Blocking JSON-over-HTTP client for external generation, reward and
//! embedding services.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::backend::{
    check_embeddings, check_generation, check_rewards, EmbedRequest, EmbedResponse, Embedder,
    GenerationRequest, GenerationResponse, Generator, RewardModel, RewardRequest, RewardResponse,
};
use crate::error::BackendError;

pub const ENV_BASE_URL: &str = "ETS_BACKEND_URL";
pub const ENV_GENERATE_URL: &str = "ETS_GENERATE_URL";
pub const ENV_SCORE_URL: &str = "ETS_SCORE_URL";
pub const ENV_EMBED_URL: &str = "ETS_EMBED_URL";
pub const ENV_BEARER_TOKEN: &str = "ETS_BEARER_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub generate_url: String,
    pub score_url: String,
    pub embed_url: String,
    pub bearer_token: Option<String>,
    pub generate_timeout: Duration,
    pub score_timeout: Duration,
    pub embed_timeout: Duration,
    /// Log every request and response body at debug level.
    pub log_bodies: bool,
}

impl HttpConfig {
    /// Endpoints `{base}/generate`, `{base}/score` and `{base}/embed`.
    pub fn with_base_url(base: &str) -> Self {
        let base = base.trim_end_matches('/');
        HttpConfig {
            generate_url: format!("{base}/generate"),
            score_url: format!("{base}/score"),
            embed_url: format!("{base}/embed"),
            bearer_token: None,
            generate_timeout: Duration::from_secs(120),
            score_timeout: Duration::from_secs(30),
            embed_timeout: Duration::from_secs(30),
            log_bodies: false,
        }
    }

    /// Read endpoints from the environment; per-endpoint variables override
    /// the base URL.
    pub fn from_env() -> Option<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base = var(ENV_BASE_URL);
        let mut cfg = HttpConfig::with_base_url(base.as_deref().unwrap_or(""));
        let mut any = base.is_some();
        for (key, slot) in [
            (ENV_GENERATE_URL, &mut cfg.generate_url),
            (ENV_SCORE_URL, &mut cfg.score_url),
            (ENV_EMBED_URL, &mut cfg.embed_url),
        ] {
            if let Some(v) = var(key) {
                *slot = v;
                any = true;
            }
        }
        cfg.bearer_token = var(ENV_BEARER_TOKEN);
        any.then_some(cfg)
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { cfg, client })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        url: &str,
        timeout: Duration,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        if self.cfg.log_bodies {
            log::debug!(
                "POST {url} {}",
                serde_json::to_string(body).unwrap_or_default()
            );
        }
        let mut req = self.client.post(url).timeout(timeout).json(body);
        if let Some(token) = &self.cfg.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if self.cfg.log_bodies {
            log::debug!("{status} {url} {text}");
        }
        if status.is_server_error() {
            return Err(BackendError::Transport(format!("{url} answered {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Schema(format!(
                "{url} answered {status}: {text}"
            )));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Schema(format!("{url}: {e}")))
    }
}

impl Generator for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let resp = self.post(&self.cfg.generate_url, self.cfg.generate_timeout, req)?;
        check_generation(req, &resp)?;
        Ok(resp)
    }
}

impl RewardModel for HttpBackend {
    fn score(&self, req: &RewardRequest) -> Result<RewardResponse, BackendError> {
        let resp = self.post(&self.cfg.score_url, self.cfg.score_timeout, req)?;
        check_rewards(req, &resp)?;
        Ok(resp)
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let resp = self.post(&self.cfg.embed_url, self.cfg.embed_timeout, req)?;
        check_embeddings(req, &resp)?;
        Ok(resp)
    }
}
