//! Experiment configuration: one JSON document with a section per module,
//! every leaf overridable from the command line as `--section.key value`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use ets_core::backend::http::HttpConfig;
use ets_core::{PolicyConfig, SearchConfig, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Seed of the simulated problem list.
    pub seed: u64,
    /// Number of simulated problems.
    pub problems: u64,
    /// Concurrent searches; defaults to the logical core count.
    pub parallelism: Option<usize>,
    /// JSONL problem list for HTTP backends, one
    /// `{"id", "prompt", "prompt_tokens", "seed", "answer"}` object per line.
    pub problems_file: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 1,
            problems: 100,
            parallelism: None,
            problems_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Sim,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Base URL serving `/generate`, `/score` and `/embed`. Falls back to
    /// the `ETS_BACKEND_URL` family of environment variables.
    pub base_url: Option<String>,
    pub generate_timeout_s: f64,
    pub score_timeout_s: f64,
    pub embed_timeout_s: f64,
    pub log_bodies: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Sim,
            base_url: None,
            generate_timeout_s: 120.0,
            score_timeout_s: 30.0,
            embed_timeout_s: 30.0,
            log_bodies: false,
        }
    }
}

impl BackendConfig {
    pub fn http(&self) -> Result<HttpConfig, UsageError> {
        let mut cfg = match (&self.base_url, HttpConfig::from_env()) {
            (Some(base), _) => HttpConfig::with_base_url(base),
            (None, Some(env)) => env,
            (None, None) => return Err(UsageError(
                "backend.kind is \"http\" but neither backend.base_url nor ETS_BACKEND_URL is set"
                    .into(),
            )),
        };
        for (name, secs, slot) in [
            (
                "generate_timeout_s",
                self.generate_timeout_s,
                &mut cfg.generate_timeout,
            ),
            (
                "score_timeout_s",
                self.score_timeout_s,
                &mut cfg.score_timeout,
            ),
            (
                "embed_timeout_s",
                self.embed_timeout_s,
                &mut cfg.embed_timeout,
            ),
        ] {
            if !(secs > 0.0 && secs.is_finite()) {
                return Err(UsageError(format!(
                    "backend.{name} must be positive, got {secs}"
                )));
            }
            *slot = std::time::Duration::from_secs_f64(secs);
        }
        cfg.log_bodies = self.log_bodies;
        if cfg.bearer_token.is_none() {
            cfg.bearer_token = HttpConfig::from_env().and_then(|e| e.bearer_token);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicyConfig,
    pub search: SearchConfig,
    pub sim: SimConfig,
    pub suite: SuiteConfig,
    pub backend: BackendConfig,
}

pub const SECTIONS: [&str; 5] = ["policy", "search", "sim", "suite", "backend"];

/// Short flags and the config leaves they set.
pub const ALIASES: [(&str, &str); 8] = [
    ("method", "policy.method"),
    ("width", "policy.width"),
    ("lambda-b", "policy.lambda_b"),
    ("lambda-d", "policy.lambda_d"),
    ("keep-k", "policy.keep_k"),
    ("seed", "search.seed"),
    ("problems", "suite.problems"),
    ("parallelism", "suite.parallelism"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: String,
    pub value: String,
}

/// Split override flags out of `args`, leaving everything else in order.
/// Accepts `--section.key value`, `--section.key=value` and the aliases.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), UsageError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let path = if let Some((_, path)) = ALIASES.iter().find(|(a, _)| *a == name) {
            path.to_string()
        } else if SECTIONS.iter().any(|s| name.starts_with(&format!("{s}."))) {
            name.clone()
        } else {
            rest.push(arg);
            continue;
        };
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| UsageError(format!("--{name} needs a value")))?,
        };
        overrides.push(Override { path, value });
    }
    Ok((rest, overrides))
}

impl ExperimentConfig {
    /// Read `path` (or start from defaults) and apply `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<Self, UsageError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                let cfg: ExperimentConfig = serde_json::from_str(&text)
                    .map_err(|e| UsageError(format!("{}: {e}", p.display())))?;
                serde_json::to_value(cfg).expect("config serializes")
            }
            None => serde_json::to_value(ExperimentConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            set_leaf(&mut doc, o)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let usage = |e: ets_core::Error| UsageError(e.to_string());
        self.policy.validate().map_err(usage)?;
        self.search.validate().map_err(usage)?;
        self.sim.validate().map_err(usage)?;
        if self.suite.parallelism == Some(0) {
            return Err(UsageError("suite.parallelism must be at least 1".into()));
        }
        if self.backend.kind == BackendKind::Http {
            self.backend.http()?;
            if self.suite.problems_file.is_none() {
                return Err(UsageError(
                    "backend.kind \"http\" needs suite.problems_file".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn parallelism(&self) -> usize {
        self.suite
            .parallelism
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn to_pretty_json(&self) -> anyhow::Result<String> {
        serde_json::to_string_pretty(self).context("serializing config")
    }
}

/// Set one leaf. The value is read as JSON when it parses (numbers, booleans,
/// null) and as a plain string otherwise; the leaf must already exist.
fn set_leaf(doc: &mut Value, o: &Override) -> Result<(), UsageError> {
    let mut parts = o.path.split('.');
    let section = parts.next().unwrap_or_default();
    let key = parts.next();
    let (Some(key), None) = (key, parts.next()) else {
        return Err(UsageError(format!(
            "override {:?} must look like section.key",
            o.path
        )));
    };
    let table = doc
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .ok_or_else(|| UsageError(format!("unknown config section {section:?}")))?;
    if !table.contains_key(key) {
        let mut known: Vec<&String> = table.keys().collect();
        known.sort();
        return Err(UsageError(format!(
            "unknown field {}; {section} has {}",
            o.path,
            known
                .iter()
                .map(|k| k.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let value = serde_json::from_str(&o.value).unwrap_or_else(|_| Value::String(o.value.clone()));
    table.insert(key.to_string(), value);
    let probe: Result<ExperimentConfig, _> = serde_json::from_value(doc.clone());
    probe
        .map(|_| ())
        .map_err(|e| UsageError(format!("--{} {}: {e}", o.path, o.value)))
}
