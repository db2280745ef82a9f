//! Experiment runner for the tree-search engine: single runs, method
//! comparisons, `lambda_b` sweeps and reports over saved results.
//!
//! Result records go to JSONL, aggregates to CSV. Both are reproducible byte
//! for byte; wall-clock timing and the overhead fraction go to a JSON sidecar.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use ets_core::backend::http::HttpBackend;
use ets_core::backend::{Providers, SimBackend};
use ets_core::engine::AnswerKey;
use ets_core::metrics::Timing;
use ets_core::streams::hash_strs;
use ets_core::{run_suite, Method, PolicyConfig, Problem, ProblemResult, SuiteSummary};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod config;

use config::{BackendKind, ExperimentConfig};

/// A bad flag, config file or missing input; exits with status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Accuracy drop, in points, that a sweep still accepts.
pub const SWEEP_TOLERANCE: f64 = 0.2;

enum Backend {
    Sim(SimBackend),
    Http(HttpBackend),
}

impl Backend {
    fn new(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        Ok(match cfg.backend.kind {
            BackendKind::Sim => Backend::Sim(SimBackend::new(cfg.sim.clone())),
            BackendKind::Http => Backend::Http(HttpBackend::new(cfg.backend.http()?)?),
        })
    }

    fn providers(&self) -> Providers<'_> {
        match self {
            Backend::Sim(b) => Providers::from_backend(b),
            Backend::Http(b) => Providers::from_backend(b),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemLine {
    id: String,
    prompt: String,
    #[serde(default)]
    prompt_tokens: u64,
    seed: Option<u64>,
    answer: Option<String>,
}

pub fn load_problems(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Problem>> {
    let Some(path) = &cfg.suite.problems_file else {
        return Ok(Problem::sim_suite(
            cfg.suite.seed,
            cfg.suite.problems,
            &cfg.sim,
        ));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read problems file {}: {e}", path.display())))?;
    let mut problems = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let p: ProblemLine = serde_json::from_str(line)
            .map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), n + 1)))?;
        problems.push(Problem {
            seed: p.seed.unwrap_or_else(|| hash_strs(&[&p.id])),
            id: p.id,
            prompt: p.prompt,
            prompt_tokens: p.prompt_tokens,
            answer_key: p.answer.map(AnswerKey::Exact),
        });
    }
    Ok(problems)
}

/// One configuration run over the suite.
pub struct Arm {
    pub label: String,
    pub policy: PolicyConfig,
    pub results: Vec<ProblemResult>,
    pub summary: SuiteSummary,
    pub wall: Duration,
}

impl Arm {
    pub fn jsonl(&self) -> String {
        self.results
            .iter()
            .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
            .collect()
    }

    pub fn aborted(&self) -> usize {
        self.summary.aborted
    }
}

pub fn run_arm(
    label: &str,
    cfg: &ExperimentConfig,
    policy: &PolicyConfig,
    problems: &[Problem],
) -> anyhow::Result<Arm> {
    policy.validate().map_err(|e| UsageError(e.to_string()))?;
    let backend = Backend::new(cfg)?;
    let started = Instant::now();
    let results = run_suite(
        problems,
        policy,
        &cfg.search,
        backend.providers(),
        cfg.parallelism(),
    )?;
    let wall = started.elapsed();
    let summary = SuiteSummary::from_results(&results, cfg.search.kv_bytes_per_token);
    log::info!(
        "{label}: accuracy {:.2} mean KV {:.1} in {:.1}s",
        summary.accuracy,
        summary.mean_cumulative_kv_tokens,
        wall.as_secs_f64()
    );
    Ok(Arm {
        label: label.to_string(),
        policy: policy.clone(),
        results,
        summary,
        wall,
    })
}

/// One CSV row; every field is a pure function of the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: String,
    pub width: u32,
    pub keep_k: String,
    pub lambda_b: f64,
    pub lambda_d: f64,
    pub problems: usize,
    pub graded: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub unanswered: usize,
    pub aborted: usize,
    pub mean_cumulative_kv_tokens: f64,
    pub mean_cumulative_kv_bytes: f64,
    pub mean_peak_kv_tokens: f64,
    /// Baseline mean cumulative KV over this row's; empty without a baseline.
    pub kv_reduction: Option<f64>,
    /// Mean generated tokens, the generation FLOPs proxy.
    pub mean_generated_tokens: f64,
    pub mean_model_calls: f64,
    pub mean_reward_calls: f64,
    pub mean_embed_calls: f64,
    pub solves: u64,
    pub solves_nonoptimal: u64,
}

impl SummaryRow {
    pub fn new(
        label: &str,
        policy: &PolicyConfig,
        s: &SuiteSummary,
        baseline_kv: Option<f64>,
    ) -> Self {
        SummaryRow {
            label: label.to_string(),
            method: policy.method.to_string(),
            width: policy.width,
            keep_k: policy.keep_k.to_string(),
            lambda_b: policy.lambda_b,
            lambda_d: policy.lambda_d,
            problems: s.problems,
            graded: s.graded,
            correct: s.correct,
            accuracy: s.accuracy,
            unanswered: s.unanswered,
            aborted: s.aborted,
            mean_cumulative_kv_tokens: s.mean_cumulative_kv_tokens,
            mean_cumulative_kv_bytes: s.mean_cumulative_kv_bytes,
            mean_peak_kv_tokens: s.mean_peak_kv_tokens,
            kv_reduction: baseline_kv.and_then(|b| kv_ratio(b, s.mean_cumulative_kv_tokens)),
            mean_generated_tokens: s.mean_generated_tokens,
            mean_model_calls: s.mean_model_calls,
            mean_reward_calls: s.mean_reward_calls,
            mean_embed_calls: s.mean_embed_calls,
            solves: s.solves,
            solves_nonoptimal: s.solves_nonoptimal,
        }
    }
}

fn kv_ratio(baseline: f64, candidate: f64) -> Option<f64> {
    (candidate > 0.0).then(|| baseline / candidate)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `{name}.jsonl` and return its digest.
fn write_jsonl(dir: &Path, name: &str, arm: &Arm) -> anyhow::Result<String> {
    let body = arm.jsonl();
    let path = dir.join(format!("{name}.jsonl"));
    std::fs::write(&path, &body).with_context(|| format!("writing {}", path.display()))?;
    let digest = sha256_hex(body.as_bytes());
    println!("sha256 {}  {}", digest, path.display());
    Ok(digest)
}

#[derive(Debug, Serialize)]
struct ArmTiming {
    label: String,
    wall_seconds: f64,
    #[serde(flatten)]
    timing: Timing,
    overhead_fraction: f64,
    results_sha256: String,
}

/// Everything that varies between identical runs.
#[derive(Debug, Serialize)]
struct Sidecar {
    command: String,
    finished_unix_seconds: u64,
    parallelism: usize,
    arms: Vec<ArmTiming>,
}

fn write_sidecar(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    arms: &[(&Arm, String)],
) -> anyhow::Result<()> {
    let sidecar = Sidecar {
        command: command.to_string(),
        finished_unix_seconds: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        parallelism: cfg.parallelism(),
        arms: arms
            .iter()
            .map(|(arm, digest)| ArmTiming {
                label: arm.label.clone(),
                wall_seconds: arm.wall.as_secs_f64(),
                timing: arm.summary.timing,
                overhead_fraction: arm.summary.overhead_fraction(),
                results_sha256: digest.clone(),
            })
            .collect(),
    };
    for (arm, _) in arms {
        println!(
            "{}: overhead fraction {:.4}",
            arm.label,
            arm.summary.overhead_fraction()
        );
    }
    let path = dir.join("timing.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

fn prepare_out(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), cfg.to_pretty_json()? + "\n")?;
    Ok(())
}

/// What a command produced, for the exit status.
#[derive(Debug, Default, PartialEq)]
pub struct Outcome {
    pub aborted: usize,
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Outcome> {
    prepare_out(out, cfg)?;
    let problems = load_problems(cfg)?;
    let arm = run_arm(&cfg.policy.method.to_string(), cfg, &cfg.policy, &problems)?;
    let digest = write_jsonl(out, "results", &arm)?;
    write_csv(
        &out.join("summary.csv"),
        &[SummaryRow::new(&arm.label, &arm.policy, &arm.summary, None)],
    )?;
    write_sidecar(out, "run", cfg, &[(&arm, digest)])?;
    print_summary(&arm);
    Ok(Outcome {
        aborted: arm.aborted(),
    })
}

fn print_summary(arm: &Arm) {
    let s = &arm.summary;
    println!(
        "{}: {} problems, accuracy {:.2}%, mean cumulative KV {:.1} tokens, {} unanswered, {} aborted",
        arm.label, s.problems, s.accuracy, s.mean_cumulative_kv_tokens, s.unanswered, s.aborted
    );
}

pub fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, UsageError>
where
    T::Err: fmt::Display,
{
    let items: Result<Vec<T>, _> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<T>()
                .map_err(|e| UsageError(format!("--{flag} {x:?}: {e}")))
        })
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(UsageError(format!("--{flag} needs at least one value")));
    }
    Ok(items)
}

/// Run every (method, width) pair. KV reduction is taken against the
/// first-listed method at the same width.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    out: &Path,
    methods: &[Method],
    widths: &[u32],
) -> anyhow::Result<Outcome> {
    if methods.len() < 2 {
        return Err(UsageError("compare needs at least two methods".into()).into());
    }
    prepare_out(out, cfg)?;
    let problems = load_problems(cfg)?;
    let mut arms = Vec::new();
    for &width in widths {
        for &method in methods {
            let policy = PolicyConfig {
                method,
                width,
                ..cfg.policy.clone()
            };
            arms.push(run_arm(
                &format!("{method}-w{width}"),
                cfg,
                &policy,
                &problems,
            )?);
        }
    }
    let mut rows = Vec::new();
    let mut digests = Vec::new();
    for (i, arm) in arms.iter().enumerate() {
        let base = &arms[i - i % methods.len()];
        rows.push(SummaryRow::new(
            &arm.label,
            &arm.policy,
            &arm.summary,
            Some(base.summary.mean_cumulative_kv_tokens),
        ));
        digests.push(write_jsonl(out, &arm.label, arm)?);
    }
    write_csv(&out.join("compare.csv"), &rows)?;
    let pairs: Vec<(&Arm, String)> = arms.iter().zip(digests).collect();
    write_sidecar(out, "compare", cfg, &pairs)?;
    for arm in &arms {
        print_summary(arm);
    }
    Ok(Outcome {
        aborted: arms.iter().map(Arm::aborted).sum(),
    })
}

/// Where a sweep's reference accuracy comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// The swept configuration at `lambda_b = 0`.
    LambdaZero,
    /// Another method with the same settings.
    Method(Method),
    /// The first row of a saved summary CSV.
    Csv(PathBuf),
}

impl std::str::FromStr for Reference {
    type Err = UsageError;

    fn from_str(s: &str) -> Result<Self, UsageError> {
        if s == "lambda0" {
            return Ok(Reference::LambdaZero);
        }
        if let Ok(m) = s.parse::<Method>() {
            return Ok(Reference::Method(m));
        }
        if s.ends_with(".csv") {
            return Ok(Reference::Csv(PathBuf::from(s)));
        }
        Err(UsageError(format!(
            "--reference {s:?}: expected lambda0, a method name, or a summary .csv file"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub lambda_b: f64,
    pub accuracy: f64,
    /// Reference accuracy minus this row's, in points.
    pub accuracy_drop: f64,
    pub mean_cumulative_kv_tokens: f64,
    pub kv_reduction: Option<f64>,
    pub solves_nonoptimal: u64,
    pub selected: bool,
}

/// Index of the largest `lambda_b` whose accuracy is at most
/// [`SWEEP_TOLERANCE`] points below the reference.
pub fn select_lambda(points: &[(f64, f64)], reference_accuracy: f64) -> Option<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, &(_, acc))| reference_accuracy - acc <= SWEEP_TOLERANCE + 1e-9)
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
}

fn reference_from_csv(path: &Path) -> Result<(f64, f64), UsageError> {
    let bad = |e: &dyn fmt::Display| UsageError(format!("reference {}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let row: SummaryRow = r
        .deserialize()
        .next()
        .ok_or_else(|| bad(&"no rows"))?
        .map_err(|e| bad(&e))?;
    Ok((row.accuracy, row.mean_cumulative_kv_tokens))
}

pub struct SweepOutcome {
    pub outcome: Outcome,
    pub selected: Option<f64>,
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    grid: &[f64],
    reference: &Reference,
) -> anyhow::Result<SweepOutcome> {
    if cfg.policy.method != Method::Ets {
        return Err(UsageError(format!(
            "sweep varies lambda_b, which only the ets method uses (policy.method is {})",
            cfg.policy.method
        ))
        .into());
    }
    if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(UsageError(format!("--grid value {bad} must be nonnegative")).into());
    }
    let reference_csv = match reference {
        Reference::Csv(path) => Some(reference_from_csv(path)?),
        _ => None,
    };
    prepare_out(out, cfg)?;
    let problems = load_problems(cfg)?;
    let mut arms = Vec::new();
    let (ref_accuracy, ref_kv) = match (reference, reference_csv) {
        (_, Some(pair)) => pair,
        (Reference::Method(m), None) => {
            let policy = PolicyConfig {
                method: *m,
                ..cfg.policy.clone()
            };
            let arm = run_arm(&format!("reference-{m}"), cfg, &policy, &problems)?;
            let pair = (arm.summary.accuracy, arm.summary.mean_cumulative_kv_tokens);
            arms.push(arm);
            pair
        }
        _ => {
            let policy = PolicyConfig {
                lambda_b: 0.0,
                ..cfg.policy.clone()
            };
            let arm = run_arm("reference-lambda0", cfg, &policy, &problems)?;
            let pair = (arm.summary.accuracy, arm.summary.mean_cumulative_kv_tokens);
            arms.push(arm);
            pair
        }
    };
    let first_swept = arms.len();
    for &lambda_b in grid {
        let policy = PolicyConfig {
            lambda_b,
            ..cfg.policy.clone()
        };
        arms.push(run_arm(
            &format!("ets-lb{lambda_b}"),
            cfg,
            &policy,
            &problems,
        )?);
    }
    let swept = &arms[first_swept..];
    let points: Vec<(f64, f64)> = swept
        .iter()
        .map(|a| (a.policy.lambda_b, a.summary.accuracy))
        .collect();
    let pick = select_lambda(&points, ref_accuracy);
    let rows: Vec<SweepRow> = swept
        .iter()
        .enumerate()
        .map(|(i, a)| SweepRow {
            label: a.label.clone(),
            lambda_b: a.policy.lambda_b,
            accuracy: a.summary.accuracy,
            accuracy_drop: ref_accuracy - a.summary.accuracy,
            mean_cumulative_kv_tokens: a.summary.mean_cumulative_kv_tokens,
            kv_reduction: kv_ratio(ref_kv, a.summary.mean_cumulative_kv_tokens),
            solves_nonoptimal: a.summary.solves_nonoptimal,
            selected: pick == Some(i),
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &rows)?;
    let mut digests = Vec::new();
    for arm in &arms {
        digests.push(write_jsonl(out, &arm.label, arm)?);
    }
    let pairs: Vec<(&Arm, String)> = arms.iter().zip(digests).collect();
    write_sidecar(out, "sweep", cfg, &pairs)?;
    println!("reference accuracy {ref_accuracy:.2}%");
    for r in &rows {
        println!(
            "lambda_b {:<6} accuracy {:6.2}% drop {:+.2} KV reduction {}{}",
            r.lambda_b,
            r.accuracy,
            r.accuracy_drop,
            r.kv_reduction.map_or("-".into(), |k| format!("{k:.3}x")),
            if r.selected { "  <- selected" } else { "" }
        );
    }
    let selected = pick.map(|i| rows[i].lambda_b);
    match selected {
        Some(l) => println!("selected lambda_b {l}"),
        None => {
            log::warn!("every lambda_b loses more than {SWEEP_TOLERANCE} points of accuracy");
            println!("selected lambda_b none");
        }
    }
    Ok(SweepOutcome {
        outcome: Outcome {
            aborted: arms.iter().map(Arm::aborted).sum(),
        },
        selected,
    })
}

pub fn read_results(path: &Path) -> Result<Vec<ProblemResult>, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| UsageError(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub input: String,
    pub problems: usize,
    pub graded: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub unanswered: usize,
    pub aborted: usize,
    pub mean_cumulative_kv_tokens: f64,
    pub mean_cumulative_kv_bytes: f64,
    pub mean_peak_kv_tokens: f64,
    pub kv_reduction: Option<f64>,
    pub mean_generated_tokens: f64,
    pub mean_model_calls: f64,
    pub solves_nonoptimal: u64,
}

/// Summarize saved result files; KV reduction is against the first input.
pub fn cmd_report(inputs: &[PathBuf], kv_bytes_per_token: f64, out: &Path) -> anyhow::Result<()> {
    if inputs.is_empty() {
        return Err(UsageError("report needs at least one --input".into()).into());
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for path in inputs {
        let results = read_results(path)?;
        let s = SuiteSummary::from_results(&results, kv_bytes_per_token);
        let base = rows
            .first()
            .map_or(s.mean_cumulative_kv_tokens, |r| r.mean_cumulative_kv_tokens);
        rows.push(ReportRow {
            input: path.display().to_string(),
            problems: s.problems,
            graded: s.graded,
            correct: s.correct,
            accuracy: s.accuracy,
            unanswered: s.unanswered,
            aborted: s.aborted,
            mean_cumulative_kv_tokens: s.mean_cumulative_kv_tokens,
            mean_cumulative_kv_bytes: s.mean_cumulative_kv_bytes,
            mean_peak_kv_tokens: s.mean_peak_kv_tokens,
            kv_reduction: kv_ratio(base, s.mean_cumulative_kv_tokens),
            mean_generated_tokens: s.mean_generated_tokens,
            mean_model_calls: s.mean_model_calls,
            solves_nonoptimal: s.solves_nonoptimal,
        });
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(out, &rows)?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        writeln!(
            stdout,
            "{}: accuracy {:.2}% KV {:.1} reduction {}",
            r.input,
            r.accuracy,
            r.mean_cumulative_kv_tokens,
            r.kv_reduction.map_or("-".into(), |k| format!("{k:.3}x"))
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_selection_rule() {
        // reference 50.0; drops of 0.0, 0.2, 0.21 and 0.1 points
        let points = [(1.0, 50.0), (1.5, 49.8), (2.0, 49.79), (0.5, 49.9)];
        assert_eq!(select_lambda(&points, 50.0), Some(1));
        // improvements count as no drop
        assert_eq!(select_lambda(&[(1.0, 49.0), (3.0, 51.0)], 50.0), Some(1));
        assert_eq!(select_lambda(&[(1.0, 49.7), (2.0, 40.0)], 50.0), None);
        assert_eq!(select_lambda(&[], 50.0), None);
    }

    #[test]
    fn references_parse() {
        assert_eq!(
            "lambda0".parse::<Reference>().unwrap(),
            Reference::LambdaZero
        );
        assert_eq!(
            "rebase".parse::<Reference>().unwrap(),
            Reference::Method(Method::Rebase)
        );
        assert_eq!(
            "a/b.csv".parse::<Reference>().unwrap(),
            Reference::Csv("a/b.csv".into())
        );
        assert!("nothing".parse::<Reference>().is_err());
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<u32>("widths", "16, 64").unwrap(), vec![16, 64]);
        assert!(parse_list::<u32>("widths", "").is_err());
        assert!(parse_list::<Method>("methods", "ets,greedy").is_err());
    }
}
