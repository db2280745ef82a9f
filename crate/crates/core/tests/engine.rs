use ets_core::backend::http::{HttpBackend, HttpConfig};
use ets_core::backend::mock::MockServer;
use ets_core::backend::{Providers, SimBackend};
use ets_core::engine::AnswerKey;
use ets_core::*;

fn sim(depth: u32) -> SimConfig {
    SimConfig {
        depth,
        ..SimConfig::default()
    }
}

fn policy(method: Method, width: u32) -> PolicyConfig {
    PolicyConfig {
        method,
        width,
        ..PolicyConfig::default()
    }
}

fn jsonl(results: &[ProblemResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

#[test]
fn width_one_follows_a_single_chain() {
    let cfg = sim(3);
    let backend = SimBackend::new(cfg.clone());
    let problem = Problem::sim(11, 0, &cfg);
    for method in [Method::Beam, Method::Rebase, Method::Dvts, Method::Ets] {
        let p = PolicyConfig {
            keep_k: KeepK::Fixed(1),
            ..policy(method, 1)
        };
        let r = run_problem(
            &problem,
            &p,
            &SearchConfig::default(),
            Providers::from_backend(&backend),
        );
        assert!(r.error.is_none(), "{method:?}: {:?}", r.error);
        assert_eq!(r.completed.len(), 1, "{method:?}");
        assert_eq!(r.metrics.steps(), 3, "{method:?}");
        assert_eq!(r.metrics.model_calls, 3);
        assert_eq!(
            r.final_answer.as_deref(),
            Some(r.completed[0].answer.as_str())
        );
        // a chain keeps exactly one path of three steps plus the prompt
        let expected: Vec<u64> = (1..=3)
            .map(|d| cfg.prompt_tokens + d * cfg.tokens_per_step)
            .collect();
        assert_eq!(r.metrics.per_step_kv_tokens, expected);
    }
}

#[test]
fn width_four_completes_in_one_round() {
    let cfg = sim(1);
    let backend = SimBackend::new(cfg.clone());
    for index in 0..5 {
        let problem = Problem::sim(3, index, &cfg);
        let r = run_problem(
            &problem,
            &policy(Method::Ets, 4),
            &SearchConfig::default(),
            Providers::from_backend(&backend),
        );
        assert!(r.error.is_none());
        assert_eq!(r.completed.len(), 4);
        assert_eq!(r.metrics.steps(), 1);
        assert_eq!(r.metrics.solves, 0);
        assert!(r.correct.is_some());
    }
}

#[test]
fn ets_keeps_less_kv_than_rebase() {
    let cfg = SimConfig::default();
    let backend = SimBackend::new(cfg.clone());
    let providers = Providers::from_backend(&backend);
    let problems = Problem::sim_suite(20_240_601, 100, &cfg);
    let search = SearchConfig::default();
    let rebase = run_suite(
        &problems,
        &policy(Method::Rebase, 32),
        &search,
        providers,
        4,
    )
    .unwrap();
    let ets = run_suite(
        &problems,
        &PolicyConfig {
            lambda_b: 1.0,
            ..policy(Method::Ets, 32)
        },
        &search,
        providers,
        4,
    )
    .unwrap();
    let wins = rebase
        .iter()
        .zip(&ets)
        .filter(|(r, e)| e.metrics.cumulative_kv_tokens <= r.metrics.cumulative_kv_tokens)
        .count();
    assert!(
        wins >= 90,
        "ets at or below rebase KV on {wins} of 100 problems"
    );
}

#[test]
fn results_do_not_depend_on_parallelism() {
    let cfg = SimConfig::default();
    let backend = SimBackend::new(cfg.clone());
    let providers = Providers::from_backend(&backend);
    let problems = Problem::sim_suite(5, 24, &cfg);
    let p = policy(Method::Ets, 16);
    let search = SearchConfig {
        trace: true,
        ..SearchConfig::default()
    };
    let one = run_suite(&problems, &p, &search, providers, 1).unwrap();
    let four = run_suite(&problems, &p, &search, providers, 4).unwrap();
    assert_eq!(jsonl(&one), jsonl(&four));
    let ids: Vec<&str> = one.iter().map(|r| r.problem_id.as_str()).collect();
    let expected: Vec<&str> = problems.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, expected);
}

#[test]
fn seeds_change_the_search() {
    let cfg = SimConfig::default();
    let backend = SimBackend::new(cfg.clone());
    let problem = Problem::sim(1, 0, &cfg);
    let p = policy(Method::Rebase, 16);
    let a = run_problem(
        &problem,
        &p,
        &SearchConfig::default(),
        Providers::from_backend(&backend),
    );
    let b = run_problem(
        &problem,
        &p,
        &SearchConfig {
            seed: 9,
            ..SearchConfig::default()
        },
        Providers::from_backend(&backend),
    );
    assert_ne!(jsonl(&[a]), jsonl(&[b]));
}

#[test]
fn mock_http_matches_direct_sim() {
    let cfg = SimConfig::default();
    let direct = SimBackend::new(cfg.clone());
    let server =
        MockServer::start(SimBackend::new(cfg.clone()), "127.0.0.1:0".parse().unwrap()).unwrap();
    let http = HttpBackend::new(HttpConfig::with_base_url(&server.base_url())).unwrap();
    let problems = Problem::sim_suite(77, 6, &cfg);
    let p = policy(Method::Ets, 8);
    let search = SearchConfig::default();
    let a = run_suite(&problems, &p, &search, Providers::from_backend(&direct), 2).unwrap();
    let b = run_suite(&problems, &p, &search, Providers::from_backend(&http), 2).unwrap();
    assert_eq!(jsonl(&a), jsonl(&b));
    assert!(a
        .iter()
        .all(|r| r.metrics.embed_calls > 0 || r.metrics.solves == 0));
}

#[test]
fn unreachable_backend_aborts_with_transport_error() {
    let cfg = SimConfig::default();
    let mut http_cfg = HttpConfig::with_base_url("http://127.0.0.1:9");
    http_cfg.generate_timeout = std::time::Duration::from_millis(200);
    let http = HttpBackend::new(http_cfg).unwrap();
    let problem = Problem::sim(1, 0, &cfg);
    let r = run_problem(
        &problem,
        &policy(Method::Rebase, 4),
        &SearchConfig::default(),
        Providers::from_backend(&http),
    );
    assert!(r.aborted());
    assert_eq!(r.final_answer, None);
    assert_eq!(r.correct, Some(false));
    assert_eq!(r.error.unwrap().class, "transport");
}

#[test]
fn exact_answer_keys_grade_results() {
    let cfg = sim(2);
    let backend = SimBackend::new(cfg.clone());
    let mut problem = Problem::sim(4, 1, &cfg);
    let graded = run_problem(
        &problem,
        &policy(Method::Rebase, 8),
        &SearchConfig::default(),
        Providers::from_backend(&backend),
    );
    let answer = graded.final_answer.clone().unwrap();
    problem.answer_key = Some(AnswerKey::Exact(answer));
    let r = run_problem(
        &problem,
        &policy(Method::Rebase, 8),
        &SearchConfig::default(),
        Providers::from_backend(&backend),
    );
    assert_eq!(r.correct, Some(true));
    problem.answer_key = None;
    let r = run_problem(
        &problem,
        &policy(Method::Rebase, 8),
        &SearchConfig::default(),
        Providers::from_backend(&backend),
    );
    assert_eq!(r.correct, None);
}

#[test]
fn summary_counts_and_overhead() {
    let cfg = SimConfig::default();
    let backend = SimBackend::new(cfg.clone());
    let problems = Problem::sim_suite(8, 10, &cfg);
    let results = run_suite(
        &problems,
        &policy(Method::Ets, 16),
        &SearchConfig::default(),
        Providers::from_backend(&backend),
        2,
    )
    .unwrap();
    let s = SuiteSummary::from_results(&results, 2.0);
    assert_eq!(s.problems, 10);
    assert_eq!(s.graded, 10);
    assert!((s.mean_cumulative_kv_bytes - 2.0 * s.mean_cumulative_kv_tokens).abs() < 1e-9);
    let f = s.overhead_fraction();
    assert!((0.0..=1.0).contains(&f));
    for r in &results {
        assert_eq!(
            r.metrics.cumulative_kv_tokens,
            r.metrics.per_step_kv_tokens.iter().sum::<u64>()
        );
    }
}
