use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use homegate_core::backend::{Backend, BackendError, BackendResponse, MockBackend, MockRules};
use homegate_core::corpus::{corpus_stats, load_corpus, ValidationMode};
use homegate_core::evalbench::{
    compare_reports, parse_report_json, render_comparison_markdown, render_report, replay_log, run_eval,
    weighted_accuracy, EvalConfig, EvalError, EvalReport, ReportFormat, SubsetResult, CSV_HEADER,
};
use homegate_core::pipeline::PipelineConfig;
use homegate_core::prompting::{PromptMode, PromptText};
use homegate_core::{KnowledgeBase, Label, Sample};

const COUNTS: [usize; 12] = [16, 29, 53, 154, 30, 232, 91, 6, 1093, 9872, 26, 311];
const IMPROVED: [f64; 12] = [
    1.0, 0.6957, 0.5882, 0.5132, 0.4483, 0.4178, 0.5612, 0.6667, 0.9954, 0.9921, 1.0, 0.9777,
];
const SFT_3B: [f64; 12] = [
    1.0, 0.7826, 0.3725, 0.5461, 0.1724, 0.3584, 0.4796, 0.1111, 0.9891, 0.9948, 0.96, 0.9172,
];

fn maps(acc: &[f64; 12]) -> (BTreeMap<u8, f64>, BTreeMap<u8, usize>) {
    (
        (0u8..12).zip(acc.iter().copied()).collect(),
        (0u8..12).zip(COUNTS).collect(),
    )
}

#[test]
fn weighted_accuracy_reproduces_published_columns() {
    let (a, n) = maps(&IMPROVED);
    let w = weighted_accuracy(&a, &n).unwrap();
    assert!((w - 0.9675).abs() <= 0.002, "{w}");
    let (a, n) = maps(&SFT_3B);
    let w = weighted_accuracy(&a, &n).unwrap();
    assert!((w - 0.9644).abs() <= 0.002, "{w}");
}

fn mini_corpus() -> Vec<Sample> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini_corpus.jsonl");
    let loaded = load_corpus(path, ValidationMode::Benchmark).unwrap();
    assert!(loaded.errors.is_empty(), "{:?}", loaded.errors);
    loaded.samples
}

#[test]
fn mini_corpus_has_the_expected_shape() {
    let stats = corpus_stats(&mini_corpus());
    let want = [4, 6, 6, 10, 6, 12, 8, 4, 16, 32, 6, 10];
    for (t, n) in want.iter().enumerate() {
        assert_eq!(stats.count(t as u8), *n, "type {t}");
    }
    assert_eq!(stats.total, 120);
}

fn rules() -> MockRules {
    MockRules::always(Label::Reject)
        .rule("打开", Label::Accept)
        .rule("关", Label::Accept)
        .rule("播放", Label::Accept)
        .rule("调", Label::Accept)
        .rule("小爱", Label::Accept)
        .rule("天气", Label::Accept)
        .rule("帮我", Label::Accept)
}

fn config(mode: PromptMode) -> EvalConfig {
    EvalConfig {
        pipeline: PipelineConfig::with_mode(mode),
        label: mode.as_str().into(),
        concurrency: 8,
        ..Default::default()
    }
}

async fn eval(corpus: &[Sample], cfg: &EvalConfig) -> (EvalReport, String) {
    let out = run_eval(
        corpus,
        cfg,
        Arc::new(MockBackend::new(rules())),
        Arc::new(KnowledgeBase::in_memory()),
    )
    .await
    .unwrap();
    let log = out.log_text();
    (out.report, log)
}

/// Independent recount of what the mock should score.
fn expected_subsets(corpus: &[Sample]) -> BTreeMap<u8, (usize, usize)> {
    let r = rules();
    let mut m: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for s in corpus {
        let e = m.entry(s.type_id).or_default();
        e.0 += 1;
        if r.decide(s.text.trim()) == s.label {
            e.1 += 1;
        }
    }
    m
}

#[tokio::test]
async fn report_matches_an_independent_recount() {
    let corpus = mini_corpus();
    let (report, _) = eval(&corpus, &config(PromptMode::Generic)).await;
    let expected = expected_subsets(&corpus);
    assert_eq!(report.per_subset.len(), expected.len());
    for s in &report.per_subset {
        let (n, correct) = expected[&s.type_id];
        assert_eq!((s.n, s.correct), (n, correct), "type {}", s.type_id);
        assert_eq!(s.n, s.correct + s.false_accept + s.false_reject + s.parse_failures);
        assert_eq!(s.accuracy, correct as f64 / n as f64);
    }
    let correct: usize = expected.values().map(|v| v.1).sum();
    assert!((report.weighted_accuracy - correct as f64 / 120.0).abs() < 1e-12);
    assert_eq!(report.total, 120);
    assert_eq!(report.degraded, 0);
    assert!(report.usable);
}

#[tokio::test]
async fn runs_are_reproducible() {
    let corpus = mini_corpus();
    for mode in PromptMode::ALL {
        let a = eval(&corpus, &config(mode)).await;
        let b = eval(&corpus, &config(mode)).await;
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(
            render_report(&a.0, ReportFormat::Json),
            render_report(&b.0, ReportFormat::Json)
        );
    }
}

#[tokio::test]
async fn isolated_runs_ignore_corpus_order() {
    let corpus = mini_corpus();
    let cfg = config(PromptMode::WithHistoryAndCases);
    let (base, base_log) = eval(&corpus, &cfg).await;
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for _ in 0..5 {
        let mut shuffled = corpus.clone();
        shuffled.shuffle(&mut rng);
        let (r, log) = eval(&shuffled, &cfg).await;
        assert_eq!(r, base);
        let mut a: Vec<&str> = base_log.lines().collect();
        let mut b: Vec<&str> = log.lines().collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}

#[tokio::test]
async fn concurrency_does_not_change_results() {
    let corpus = mini_corpus();
    let mut cfg = config(PromptMode::WithHistory);
    cfg.concurrency = 1;
    let serial = eval(&corpus, &cfg).await;
    cfg.concurrency = 32;
    assert_eq!(eval(&corpus, &cfg).await, serial);
}

#[tokio::test]
async fn replay_rebuilds_the_report() {
    let corpus = mini_corpus();
    let (report, log) = eval(&corpus, &config(PromptMode::WithHistory)).await;
    assert_eq!(log.lines().count(), 120);
    assert_eq!(replay_log(&log).unwrap(), report);

    let json = render_report(&report, ReportFormat::Json);
    assert_eq!(parse_report_json(&json).unwrap(), report);

    let mut mixed = log.clone();
    let (other, other_log) = eval(&corpus, &config(PromptMode::Generic)).await;
    assert_ne!(other.run_id, report.run_id);
    mixed.push_str(other_log.lines().next().unwrap());
    assert!(matches!(replay_log(&mixed), Err(EvalError::Replay { line: 121, .. })));
}

#[tokio::test]
async fn history_reaches_the_prompt_in_history_modes() {
    let corpus = mini_corpus();
    let (_, generic) = eval(&corpus, &config(PromptMode::Generic)).await;
    let (_, with_history) = eval(&corpus, &config(PromptMode::WithHistory)).await;
    let used = |log: &str| -> usize {
        log.lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["decision"]["history_used"].as_u64().unwrap() as usize
            })
            .sum()
    };
    let expected: usize = corpus.iter().map(|s| s.history.len()).sum();
    assert_eq!(used(&generic), 0);
    assert_eq!(used(&with_history), expected);
}

fn subset(type_id: u8, n: usize, correct: usize) -> SubsetResult {
    SubsetResult {
        type_id,
        n,
        correct,
        accuracy: correct as f64 / n as f64,
        false_accept: 0,
        false_reject: n - correct,
        parse_failures: 0,
    }
}

fn report(label: &str, subsets: Vec<SubsetResult>) -> EvalReport {
    let total = subsets.iter().map(|s| s.n).sum::<usize>();
    let correct = subsets.iter().map(|s| s.correct).sum::<usize>();
    EvalReport {
        run_id: label.into(),
        config_fingerprint: label.into(),
        label: label.into(),
        mode: PromptMode::Generic,
        sequential: false,
        total,
        per_subset: subsets,
        weighted_accuracy: correct as f64 / total as f64,
        latency_p50_ms: 0.0,
        latency_p95_ms: 0.0,
        tolerant_fallbacks: 0,
        degraded: 0,
        usable: true,
    }
}

#[test]
fn comparison_deltas_match_hand_computed_values() {
    let a = report("a", vec![subset(1, 4, 1), subset(9, 10, 8)]);
    let b = report("b", vec![subset(1, 4, 3), subset(9, 10, 7)]);
    let cmp = compare_reports(&a, &b).unwrap();
    assert_eq!(cmp.per_subset[0].delta, 0.5);
    assert!((cmp.per_subset[1].delta + 0.1).abs() < 1e-12);
    // 9/14 vs 10/14
    assert!((cmp.weighted_delta - 1.0 / 14.0).abs() < 1e-12);

    let c = report("c", vec![subset(1, 4, 1)]);
    assert!(matches!(compare_reports(&a, &c), Err(EvalError::MismatchedKeys(_))));

    let md = render_comparison_markdown(&[a.clone(), b]);
    assert_eq!(
        md,
        "| Subsets | a | b |\n|---|---:|---:|\n| 1 | 0.2500 | 0.7500 |\n| 9 | 0.8000 | 0.7000 |\n| Weighted | 0.6429 | 0.7143 |\n"
    );
    let csv = render_report(&a, ReportFormat::Csv);
    assert_eq!(csv, format!("{CSV_HEADER}\n1,4,1,0.25,0,3,0\n9,10,8,0.8,0,2,0\n"));
}

#[derive(Debug)]
struct Down;

#[async_trait]
impl Backend for Down {
    async fn classify(&self, _: &PromptText) -> Result<BackendResponse, BackendError> {
        Err(BackendError::Transport {
            attempts: 1,
            message: "connection refused".into(),
        })
    }
    async fn probe(&self) -> bool {
        false
    }
    fn describe(&self) -> String {
        "down".into()
    }
}

#[tokio::test]
async fn unreachable_backend_marks_the_run_unusable() {
    let corpus = mini_corpus();
    let err = run_eval(
        &corpus,
        &config(PromptMode::Generic),
        Arc::new(Down),
        Arc::new(KnowledgeBase::in_memory()),
    )
    .await
    .unwrap_err();
    let EvalError::BackendUnreachable(outcome) = err else {
        panic!("wrong error");
    };
    assert!(!outcome.report.usable);
    assert_eq!(outcome.report.degraded, 120);
    assert!(outcome.report.per_subset.iter().all(|s| s.parse_failures == s.n));
    assert_eq!(outcome.log_lines.len(), 120);
}

#[tokio::test]
async fn empty_corpus_is_an_error() {
    assert!(matches!(
        run_eval(
            &[],
            &EvalConfig::default(),
            Arc::new(MockBackend::new(rules())),
            Arc::new(KnowledgeBase::in_memory())
        )
        .await,
        Err(EvalError::EmptyCorpus)
    ));
}

#[tokio::test]
async fn sequential_mode_learns_from_mistakes() {
    // The same household-specific utterance appears twice; the mock gets it
    // wrong until a matching case is retrieved.
    let mk = |id: &str| Sample::new(id, 9, "宝宝开饭").unwrap();
    let corpus = vec![mk("s1"), Sample::new("s2", 8, "今天天气").unwrap(), mk("s3")];
    let cfg = EvalConfig {
        sequential: true,
        ..config(PromptMode::WithHistoryAndCases)
    };
    let kb = Arc::new(KnowledgeBase::in_memory());
    let out = run_eval(
        &corpus,
        &cfg,
        Arc::new(MockBackend::new(rules().following_cases())),
        kb.clone(),
    )
    .await
    .unwrap();
    let verdicts: Vec<String> = out
        .log_lines
        .iter()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["decision"]["verdict"].to_string())
        .collect();
    assert_eq!(verdicts, ["\"reject\"", "\"accept\"", "\"accept\""]);
    assert_eq!(kb.kb_stats(homegate_core::evalbench::SEQUENTIAL_HOUSEHOLD).total, 1);
}
