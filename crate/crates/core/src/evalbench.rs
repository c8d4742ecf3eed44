//! Evaluation harness: runs a corpus through a backend × prompt-mode
//! configuration and reports per-subset accuracy, weighted accuracy and
//! confusion counts.
//!
//! Every run also yields a decision log (one line per sample: the corpus
//! record plus `run` and `decision` objects). [`replay_log`] rebuilds the
//! exact report from such a log without calling the backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::Backend;
use crate::corpus::{sample_from_object, Label, Sample, Timestamp};
use crate::kb::KnowledgeBase;
use crate::memory::{MemoryStore, DEFAULT_HISTORY_CAPACITY};
use crate::pipeline::{Decision, FailurePolicy, Pipeline, PipelineConfig, PipelineError};
use crate::prompting::PromptMode;

/// Household id used when a sample carries none.
pub const EVAL_HOUSEHOLD: &str = "eval";
/// Household id of the single stream in sequential mode.
pub const SEQUENTIAL_HOUSEHOLD: &str = "eval-sequential";
/// Fixed evaluation clock so runs are reproducible.
pub const DEFAULT_EVAL_NOW: Timestamp = 1_700_000_000;
/// Spacing between consecutive samples in sequential mode.
pub const SEQUENTIAL_STEP_SECS: i64 = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pipeline: PipelineConfig,
    /// Column name in rendered tables.
    pub label: String,
    pub concurrency: usize,
    /// Replay the corpus as one household stream, feeding mistakes back into the KB.
    pub sequential: bool,
    pub now: Timestamp,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            label: "run".into(),
            concurrency: 4,
            sequential: false,
            now: DEFAULT_EVAL_NOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub type_id: u8,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub false_accept: usize,
    pub false_reject: usize,
    /// Samples without a usable classifier verdict (parse or backend failure).
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config_fingerprint: String,
    pub label: String,
    pub mode: PromptMode,
    pub sequential: bool,
    pub total: usize,
    pub per_subset: Vec<SubsetResult>,
    pub weighted_accuracy: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    /// Verdicts recovered only by tolerant extraction.
    pub tolerant_fallbacks: usize,
    pub degraded: usize,
    /// False when the backend could not be reached for any sample.
    pub usable: bool,
}

/// Run identity carried on every decision-log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub config_fingerprint: String,
    pub label: String,
    pub mode: PromptMode,
    pub sequential: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Decision log lines in corpus order.
    pub log_lines: Vec<String>,
}

impl EvalOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for line in &self.log_lines {
            s.push_str(line);
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("subset keys differ: {0}")]
    MismatchedKeys(String),
    #[error("total count is zero")]
    ZeroTotal,
    #[error("backend unreachable for every sample; partial results are unusable")]
    BackendUnreachable(Box<EvalOutcome>),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("decision log line {line}: {message}")]
    Replay { line: usize, message: String },
}

/// Σ nᵢ·accᵢ / Σ nᵢ.
pub fn weighted_accuracy(per_subset_acc: &BTreeMap<u8, f64>, counts: &BTreeMap<u8, usize>) -> Result<f64, EvalError> {
    let a: BTreeSet<_> = per_subset_acc.keys().collect();
    let c: BTreeSet<_> = counts.keys().collect();
    if a != c {
        return Err(EvalError::MismatchedKeys(format!("accuracies {a:?} vs counts {c:?}")));
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(EvalError::ZeroTotal);
    }
    let weighted: f64 = counts
        .iter()
        .map(|(k, &n)| n as f64 * per_subset_acc[k])
        .sum();
    Ok(weighted / total as f64)
}

fn sha_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn config_fingerprint(config: &EvalConfig, backend: &dyn Backend) -> String {
    let cfg = serde_json::json!({
        "pipeline": config.pipeline,
        "label": config.label,
        "sequential": config.sequential,
        "now": config.now,
        "backend": backend.describe(),
    });
    sha_hex(&[cfg.to_string().as_bytes()])[..16].to_string()
}

/// Order-independent digest of the corpus.
fn corpus_digest(corpus: &[Sample]) -> String {
    let mut lines: Vec<String> = corpus.iter().map(Sample::to_line).collect();
    lines.sort();
    let parts: Vec<&[u8]> = lines.iter().map(|l| l.as_bytes()).collect();
    sha_hex(&parts)
}

/// Nearest-rank percentile over ascending values.
fn percentile(sorted: &[u64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1] as f64
}

/// Deterministic reduction of (sample, decision) pairs into a report.
pub fn build_report(run: &RunInfo, scored: &[(Sample, Decision)]) -> Result<EvalReport, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut subsets: BTreeMap<u8, SubsetResult> = BTreeMap::new();
    let mut latencies = Vec::new();
    let mut tolerant_fallbacks = 0;
    let mut degraded = 0;
    let mut unreachable = 0;
    for (sample, decision) in scored {
        let s = subsets.entry(sample.type_id).or_insert_with(|| SubsetResult {
            type_id: sample.type_id,
            n: 0,
            correct: 0,
            accuracy: 0.0,
            false_accept: 0,
            false_reject: 0,
            parse_failures: 0,
        });
        s.n += 1;
        if decision.degraded {
            s.parse_failures += 1;
            degraded += 1;
            if decision.failure.as_ref().is_some_and(|f| f.unreachable) {
                unreachable += 1;
            }
            continue;
        }
        if decision.parse == crate::pipeline::ParseStatus::TolerantFallback {
            tolerant_fallbacks += 1;
        }
        if decision.attempts > 0 {
            latencies.push(decision.backend_latency_ms);
        }
        match (decision.verdict, sample.label) {
            (v, g) if v == g => s.correct += 1,
            (Label::Accept, _) => s.false_accept += 1,
            _ => s.false_reject += 1,
        }
    }
    for s in subsets.values_mut() {
        s.accuracy = s.correct as f64 / s.n as f64;
    }
    let acc: BTreeMap<u8, f64> = subsets.iter().map(|(k, s)| (*k, s.accuracy)).collect();
    let counts: BTreeMap<u8, usize> = subsets.iter().map(|(k, s)| (*k, s.n)).collect();
    let weighted = weighted_accuracy(&acc, &counts)?;
    latencies.sort_unstable();
    Ok(EvalReport {
        run_id: run.run_id.clone(),
        config_fingerprint: run.config_fingerprint.clone(),
        label: run.label.clone(),
        mode: run.mode,
        sequential: run.sequential,
        total: scored.len(),
        per_subset: subsets.into_values().collect(),
        weighted_accuracy: weighted,
        latency_p50_ms: percentile(&latencies, 0.50),
        latency_p95_ms: percentile(&latencies, 0.95),
        tolerant_fallbacks,
        degraded,
        usable: unreachable < scored.len(),
    })
}

fn log_line(run: &RunInfo, sample: &Sample, decision: &Decision) -> String {
    let mut obj = sample.to_json();
    obj.insert("run".into(), serde_json::to_value(run).expect("run info serializes"));
    obj.insert("decision".into(), serde_json::to_value(decision).expect("decision serializes"));
    Value::Object(obj).to_string()
}

/// Evaluates every sample and returns the report with its decision log.
///
/// In the default isolated mode each sample gets a fresh memory seeded only
/// with its own recorded history, so results do not depend on corpus order.
/// The knowledge base is read-only there; in sequential mode mistakes are fed
/// back into it. A `Disabled` failure policy is treated as `FailReject`, since
/// degraded samples are scored as failures either way.
pub async fn run_eval(
    corpus: &[Sample],
    config: &EvalConfig,
    backend: Arc<dyn Backend>,
    kb: Arc<KnowledgeBase>,
) -> Result<EvalOutcome, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut pipeline_cfg = config.pipeline.clone();
    if pipeline_cfg.failure_policy == FailurePolicy::Disabled {
        pipeline_cfg.failure_policy = FailurePolicy::FailReject;
    }
    let fingerprint = config_fingerprint(config, backend.as_ref());
    let run = RunInfo {
        run_id: sha_hex(&[fingerprint.as_bytes(), corpus_digest(corpus).as_bytes()])[..16].to_string(),
        config_fingerprint: fingerprint,
        label: config.label.clone(),
        mode: pipeline_cfg.mode,
        sequential: config.sequential,
    };
    let memory = Arc::new(MemoryStore::in_memory(DEFAULT_HISTORY_CAPACITY));
    let pipeline = Pipeline::new(pipeline_cfg, memory, kb, backend)?;

    let decisions: Vec<Decision> = if config.sequential {
        let mut out = Vec::with_capacity(corpus.len());
        for (i, sample) in corpus.iter().enumerate() {
            let t = config.now + SEQUENTIAL_STEP_SECS * i as i64;
            let d = pipeline.decide(SEQUENTIAL_HOUSEHOLD, &sample.text, t).await?;
            if !d.degraded && d.verdict != sample.label {
                pipeline.record_feedback(SEQUENTIAL_HOUSEHOLD, &sample.text, d.verdict, sample.label, t)?;
            }
            out.push(d);
        }
        out
    } else {
        let pipeline = &pipeline;
        let now = config.now;
        let results: Vec<Result<Decision, PipelineError>> = stream::iter(corpus.iter())
            .map(|sample| async move {
                let household = sample.household_id.as_deref().unwrap_or(EVAL_HOUSEHOLD);
                let memory = MemoryStore::in_memory(DEFAULT_HISTORY_CAPACITY);
                let m = sample.history.len() as i64;
                for (j, turn) in sample.history.iter().enumerate() {
                    memory.append_turn(household, turn.clone().at(now - (m - j as i64)))?;
                }
                pipeline.decide_in(&memory, household, &sample.text, now).await
            })
            .buffered(config.concurrency.max(1))
            .collect()
            .await;
        results.into_iter().collect::<Result<_, _>>()?
    };

    let scored: Vec<(Sample, Decision)> = corpus.iter().cloned().zip(decisions).collect();
    let report = build_report(&run, &scored)?;
    let log_lines = scored.iter().map(|(s, d)| log_line(&run, s, d)).collect();
    let outcome = EvalOutcome { report, log_lines };
    if !outcome.report.usable {
        return Err(EvalError::BackendUnreachable(Box::new(outcome)));
    }
    Ok(outcome)
}

type LogEntry = (RunInfo, Sample, Decision);

fn parse_log(content: &str) -> Result<Vec<(usize, LogEntry)>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Replay { line, message };
        let mut obj: Map<String, Value> = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let run: RunInfo = serde_json::from_value(obj.shift_remove("run").ok_or_else(|| err("missing run".into()))?)
            .map_err(|e| err(e.to_string()))?;
        let decision: Decision =
            serde_json::from_value(obj.shift_remove("decision").ok_or_else(|| err("missing decision".into()))?)
                .map_err(|e| err(e.to_string()))?;
        let sample = sample_from_object(obj).map_err(|e| err(e.to_string()))?;
        out.push((line, (run, sample, decision)));
    }
    Ok(out)
}

/// Rebuilds the report of a recorded single-run decision log.
pub fn replay_log(content: &str) -> Result<EvalReport, EvalError> {
    let mut run: Option<RunInfo> = None;
    let mut scored = Vec::new();
    for (line, (this_run, sample, decision)) in parse_log(content)? {
        match &run {
            None => run = Some(this_run),
            Some(r) if *r != this_run => {
                return Err(EvalError::Replay {
                    line,
                    message: "line belongs to a different run".into(),
                })
            }
            Some(_) => {}
        }
        scored.push((sample, decision));
    }
    let run = run.ok_or(EvalError::EmptyCorpus)?;
    build_report(&run, &scored)
}

/// Rebuilds one report per run in a log holding several runs, in order of
/// first appearance.
pub fn replay_runs(content: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut runs: Vec<(RunInfo, Vec<(Sample, Decision)>)> = Vec::new();
    for (_, (run, sample, decision)) in parse_log(content)? {
        match runs.iter_mut().find(|(r, _)| *r == run) {
            Some((_, scored)) => scored.push((sample, decision)),
            None => runs.push((run, vec![(sample, decision)])),
        }
    }
    if runs.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    runs.iter().map(|(run, scored)| build_report(run, scored)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

pub const CSV_HEADER: &str = "type_id,n,correct,accuracy,false_accept,false_reject,parse_failures";

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for r in &report.per_subset {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.type_id, r.n, r.correct, r.accuracy, r.false_accept, r.false_reject, r.parse_failures
                );
            }
            s
        }
        ReportFormat::Markdown => render_comparison_markdown(std::slice::from_ref(report)),
    }
}

pub fn parse_report_json(text: &str) -> Result<EvalReport, serde_json::Error> {
    serde_json::from_str(text)
}

/// Subset rows × one column per report, with a weighted-accuracy footer.
pub fn render_comparison_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Subsets |");
    for r in reports {
        let _ = write!(s, " {} |", r.label);
    }
    s.push_str("\n|---|");
    for _ in reports {
        s.push_str("---:|");
    }
    s.push('\n');
    let ids: BTreeSet<u8> = reports.iter().flat_map(|r| r.per_subset.iter().map(|x| x.type_id)).collect();
    for id in ids {
        let _ = write!(s, "| {id} |");
        for r in reports {
            match r.per_subset.iter().find(|x| x.type_id == id) {
                Some(x) => {
                    let _ = write!(s, " {:.4} |", x.accuracy);
                }
                None => s.push_str(" – |"),
            }
        }
        s.push('\n');
    }
    s.push_str("| Weighted |");
    for r in reports {
        let _ = write!(s, " {:.4} |", r.weighted_accuracy);
    }
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetDelta {
    pub type_id: u8,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub per_subset: Vec<SubsetDelta>,
    /// `weighted(b) - weighted(a)`.
    pub weighted_delta: f64,
}

pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<ReportComparison, EvalError> {
    let ka: Vec<u8> = a.per_subset.iter().map(|s| s.type_id).collect();
    let kb: Vec<u8> = b.per_subset.iter().map(|s| s.type_id).collect();
    if ka != kb {
        return Err(EvalError::MismatchedKeys(format!("{ka:?} vs {kb:?}")));
    }
    let per_subset = a
        .per_subset
        .iter()
        .zip(&b.per_subset)
        .map(|(x, y)| SubsetDelta {
            type_id: x.type_id,
            a: x.accuracy,
            b: y.accuracy,
            delta: y.accuracy - x.accuracy,
        })
        .collect();
    Ok(ReportComparison {
        per_subset,
        weighted_delta: b.weighted_accuracy - a.weighted_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockRules};

    fn map<T: Copy>(pairs: &[(u8, T)]) -> BTreeMap<u8, T> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn weighted_accuracy_basics() {
        let acc = map(&[(0, 0.2), (1, 0.4), (2, 0.6)]);
        let n = map(&[(0, 5usize), (1, 5), (2, 5)]);
        assert!((weighted_accuracy(&acc, &n).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(
            weighted_accuracy(&acc, &map(&[(0, 1usize)])),
            Err(EvalError::MismatchedKeys(_))
        ));
        assert!(matches!(
            weighted_accuracy(&acc, &map(&[(0, 0usize), (1, 0), (2, 0)])),
            Err(EvalError::ZeroTotal)
        ));
    }

    #[test]
    fn percentile_nearest_rank() {
        assert_eq!(percentile(&[], 0.5), 0.0);
        let v: Vec<u64> = (1..=20).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[7], 0.95), 7.0);
    }

    fn fixture() -> Vec<Sample> {
        let mut v = Vec::new();
        for (i, ty) in [9u8, 9, 8, 0].iter().enumerate() {
            v.push(Sample::new(format!("a{i}"), *ty, format!("打开灯{i}")).unwrap());
        }
        for (i, ty) in [5u8, 5, 5, 2, 3, 3].iter().enumerate() {
            v.push(Sample::new(format!("r{i}"), *ty, format!("随便{i}")).unwrap());
        }
        v
    }

    #[tokio::test]
    async fn always_accept_fixture() {
        let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(MockRules::always(Label::Accept)));
        let out = run_eval(
            &fixture(),
            &EvalConfig::default(),
            backend,
            Arc::new(KnowledgeBase::in_memory()),
        )
        .await
        .unwrap();
        let r = &out.report;
        assert!((r.weighted_accuracy - 0.4).abs() < 1e-12);
        for s in &r.per_subset {
            let want = if [0, 8, 9].contains(&s.type_id) { 1.0 } else { 0.0 };
            assert_eq!(s.accuracy, want, "type {}", s.type_id);
            assert_eq!(s.correct + s.false_accept + s.false_reject + s.parse_failures, s.n);
        }
        assert_eq!(r.per_subset.iter().map(|s| s.false_accept).sum::<usize>(), 6);
        assert_eq!(replay_log(&out.log_text()).unwrap(), out.report);
    }

    #[tokio::test]
    async fn empty_corpus_errors() {
        let backend: Arc<dyn Backend> = Arc::new(MockBackend::new(MockRules::always(Label::Accept)));
        let err = run_eval(&[], &EvalConfig::default(), backend, Arc::new(KnowledgeBase::in_memory()))
            .await
            .unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn render_formats() {
        let run = RunInfo {
            run_id: "r".into(),
            config_fingerprint: "f".into(),
            label: "Mock".into(),
            mode: PromptMode::Generic,
            sequential: false,
        };
        let mut scored = Vec::new();
        for ty in 0u8..12 {
            let s = Sample::new(format!("s{ty}"), ty, "x").unwrap();
            let d = Decision {
                verdict: Label::Accept,
                mode: PromptMode::Generic,
                retrieved: vec![],
                history_used: 0,
                backend_latency_ms: u64::from(ty),
                attempts: 1,
                degraded: false,
                parse: crate::pipeline::ParseStatus::Strict,
                failure: None,
                prompt_hash: String::new(),
                raw_response: None,
                reason: None,
            };
            scored.push((s, d));
        }
        let report = build_report(&run, &scored).unwrap();
        let md = render_report(&report, ReportFormat::Markdown);
        let rows: Vec<&str> = md.lines().collect();
        assert_eq!(rows.len(), 2 + 12 + 1);
        assert_eq!(rows[0], "| Subsets | Mock |");
        assert_eq!(rows[2], "| 0 | 1.0000 |");
        assert_eq!(rows[3], "| 1 | 0.0000 |");
        assert!(rows[14].starts_with("| Weighted | 0.4167 |"));

        let csv = render_report(&report, ReportFormat::Csv);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().nth(2).unwrap(), "1,1,0,0,1,0,0");

        let json = render_report(&report, ReportFormat::Json);
        assert_eq!(parse_report_json(&json).unwrap(), report);
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    }
}
