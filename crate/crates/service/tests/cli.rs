use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use homegate::cli::run;

fn mini_corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini_corpus.jsonl")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("homegate").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stats_counts_the_mini_corpus() {
    let (code, out, _) = cli(&["stats", "--corpus", p(&mini_corpus()), "--json"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total"], 120);
    assert_eq!(
        v["per_type_count"],
        json!({"0": 4, "1": 6, "2": 6, "3": 10, "4": 6, "5": 12, "6": 8, "7": 4, "8": 16, "9": 32, "10": 6, "11": 10})
    );
    assert_eq!(v["accept"], 68);
    assert_eq!(v["reject"], 52);

    let (code, out, _) = cli(&["stats", "--corpus", p(&mini_corpus())]);
    assert_eq!(code, 0);
    assert!(out.contains("| | Total | | 120 |"));
}

#[test]
fn validate_lists_each_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let good = std::fs::read_to_string(mini_corpus()).unwrap();
    let mut lines: Vec<&str> = good.lines().take(5).collect();
    lines.insert(2, r#"{"id":"bad","type_id":12,"text":"x","label":"accept"}"#);
    std::fs::write(&path, lines.join("\n")).unwrap();

    let (code, out, _) = cli(&["validate", "--corpus", p(&path)]);
    assert_eq!(code, 1);
    let rows: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["line"], 3);
    assert_eq!(rows[0]["id"], "bad");
    assert_eq!(rows[0]["message"], "unknown type 12");
    assert_eq!(rows[1], json!({"valid": 5, "errors": 1, "warnings": 0}));

    let (code, _, _) = cli(&["validate", "--corpus", p(&mini_corpus())]);
    assert_eq!(code, 0);
}

#[test]
fn raw_mode_downgrades_label_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(&path, r#"{"id":"a","type_id":9,"text":"开灯","label":"reject"}"#).unwrap();
    assert_eq!(cli(&["validate", "--corpus", p(&path)]).0, 1);
    let (code, out, _) = cli(&["validate", "--corpus", p(&path), "--raw"]);
    assert_eq!(code, 0);
    assert!(out.contains(r#""level":"warning""#));
}

fn manifest(dir: &Path, modes: &[&str], backend: Value) -> PathBuf {
    let m = json!({
        "corpus": mini_corpus(),
        "modes": modes,
        "backend": backend,
        "outputs": {
            "json": "out/report.json",
            "markdown": "out/report.md",
            "csv": "out/report.csv",
            "decision_log": "out/decisions.jsonl",
        }
    });
    let path = dir.join("m.json");
    std::fs::write(&path, serde_json::to_string_pretty(&m).unwrap()).unwrap();
    path
}

fn mock() -> Value {
    json!({"kind": "mock", "default": "reject", "rules": [{"pattern": "打开", "verdict": "accept"}]})
}

#[test]
fn eval_writes_reports_and_replay_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), &["generic", "with_history_and_cases"], mock());
    let (code, stdout, stderr) = cli(&["eval", "--manifest", p(&m)]);
    assert_eq!(code, 0, "{stderr}");
    let out = dir.path().join("out");
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(stdout, md);
    assert!(md.starts_with("| Subsets | generic | with_history_and_cases |\n"));
    assert_eq!(md.lines().count(), 2 + 12 + 1);

    let reports: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0]["total"], 120);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24);

    let log = out.join("decisions.jsonl");
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 240);
    let (code, replayed, _) = cli(&["replay", "--log", p(&log)]);
    assert_eq!(code, 0);
    assert_eq!(replayed, md);
    let (_, replayed_json, _) = cli(&["replay", "--log", p(&log), "--format", "json"]);
    assert_eq!(replayed_json, std::fs::read_to_string(out.join("report.json")).unwrap());
    let (_, replayed_csv, _) = cli(&["replay", "--log", p(&log), "--format", "csv"]);
    assert_eq!(replayed_csv, csv);
}

#[test]
fn eval_against_a_dead_endpoint_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let backend = json!({
        "kind": "http",
        "base_url": format!("http://{addr}/v1"),
        "model_name": "m",
        "timeout_ms": 200,
        "max_retries": 0,
    });
    let m = manifest(dir.path(), &["generic"], backend);
    let (code, _, err) = cli(&["eval", "--manifest", p(&m)]);
    assert_eq!(code, 1);
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("unreachable"), "{err}");
    // Partial results are kept for inspection, reports are not written.
    assert!(dir.path().join("out/decisions.jsonl").exists());
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn kb_command_reads_a_service_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let kb = homegate_core::KnowledgeBase::open(
        dir.path().join("kb"),
        std::sync::Arc::new(homegate_core::HashedNgramEmbedder::default()),
        100,
    )
    .unwrap();
    for (i, u) in ["宝宝开饭了", "宝宝睡觉了", "关灯吧"].iter().enumerate() {
        kb.add_case(homegate_core::kb::NewBadCase {
            household_id: "h".into(),
            utterance: u.to_string(),
            corrected_label: homegate_core::Label::Accept,
            created_at: i as i64,
        })
        .unwrap();
    }
    let (code, out, _) = cli(&["kb", "--data-dir", p(dir.path()), "--household", "h"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["stats"]["total"], 3);
    assert_eq!(v["cases"].as_array().unwrap().len(), 3);

    let (_, out, _) = cli(&[
        "kb",
        "--data-dir",
        p(dir.path()),
        "--household",
        "h",
        "--query",
        "宝宝开饭",
        "--k",
        "2",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let hits = v["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 2);
    assert_eq!(hits[0]["utterance"], "宝宝开饭了");

    let (code, _, err) = cli(&["kb", "--data-dir", p(&dir.path().join("missing")), "--household", "h"]);
    assert_eq!(code, 1);
    assert!(err.starts_with("{\"error\""));
}

#[test]
fn usage_errors_exit_nonzero() {
    let (code, _, err) = cli(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
    let (code, _, err) = cli(&["stats", "--corpus", "/nonexistent/c.jsonl"]);
    assert_eq!(code, 1);
    let v: Value = serde_json::from_str(err.trim()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("/nonexistent/c.jsonl"));
    let (code, out, _) = cli(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["serve", "eval", "stats", "validate", "kb", "replay"] {
        assert!(out.contains(sub), "{sub}");
    }
}

#[test]
fn serve_rejects_bad_config_before_binding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[pipeline]\nk = 7\n").unwrap();
    let (code, _, err) = cli(&["serve", "--config", p(&cfg), "--data-dir", p(dir.path())]);
    assert_eq!(code, 1);
    assert!(err.contains("k"), "{err}");
}
