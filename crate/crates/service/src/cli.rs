//! Command-line entry point.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use homegate_core::backend::{Backend, ChatCompletionsBackend, MockBackend};
use homegate_core::corpus::{corpus_stats, load_corpus, ValidationMode};
use homegate_core::evalbench::{
    render_comparison_markdown, render_report, replay_runs, run_eval, EvalConfig, EvalError, EvalOutcome, EvalReport,
    ReportFormat, CSV_HEADER, DEFAULT_EVAL_NOW,
};
use homegate_core::kb::{HashedNgramEmbedder, DEFAULT_KB_CAPACITY};
use homegate_core::pipeline::FailurePolicy;
use homegate_core::{KnowledgeBase, Locale, PipelineConfig, PromptMode, WindowPolicy};

use crate::config::{BackendSpec, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "homegate", version, about = "Household-personalized query rejection gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        /// TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        mode: Option<PromptMode>,
        #[arg(long)]
        locale: Option<LocaleArg>,
        #[arg(long)]
        strict_households: bool,
    },
    /// Evaluate a corpus as described by a run manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Per-type counts of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        json: bool,
        /// Accept label/type mismatches (live logs).
        #[arg(long)]
        raw: bool,
    },
    /// Check a corpus; bad records are printed as JSON lines.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        raw: bool,
    },
    /// Inspect a household knowledge base.
    Kb {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        household: String,
        /// Show the top matches for this query instead of listing cases.
        #[arg(long)]
        query: Option<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Re-score a recorded decision log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum LocaleArg {
    Zh,
    En,
}

/// Run manifest for `eval`. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus: PathBuf,
    /// One evaluation run per mode, reported side by side.
    #[serde(default = "default_modes")]
    pub modes: Vec<PromptMode>,
    #[serde(default)]
    pub label: Option<String>,
    pub backend: BackendSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub window: WindowPolicy,
    #[serde(default)]
    pub strict_parse: bool,
    #[serde(default)]
    pub locale: Locale,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    #[serde(default = "default_true")]
    pub include_assistant_turns: bool,
    #[serde(default)]
    pub sequential: bool,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_now")]
    pub now: i64,
    /// Seed the KB from a service data directory's `kb` folder (read-only).
    #[serde(default)]
    pub kb_dir: Option<PathBuf>,
    #[serde(default)]
    pub raw: bool,
    pub outputs: Outputs,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// JSON array with one report per run.
    pub json: Option<PathBuf>,
    /// Subset × run accuracy table.
    pub markdown: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Decision log of all runs, replayable with `replay`.
    pub decision_log: Option<PathBuf>,
}

fn default_modes() -> Vec<PromptMode> {
    vec![PromptMode::WithHistoryAndCases]
}
fn default_k() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_concurrency() -> usize {
    4
}
fn default_now() -> i64 {
    DEFAULT_EVAL_NOW
}

impl Manifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.corpus);
        if let Some(p) = m.kb_dir.as_mut() {
            fix(p);
        }
        for p in [
            &mut m.outputs.json,
            &mut m.outputs.markdown,
            &mut m.outputs.csv,
            &mut m.outputs.decision_log,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        if m.modes.is_empty() {
            bail!("modes must not be empty");
        }
        Ok(m)
    }

    fn run_label(&self, mode: PromptMode) -> String {
        match (&self.label, self.modes.len()) {
            (Some(l), 1) => l.clone(),
            (Some(l), _) => format!("{l}-{}", mode.as_str()),
            (None, _) => mode.as_str().to_string(),
        }
    }

    fn eval_config(&self, mode: PromptMode) -> EvalConfig {
        EvalConfig {
            pipeline: PipelineConfig {
                mode,
                window: self.window,
                k: self.k,
                failure_policy: self.failure_policy,
                strict_parse: self.strict_parse,
                locale: self.locale,
                include_assistant_turns: self.include_assistant_turns,
            },
            label: self.run_label(mode),
            concurrency: self.concurrency,
            sequential: self.sequential,
            now: self.now,
        }
    }
}

fn make_backend(spec: &BackendSpec) -> anyhow::Result<Arc<dyn Backend>> {
    Ok(match spec {
        BackendSpec::Mock(rules) => Arc::new(MockBackend::new(rules.clone())),
        BackendSpec::Http(c) => Arc::new(ChatCompletionsBackend::new(c.clone())?),
    })
}

fn write_file(path: &Path, content: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn csv_with_labels(reports: &[EvalReport]) -> String {
    let mut s = format!("label,{CSV_HEADER}\n");
    for r in reports {
        for line in render_report(r, ReportFormat::Csv).lines().skip(1) {
            let _ = writeln!(s, "{},{line}", r.label);
        }
    }
    s
}

fn reports_json(reports: &[EvalReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

/// Runs every mode of the manifest and writes the requested outputs.
pub async fn run_manifest(m: &Manifest) -> anyhow::Result<Vec<EvalReport>> {
    let mode = if m.raw {
        ValidationMode::RawLog
    } else {
        ValidationMode::Benchmark
    };
    let loaded = load_corpus(&m.corpus, mode)?;
    if let Some(e) = loaded.errors.first() {
        bail!(
            "{} invalid records in {}; first at line {}: {}",
            loaded.errors.len(),
            m.corpus.display(),
            e.line,
            e.message
        );
    }
    let backend = make_backend(&m.backend)?;
    let mut reports = Vec::new();
    let mut log = String::new();
    for &mode in &m.modes {
        // Each run starts from the same KB state.
        let kb = match &m.kb_dir {
            Some(dir) => KnowledgeBase::snapshot(dir, Arc::new(HashedNgramEmbedder::default()), DEFAULT_KB_CAPACITY)?,
            None => KnowledgeBase::in_memory(),
        };
        let outcome: EvalOutcome = match run_eval(&loaded.samples, &m.eval_config(mode), backend.clone(), Arc::new(kb)).await {
            Ok(o) => o,
            Err(EvalError::BackendUnreachable(o)) => {
                if let Some(p) = &m.outputs.decision_log {
                    write_file(p, &o.log_text())?;
                }
                bail!("backend unreachable for every sample in run {}", o.report.label);
            }
            Err(e) => return Err(e.into()),
        };
        log.push_str(&outcome.log_text());
        reports.push(outcome.report);
    }
    if let Some(p) = &m.outputs.json {
        write_file(p, &reports_json(&reports))?;
    }
    if let Some(p) = &m.outputs.markdown {
        write_file(p, &render_comparison_markdown(&reports))?;
    }
    if let Some(p) = &m.outputs.csv {
        write_file(p, &csv_with_labels(&reports))?;
    }
    if let Some(p) = &m.outputs.decision_log {
        write_file(p, &log)?;
    }
    Ok(reports)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn error_json(e: &anyhow::Error) -> String {
    json!({ "error": format!("{e:#}") }).to_string()
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}", error_json(&e));
            1
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<i32> {
    match command {
        Command::Serve {
            config,
            listen,
            data_dir,
            mode,
            locale,
            strict_households,
        } => {
            let mut cfg = match &config {
                Some(p) => ServiceConfig::from_file(p)?,
                None => ServiceConfig::default(),
            };
            cfg.apply_env(|k| std::env::var(k).ok())?;
            if let Some(v) = listen {
                cfg.listen = v;
            }
            if let Some(v) = data_dir {
                cfg.data_dir = v;
            }
            if let Some(v) = mode {
                cfg.pipeline.mode = v;
            }
            if let Some(v) = locale {
                cfg.pipeline.locale = match v {
                    LocaleArg::Zh => Locale::Zh,
                    LocaleArg::En => Locale::En,
                };
            }
            cfg.strict_households |= strict_households;
            cfg.validate()?;
            runtime()?.block_on(crate::app::serve(cfg))?;
            Ok(0)
        }
        Command::Eval { manifest } => {
            let m = Manifest::load(&manifest)?;
            let reports = runtime()?.block_on(run_manifest(&m))?;
            out.write_all(render_comparison_markdown(&reports).as_bytes())?;
            Ok(0)
        }
        Command::Stats { corpus, json, raw } => {
            let mode = if raw { ValidationMode::RawLog } else { ValidationMode::Benchmark };
            let loaded = load_corpus(&corpus, mode)?;
            let stats = corpus_stats(&loaded.samples);
            if json {
                let v = json!({
                    "per_type_count": stats.per_type_count,
                    "total": stats.total,
                    "accept": stats.accept_total(),
                    "reject": stats.total - stats.accept_total(),
                    "invalid_records": loaded.errors.len(),
                });
                writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
            } else {
                writeln!(out, "| Type | Name | Label | Count |")?;
                writeln!(out, "|---:|---|---|---:|")?;
                for t in homegate_core::TAXONOMY.iter() {
                    writeln!(
                        out,
                        "| {} | {} | {} | {} |",
                        t.type_id,
                        t.name,
                        t.expected_label,
                        stats.count(t.type_id)
                    )?;
                }
                writeln!(out, "| | Total | | {} |", stats.total)?;
                if !loaded.errors.is_empty() {
                    writeln!(out, "\n{} invalid records skipped", loaded.errors.len())?;
                }
            }
            Ok(0)
        }
        Command::Validate { corpus, raw } => {
            let mode = if raw { ValidationMode::RawLog } else { ValidationMode::Benchmark };
            let loaded = load_corpus(&corpus, mode)?;
            for e in &loaded.errors {
                writeln!(out, "{}", json!({"level": "error", "line": e.line, "id": e.id, "message": e.message}))?;
            }
            for w in &loaded.warnings {
                writeln!(out, "{}", json!({"level": "warning", "line": w.line, "id": w.id, "message": w.message}))?;
            }
            writeln!(
                out,
                "{}",
                json!({"valid": loaded.samples.len(), "errors": loaded.errors.len(), "warnings": loaded.warnings.len()})
            )?;
            Ok(if loaded.errors.is_empty() { 0 } else { 1 })
        }
        Command::Kb {
            data_dir,
            household,
            query,
            k,
        } => {
            let kb = KnowledgeBase::snapshot(
                data_dir.join("kb"),
                Arc::new(HashedNgramEmbedder::default()),
                DEFAULT_KB_CAPACITY,
            )?;
            let v = match query {
                Some(q) => {
                    let hits: Vec<_> = kb
                        .retrieve_top_k(&household, &q, k)
                        .into_iter()
                        .map(|h| {
                            json!({
                                "case_id": h.case.case_id,
                                "utterance": h.case.utterance,
                                "corrected_label": h.case.corrected_label,
                                "created_at": h.case.created_at,
                                "similarity": h.similarity,
                            })
                        })
                        .collect();
                    json!({"household_id": household, "query": q, "hits": hits})
                }
                None => json!({
                    "household_id": household,
                    "stats": kb.kb_stats(&household),
                    "cases": kb.cases(&household),
                }),
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
            Ok(0)
        }
        Command::Replay { log, format } => {
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let reports = replay_runs(&text)?;
            let rendered = match format {
                ReportFormat::Markdown => render_comparison_markdown(&reports),
                ReportFormat::Json => reports_json(&reports),
                ReportFormat::Csv => csv_with_labels(&reports),
            };
            out.write_all(rendered.as_bytes())?;
            Ok(0)
        }
    }
}
