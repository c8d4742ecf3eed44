//! Utterance taxonomy, corpus record schema and corpus loading.
//!
//! A corpus file is UTF-8 with one JSON object per line:
//!
//! ```text
//! {"id":"s-1","type_id":9,"text":"关掉空调","label":"accept","history":[{"speaker":"user","text":"来客人了"}]}
//! ```
//!
//! `history` may also be the legacy flat notation `"来客人了~~~~~搞定"`, which is
//! split into alternating user/assistant turns. Unknown fields are kept and
//! written back unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

/// Separator between user and assistant turns in the legacy history notation.
pub const LEGACY_TURN_SEPARATOR: &str = "~~~~~";

/// Number of utterance types in the taxonomy.
pub const TYPE_COUNT: usize = 12;

/// Gold decision for an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Accept,
    Reject,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Accept => "accept",
            Label::Reject => "reject",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Accept => Label::Reject,
            Label::Reject => Label::Accept,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = SampleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("accept") {
            Ok(Label::Accept)
        } else if s.eq_ignore_ascii_case("reject") {
            Ok(Label::Reject)
        } else {
            Err(SampleError::InvalidLabel(s.to_string()))
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One entry of the 12-type utterance taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtteranceType {
    pub type_id: u8,
    pub name: &'static str,
    pub expected_label: Label,
    /// Rule-style definition in English.
    pub definition_en: &'static str,
    /// Rule-style definition in Chinese.
    pub definition_zh: &'static str,
}

impl UtteranceType {
    pub fn from_id(type_id: i64) -> Result<&'static UtteranceType, SampleError> {
        usize::try_from(type_id)
            .ok()
            .and_then(|i| TAXONOMY.get(i))
            .ok_or(SampleError::UnknownType(type_id))
    }
}

/// The full taxonomy, indexed by `type_id`.
pub static TAXONOMY: [UtteranceType; TYPE_COUNT] = [
    UtteranceType {
        type_id: 0,
        name: "Wake-word",
        expected_label: Label::Accept,
        definition_en: "a wake word or wake phrase addressed to the assistant, for any brand",
        definition_zh: "任意品牌的唤醒词或唤醒短语",
    },
    UtteranceType {
        type_id: 1,
        name: "Illegal language",
        expected_label: Label::Reject,
        definition_en: "abusive, obscene, violent, terror-related or politically sensitive content",
        definition_zh: "包含辱骂、低俗、暴力、涉恐或政治敏感等违法违规内容",
    },
    UtteranceType {
        type_id: 2,
        name: "Non-human sounds",
        expected_label: Label::Reject,
        definition_en: "sound that was not spoken by a person: synthetic speech, media playback, natural or mechanical noise",
        definition_zh: "非真人发出的声音，例如合成语音、媒体播放声、自然或机械噪声",
    },
    UtteranceType {
        type_id: 3,
        name: "ASR-error garbled; meaningless short phrases",
        expected_label: Label::Reject,
        definition_en: "garbled speech-recognition output, slips of the tongue or short phrases without meaning",
        definition_zh: "语音识别错误产生的乱码、口误或没有意义的短语",
    },
    UtteranceType {
        type_id: 4,
        name: "Non-assistant-directed chat (multi-person or self-talk)",
        expected_label: Label::Reject,
        definition_en: "speech aimed at other people or at oneself rather than at the assistant",
        definition_zh: "用户与他人交谈或自言自语，并非对助手说话",
    },
    UtteranceType {
        type_id: 5,
        name: "Command-semantics but obviously unreasonable (no history)",
        expected_label: Label::Reject,
        definition_en: "a command with clear intent whose content is obviously unreasonable or infeasible",
        definition_zh: "具有明确指令意图但内容明显不合理或无法执行的指令",
    },
    UtteranceType {
        type_id: 6,
        name: "Assistant-directed ambiguous chat (no history; uncertain reply)",
        expected_label: Label::Reject,
        definition_en: "isolated small talk to the assistant with no history and no well-defined answer",
        definition_zh: "没有对话历史、对助手的孤立闲聊，且无法给出确定回复",
    },
    UtteranceType {
        type_id: 7,
        name: "Assistant-directed ambiguous chat (history without valid command; uncertain reply)",
        expected_label: Label::Reject,
        definition_en: "ambiguous talk to the assistant whose history contains no valid command",
        definition_zh: "对话历史中没有有效指令，当前语句仍然含糊、无法确定回复",
    },
    UtteranceType {
        type_id: 8,
        name: "Assistant-directed chat (assistant can reply)",
        expected_label: Label::Accept,
        definition_en: "questions or chat the assistant can answer from its knowledge sources",
        definition_zh: "助手可以借助知识库或外部大模型回答的问题或闲聊",
    },
    UtteranceType {
        type_id: 9,
        name: "Assistant-directed command (supported)",
        expected_label: Label::Accept,
        definition_en: "a device command the platform supports",
        definition_zh: "平台支持的设备控制指令",
    },
    UtteranceType {
        type_id: 10,
        name: "Assistant-directed command (not yet supported, intent clear)",
        expected_label: Label::Accept,
        definition_en: "a command with clear control intent that this platform does not support yet",
        definition_zh: "控制意图明确、但本平台暂不支持的指令",
    },
    UtteranceType {
        type_id: 11,
        name: "Assistant-directed ambiguous chat (history with valid command)",
        expected_label: Label::Accept,
        definition_en: "a follow-up whose history already contains a valid command it supplements or extends",
        definition_zh: "对话历史中已有有效指令，当前语句对其补充或发起新的指令",
    },
];

/// Fixed type → label mapping of the benchmark taxonomy.
pub fn expected_label(type_id: i64) -> Result<Label, SampleError> {
    UtteranceType::from_id(type_id).map(|t| t.expected_label)
}

/// NFC-normalizes and trims text. Used wherever utterances are compared or hashed.
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().trim().to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::User => "user",
            Speaker::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<Timestamp>,
}

impl DialogueTurn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            timestamp: None,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Assistant,
            text: text.into(),
            timestamp: None,
        }
    }

    pub fn at(mut self, timestamp: Timestamp) -> Self {
        self.timestamp = Some(timestamp);
        self
    }
}

/// Splits the legacy `user~~~~~assistant~~~~~user…` notation into turns.
pub fn split_legacy_history(text: &str) -> Result<Vec<DialogueTurn>, SampleError> {
    text.split(LEGACY_TURN_SEPARATOR)
        .enumerate()
        .map(|(i, segment)| {
            if segment.trim().is_empty() {
                return Err(SampleError::EmptyTurn(i));
            }
            let turn = if i % 2 == 0 {
                DialogueTurn::user(segment)
            } else {
                DialogueTurn::assistant(segment)
            };
            Ok(turn)
        })
        .collect()
}

/// Inverse of [`split_legacy_history`].
pub fn join_legacy_history(turns: &[DialogueTurn]) -> String {
    turns
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(LEGACY_TURN_SEPARATOR)
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub type_id: u8,
    pub text: String,
    pub label: Label,
    pub history: Vec<DialogueTurn>,
    pub household_id: Option<String>,
    pub audio_ref: Option<String>,
    /// Fields not in the schema, preserved in their original order.
    pub extra: Map<String, Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, type_id: u8, text: impl Into<String>) -> Result<Self, SampleError> {
        let label = expected_label(i64::from(type_id))?;
        Ok(Self {
            id: id.into(),
            type_id,
            text: text.into(),
            label,
            history: Vec::new(),
            household_id: None,
            audio_ref: None,
            extra: Map::new(),
        })
    }

    pub fn with_history(mut self, history: Vec<DialogueTurn>) -> Self {
        self.history = history;
        self
    }

    /// JSON object in the corpus line format.
    pub fn to_json(&self) -> Map<String, Value> {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        obj.insert("type_id".into(), Value::from(self.type_id));
        obj.insert("text".into(), Value::String(self.text.clone()));
        obj.insert("label".into(), Value::String(self.label.as_str().into()));
        obj.insert(
            "history".into(),
            serde_json::to_value(&self.history).expect("turns serialize"),
        );
        if let Some(h) = &self.household_id {
            obj.insert("household_id".into(), Value::String(h.clone()));
        }
        if let Some(a) = &self.audio_ref {
            obj.insert("audio_ref".into(), Value::String(a.clone()));
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        obj
    }

    pub fn to_line(&self) -> String {
        Value::Object(self.to_json()).to_string()
    }
}

/// Whether label/taxonomy disagreement is fatal for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Benchmark corpora: every label must match its type.
    #[default]
    Benchmark,
    /// Live logs: mismatches are reported as warnings.
    RawLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("field `{field}` has the wrong type, expected {expected}")]
    WrongType { field: &'static str, expected: &'static str },
    #[error("unknown type {0}")]
    UnknownType(i64),
    #[error("invalid label {0:?}")]
    InvalidLabel(String),
    #[error("label {label} is inconsistent with type {type_id} (expected {expected})")]
    LabelMismatch { type_id: u8, label: Label, expected: Label },
    #[error("empty text")]
    EmptyText,
    #[error("history turn {0} is empty")]
    EmptyTurn(usize),
    #[error("history is not in chronological order at turn {0}")]
    HistoryOutOfOrder(usize),
}

/// A record-level failure while loading a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    /// 1-based line number.
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
    #[serde(skip)]
    pub error: SampleError,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn take_str(obj: &mut Map<String, Value>, field: &'static str) -> Result<Option<String>, SampleError> {
    match obj.shift_remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(SampleError::WrongType { field, expected: "string" }),
    }
}

fn parse_history(value: Option<Value>) -> Result<Vec<DialogueTurn>, SampleError> {
    let turns = match value {
        None | Some(Value::Null) => return Ok(Vec::new()),
        Some(Value::String(s)) if s.is_empty() => return Ok(Vec::new()),
        Some(Value::String(s)) => split_legacy_history(&s)?,
        Some(v @ Value::Array(_)) => serde_json::from_value::<Vec<DialogueTurn>>(v)
            .map_err(|e| SampleError::Malformed(format!("history: {e}")))?,
        Some(_) => {
            return Err(SampleError::WrongType {
                field: "history",
                expected: "array or string",
            })
        }
    };
    let mut last: Option<Timestamp> = None;
    for (i, turn) in turns.iter().enumerate() {
        if turn.text.trim().is_empty() {
            return Err(SampleError::EmptyTurn(i));
        }
        if let Some(ts) = turn.timestamp {
            if last.is_some_and(|prev| ts < prev) {
                return Err(SampleError::HistoryOutOfOrder(i));
            }
            last = Some(ts);
        }
    }
    Ok(turns)
}

/// Builds a sample from an already-parsed JSON object. Label consistency is
/// not checked here; see [`check_label`].
pub fn sample_from_object(mut obj: Map<String, Value>) -> Result<Sample, SampleError> {
    let id = take_str(&mut obj, "id")?.ok_or(SampleError::MissingField("id"))?;
    let type_id = match obj.shift_remove("type_id") {
        None | Some(Value::Null) => return Err(SampleError::MissingField("type_id")),
        Some(Value::Number(n)) => n.as_i64().ok_or(SampleError::WrongType {
            field: "type_id",
            expected: "integer",
        })?,
        Some(_) => {
            return Err(SampleError::WrongType {
                field: "type_id",
                expected: "integer",
            })
        }
    };
    let ty = UtteranceType::from_id(type_id)?;
    let text = take_str(&mut obj, "text")?.ok_or(SampleError::MissingField("text"))?;
    if text.trim().is_empty() {
        return Err(SampleError::EmptyText);
    }
    let label: Label = take_str(&mut obj, "label")?
        .ok_or(SampleError::MissingField("label"))?
        .parse()?;
    let history = parse_history(obj.shift_remove("history"))?;
    let household_id = take_str(&mut obj, "household_id")?;
    let audio_ref = take_str(&mut obj, "audio_ref")?;
    Ok(Sample {
        id,
        type_id: ty.type_id,
        text,
        label,
        history,
        household_id,
        audio_ref,
        extra: obj,
    })
}

/// Errors if the sample's label disagrees with its type.
pub fn check_label(sample: &Sample) -> Result<(), SampleError> {
    let expected = TAXONOMY[usize::from(sample.type_id)].expected_label;
    if sample.label != expected {
        return Err(SampleError::LabelMismatch {
            type_id: sample.type_id,
            label: sample.label,
            expected,
        });
    }
    Ok(())
}

/// Parses one corpus line in benchmark mode.
pub fn parse_sample(line: &str) -> Result<Sample, SampleError> {
    let sample = parse_sample_unchecked(line)?;
    check_label(&sample)?;
    Ok(sample)
}

fn parse_sample_unchecked(line: &str) -> Result<Sample, SampleError> {
    let value: Value = serde_json::from_str(line).map_err(|e| SampleError::Malformed(e.to_string()))?;
    match value {
        Value::Object(obj) => sample_from_object(obj),
        _ => Err(SampleError::Malformed("record is not a JSON object".into())),
    }
}

/// Result of loading a corpus file.
#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub samples: Vec<Sample>,
    pub errors: Vec<RecordError>,
    /// Label mismatches tolerated in raw-log mode.
    pub warnings: Vec<RecordError>,
}

fn record_error(line: usize, raw: &str, error: SampleError) -> RecordError {
    let id = serde_json::from_str::<Value>(raw)
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_str).map(str::to_string));
    RecordError {
        line,
        id,
        message: error.to_string(),
        error,
    }
}

/// Parses corpus text. Blank lines are skipped; bad records never abort the load.
pub fn parse_corpus(content: &str, mode: ValidationMode) -> LoadedCorpus {
    let mut out = LoadedCorpus::default();
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_sample_unchecked(raw) {
            Ok(sample) => match check_label(&sample) {
                Ok(()) => out.samples.push(sample),
                Err(e) => {
                    let err = RecordError {
                        line: line_no,
                        id: Some(sample.id.clone()),
                        message: e.to_string(),
                        error: e,
                    };
                    match mode {
                        ValidationMode::Benchmark => out.errors.push(err),
                        ValidationMode::RawLog => {
                            out.warnings.push(err);
                            out.samples.push(sample);
                        }
                    }
                }
            },
            Err(e) => out.errors.push(record_error(line_no, raw, e)),
        }
    }
    out
}

pub fn load_corpus(path: impl AsRef<Path>, mode: ValidationMode) -> Result<LoadedCorpus, CorpusError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_corpus(&content, mode))
}

/// Serializes samples in the corpus line format, one per line.
pub fn serialize_corpus(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.to_line());
        out.push('\n');
    }
    out
}

/// Per-type sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// All twelve types are present, zero-filled.
    pub per_type_count: BTreeMap<u8, usize>,
    pub total: usize,
}

impl CorpusStats {
    pub fn count(&self, type_id: u8) -> usize {
        self.per_type_count.get(&type_id).copied().unwrap_or(0)
    }

    pub fn accept_total(&self) -> usize {
        TAXONOMY
            .iter()
            .filter(|t| t.expected_label == Label::Accept)
            .map(|t| self.count(t.type_id))
            .sum()
    }
}

pub fn corpus_stats(samples: &[Sample]) -> CorpusStats {
    let mut per_type_count: BTreeMap<u8, usize> = TAXONOMY.iter().map(|t| (t.type_id, 0)).collect();
    for s in samples {
        *per_type_count.entry(s.type_id).or_insert(0) += 1;
    }
    CorpusStats {
        per_type_count,
        total: samples.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn taxonomy_label_mapping() {
        let accept: Vec<u8> = TAXONOMY
            .iter()
            .filter(|t| t.expected_label == Label::Accept)
            .map(|t| t.type_id)
            .collect();
        assert_eq!(accept, vec![0, 8, 9, 10, 11]);
        for (i, t) in TAXONOMY.iter().enumerate() {
            assert_eq!(usize::from(t.type_id), i);
        }
        assert_eq!(expected_label(0).unwrap(), Label::Accept);
        assert_eq!(expected_label(5).unwrap(), Label::Reject);
        assert_eq!(expected_label(9).unwrap(), Label::Accept);
        assert_eq!(expected_label(12), Err(SampleError::UnknownType(12)));
        assert_eq!(expected_label(-1), Err(SampleError::UnknownType(-1)));
    }

    #[test]
    fn label_reads_case_insensitively_writes_lowercase() {
        let l: Label = serde_json::from_str("\"ACCEPT\"").unwrap();
        assert_eq!(l, Label::Accept);
        let l: Label = serde_json::from_str("\"Reject\"").unwrap();
        assert_eq!(serde_json::to_string(&l).unwrap(), "\"reject\"");
        assert!(serde_json::from_str::<Label>("\"yes\"").is_err());
    }

    #[test]
    fn parses_supported_command() {
        let s = parse_sample(r#"{"id":"a","type_id":9,"text":"关掉空调","label":"accept"}"#).unwrap();
        assert_eq!(s.label, Label::Accept);
        assert!(s.history.is_empty());
        assert_eq!(s.text, "关掉空调");
    }

    #[test]
    fn legacy_history_is_split() {
        let s = parse_sample(
            r#"{"id":"b","type_id":9,"text":"打开厨房灯光","label":"ACCEPT","history":"来客人了~~~~~搞定"}"#,
        )
        .unwrap();
        assert_eq!(
            s.history,
            vec![DialogueTurn::user("来客人了"), DialogueTurn::assistant("搞定")]
        );
    }

    #[test]
    fn rejects_bad_records() {
        let e = parse_sample(r#"{"id":"c","type_id":12,"text":"x","label":"reject"}"#).unwrap_err();
        assert_eq!(e, SampleError::UnknownType(12));
        assert!(e.to_string().contains("unknown type"));

        let e = parse_sample(r#"{"id":"c","type_id":5,"text":"x","label":"accept"}"#).unwrap_err();
        assert!(matches!(e, SampleError::LabelMismatch { type_id: 5, .. }));

        let e = parse_sample(r#"{"id":"c","type_id":5,"text":"   ","label":"reject"}"#).unwrap_err();
        assert_eq!(e, SampleError::EmptyText);

        assert!(matches!(parse_sample("{not json"), Err(SampleError::Malformed(_))));
        assert_eq!(
            parse_sample(r#"{"type_id":5,"text":"x","label":"reject"}"#).unwrap_err(),
            SampleError::MissingField("id")
        );
        assert_eq!(
            parse_sample(r#"{"id":"c","type_id":5,"text":"x","label":"reject","history":"a~~~~~ "}"#)
                .unwrap_err(),
            SampleError::EmptyTurn(1)
        );
        let unordered = r#"{"id":"c","type_id":5,"text":"x","label":"reject","history":[
            {"speaker":"user","text":"a","timestamp":10},{"speaker":"assistant","text":"b","timestamp":5}]}"#
            .replace('\n', "");
        assert_eq!(parse_sample(&unordered).unwrap_err(), SampleError::HistoryOutOfOrder(1));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"d","type_id":3,"text":"这这这","label":"reject","history":[],"household_id":"h1","audio_ref":"a/d.wav","source":"log","score":0.5}"#;
        let s = parse_sample(line).unwrap();
        assert_eq!(s.extra.get("source"), Some(&Value::String("log".into())));
        assert_eq!(s.to_line(), line);
        assert_eq!(parse_sample(&s.to_line()).unwrap(), s);
    }

    #[test]
    fn load_modes() {
        let content = concat!(
            r#"{"id":"1","type_id":9,"text":"关掉空调","label":"accept"}"#,
            "\n",
            r#"{"id":"2","type_id":5,"text":"空调调到40摄氏度","label":"accept"}"#,
            "\n\n",
            r#"{"id":"3","type_id":2,"text":"汪汪","label":"reject"}"#,
            "\n"
        );
        let bench = parse_corpus(content, ValidationMode::Benchmark);
        assert_eq!(bench.samples.len(), 2);
        assert_eq!(bench.errors.len(), 1);
        assert_eq!(bench.errors[0].line, 2);
        assert_eq!(bench.errors[0].id.as_deref(), Some("2"));

        let raw = parse_corpus(content, ValidationMode::RawLog);
        assert_eq!(raw.samples.len(), 3);
        assert!(raw.errors.is_empty());
        assert_eq!(raw.warnings.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let content = concat!(
            r#"{"id":"1","type_id":9,"text":"关掉空调","label":"accept"}"#,
            "\n",
            r#"{"id":"2","type_id":9,"text":"#,
            "\n",
            r#"{"id":"3","type_id":0,"text":"小美小美","label":"accept"}"#,
        );
        let loaded = parse_corpus(content, ValidationMode::Benchmark);
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded.errors.len(), 1);
        assert_eq!(loaded.errors[0].line, 2);
        assert!(parse_corpus("", ValidationMode::Benchmark).samples.is_empty());
    }

    #[test]
    fn stats_counts() {
        let empty = corpus_stats(&[]);
        assert_eq!(empty.total, 0);
        assert_eq!(empty.per_type_count.len(), TYPE_COUNT);
        assert!(empty.per_type_count.values().all(|&c| c == 0));

        let mut samples = Vec::new();
        for i in 0..5 {
            samples.push(Sample::new(format!("a{i}"), 9, "打开灯").unwrap());
            samples.push(Sample::new(format!("b{i}"), 2, "叮咚").unwrap());
        }
        let stats = corpus_stats(&samples);
        assert_eq!(stats.total, 10);
        assert_eq!(stats.count(9), 5);
        assert_eq!(stats.count(2), 5);
        let nonzero: Vec<_> = stats.per_type_count.iter().filter(|(_, &c)| c > 0).collect();
        assert_eq!(nonzero, vec![(&2, &5), (&9, &5)]);
    }

    #[test]
    fn normalization_is_nfc_and_trimmed() {
        // "e" + combining acute composes to U+00E9.
        assert_eq!(normalize_text("  e\u{301} "), "\u{e9}");
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (0u8..12, "[a-z\u{4e00}-\u{4e20}]{1,8}", proptest::option::of("[a-z]{1,4}")).prop_map(
            |(ty, text, hh)| {
                let mut s = Sample::new("x", ty, text).unwrap();
                s.household_id = hh;
                s
            },
        )
    }

    proptest! {
        #[test]
        fn legacy_split_rejoins_exactly(segments in proptest::collection::vec("[^~]*[^~\\s][^~]*", 1..6)) {
            let text = segments.join(LEGACY_TURN_SEPARATOR);
            let turns = split_legacy_history(&text).unwrap();
            prop_assert_eq!(turns.len(), segments.len());
            for (i, t) in turns.iter().enumerate() {
                let want = if i % 2 == 0 { Speaker::User } else { Speaker::Assistant };
                prop_assert_eq!(t.speaker, want);
            }
            prop_assert_eq!(join_legacy_history(&turns), text);
        }

        #[test]
        fn stats_sum_and_round_trip(samples in proptest::collection::vec(arb_sample(), 0..60)) {
            let stats = corpus_stats(&samples);
            prop_assert_eq!(stats.per_type_count.values().sum::<usize>(), stats.total);
            prop_assert_eq!(stats.total, samples.len());
            let loaded = parse_corpus(&serialize_corpus(&samples), ValidationMode::Benchmark);
            prop_assert!(loaded.errors.is_empty());
            prop_assert_eq!(corpus_stats(&loaded.samples), stats);
        }
    }
}
