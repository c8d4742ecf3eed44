//! Rejection prompt construction and verdict parsing.
//!
//! A prompt is assembled from a template with four named placeholders:
//! `{rules}`, `{cases}`, `{history}` and `{query}`. `{cases}` and `{history}`
//! must sit on lines of their own; when a section has nothing to show the
//! whole line is dropped, so lower tiers never carry empty section headers.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{DialogueTurn, Label, Speaker, UtteranceType, TYPE_COUNT};
use crate::kb::BadCase;

/// At most this many knowledge-base cases are placed in a prompt.
pub const MAX_PROMPT_CASES: usize = 3;

const PLACEHOLDERS: [&str; 4] = ["rules", "cases", "history", "query"];

/// Which tier of the rejection prompt is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Generic,
    WithHistory,
    WithHistoryAndCases,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [
        PromptMode::Generic,
        PromptMode::WithHistory,
        PromptMode::WithHistoryAndCases,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Generic => "generic",
            PromptMode::WithHistory => "with_history",
            PromptMode::WithHistoryAndCases => "with_history_and_cases",
        }
    }

    pub fn uses_history(self) -> bool {
        self >= PromptMode::WithHistory
    }

    pub fn uses_cases(self) -> bool {
        self == PromptMode::WithHistoryAndCases
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected generic, with_history or with_history_and_cases"))
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locale {
    #[default]
    Zh,
    En,
}

struct LocaleText {
    template: &'static str,
    accept_header: &'static str,
    cases_header: &'static str,
    history_header: &'static str,
}

const ZH: LocaleText = LocaleText {
    template: "根据对话历史和当前文本，判断当前语句应被接受还是拒识。\n\
拒识规则如下：\n\
{rules}\n\
{cases}\n\
只返回一个 JSON 对象：若接受，返回 {\"result\": \"YES\"}；否则返回 {\"result\": \"NO\"}。不要输出任何其他内容。\n\
{history}\n\
当前文本：{query}\n",
    accept_header: "以下情况应接受：",
    cases_header: "本家庭知识库中最相似的习惯性接受/拒识语句：",
    history_header: "对话历史：",
};

const EN: LocaleText = LocaleText {
    template: "Given the dialogue history and the current text, decide whether the current utterance should be accepted or rejected.\n\
Rejection rules are:\n\
{rules}\n\
{cases}\n\
Return only a JSON object: if accepted, {\"result\": \"YES\"}; otherwise {\"result\": \"NO\"}. No extra text.\n\
{history}\n\
Text: {query}\n",
    accept_header: "Accept the utterance when it is:",
    cases_header: "Most similar household-specific habitual accept/reject utterances from the knowledge base:",
    history_header: "Dialogue history:",
};

fn locale_text(locale: Locale) -> &'static LocaleText {
    match locale {
        Locale::Zh => &ZH,
        Locale::En => &EN,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("taxonomy is incomplete: missing type {0}")]
    IncompleteTaxonomy(u8),
    #[error("taxonomy lists type {0} more than once")]
    DuplicateType(u8),
    #[error("template is missing placeholder {{{0}}}")]
    MissingPlaceholder(&'static str),
    #[error("template repeats placeholder {{{0}}}")]
    RepeatedPlaceholder(&'static str),
    #[error("placeholder {{{0}}} must be on a line of its own")]
    PlaceholderNotOnOwnLine(&'static str),
    #[error("query is empty")]
    EmptyQuery,
    #[error("{mode} mode does not take {what}")]
    ModeMismatch { mode: PromptMode, what: &'static str },
    #[error("at most {MAX_PROMPT_CASES} cases fit in a prompt, got {0}")]
    TooManyCases(usize),
}

/// Rejection rules rendered from the taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub rules_text: String,
}

/// Renders one numbered clause per reject type, followed by the accept types.
/// Output is ordered by `type_id` regardless of input order.
pub fn render_rules(taxonomy: &[UtteranceType], locale: Locale) -> Result<RuleSet, PromptError> {
    let mut by_id: [Option<&UtteranceType>; TYPE_COUNT] = [None; TYPE_COUNT];
    for t in taxonomy {
        let slot = by_id
            .get_mut(usize::from(t.type_id))
            .ok_or(PromptError::IncompleteTaxonomy(t.type_id))?;
        if slot.is_some() {
            return Err(PromptError::DuplicateType(t.type_id));
        }
        *slot = Some(t);
    }
    let mut types = Vec::with_capacity(TYPE_COUNT);
    for (id, t) in by_id.iter().enumerate() {
        types.push(t.ok_or(PromptError::IncompleteTaxonomy(id as u8))?);
    }
    let lt = locale_text(locale);
    let definition = |t: &UtteranceType| match locale {
        Locale::Zh => t.definition_zh,
        Locale::En => t.definition_en,
    };
    let mut lines = Vec::new();
    let rejects = types.iter().filter(|t| t.expected_label == Label::Reject);
    for (i, t) in rejects.enumerate() {
        lines.push(format!("{}. {}", i + 1, definition(t)));
    }
    lines.push(lt.accept_header.to_string());
    for t in types.iter().filter(|t| t.expected_label == Label::Accept) {
        lines.push(format!("- {}", definition(t)));
    }
    Ok(RuleSet {
        rules_text: lines.join("\n"),
    })
}

/// A validated prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'static str),
}

fn scan(line: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = line;
    let mut literal_start = 0;
    let mut offset = 0;
    while let Some(pos) = rest.find('{') {
        let at = offset + pos;
        let tail = &line[at + 1..];
        let hit = PLACEHOLDERS
            .iter()
            .find(|name| tail.starts_with(*name) && tail[name.len()..].starts_with('}'));
        match hit {
            Some(name) => {
                if literal_start < at {
                    pieces.push(Piece::Literal(&line[literal_start..at]));
                }
                pieces.push(Piece::Slot(name));
                offset = at + name.len() + 2;
                literal_start = offset;
            }
            None => offset = at + 1,
        }
        rest = &line[offset..];
    }
    if literal_start < line.len() {
        pieces.push(Piece::Literal(&line[literal_start..]));
    }
    pieces
}

impl PromptTemplate {
    pub fn parse(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        for name in PLACEHOLDERS {
            let mut count = 0;
            for line in text.split('\n') {
                let pieces = scan(line);
                let here = pieces.iter().filter(|p| matches!(p, Piece::Slot(n) if *n == name)).count();
                if here > 0 && matches!(name, "cases" | "history") && line.trim() != format!("{{{name}}}") {
                    return Err(PromptError::PlaceholderNotOnOwnLine(name));
                }
                count += here;
            }
            match count {
                0 => return Err(PromptError::MissingPlaceholder(name)),
                1 => {}
                _ => return Err(PromptError::RepeatedPlaceholder(name)),
            }
        }
        Ok(Self { text })
    }

    pub fn builtin(locale: Locale) -> Self {
        Self::parse(locale_text(locale).template).expect("built-in template is valid")
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    fn render(&self, rules: &str, cases: &str, history: &str, query: &str) -> String {
        let mut out = String::new();
        let lines: Vec<&str> = self.text.split('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            let trimmed = line.trim();
            if (trimmed == "{cases}" && cases.is_empty()) || (trimmed == "{history}" && history.is_empty()) {
                continue;
            }
            for piece in scan(line) {
                match piece {
                    Piece::Literal(s) => out.push_str(s),
                    Piece::Slot("rules") => out.push_str(rules),
                    Piece::Slot("cases") => out.push_str(cases),
                    Piece::Slot("history") => out.push_str(history),
                    Piece::Slot(_) => out.push_str(query),
                }
            }
            if i + 1 < lines.len() {
                out.push('\n');
            }
        }
        out
    }
}

/// A fully rendered prompt plus what went into it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub mode: PromptMode,
    pub case_count: usize,
    pub history_turns: usize,
    /// The current query as placed in the prompt.
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBuilder {
    template: PromptTemplate,
    locale: Locale,
    /// Whether assistant replies from memory are shown in the history section.
    pub include_assistant_turns: bool,
}

impl PromptBuilder {
    pub fn new(locale: Locale) -> Self {
        Self {
            template: PromptTemplate::builtin(locale),
            locale,
            include_assistant_turns: true,
        }
    }

    pub fn with_template(locale: Locale, template: PromptTemplate) -> Self {
        Self {
            template,
            ..Self::new(locale)
        }
    }

    pub fn locale(&self) -> Locale {
        self.locale
    }

    pub fn build(
        &self,
        mode: PromptMode,
        rules: &RuleSet,
        query: &str,
        history: &[DialogueTurn],
        cases: &[BadCase],
    ) -> Result<PromptText, PromptError> {
        if query.trim().is_empty() {
            return Err(PromptError::EmptyQuery);
        }
        if !mode.uses_history() && !history.is_empty() {
            return Err(PromptError::ModeMismatch { mode, what: "history" });
        }
        if !mode.uses_cases() && !cases.is_empty() {
            return Err(PromptError::ModeMismatch { mode, what: "cases" });
        }
        if cases.len() > MAX_PROMPT_CASES {
            return Err(PromptError::TooManyCases(cases.len()));
        }
        let lt = locale_text(self.locale);

        let cases_section = if cases.is_empty() {
            String::new()
        } else {
            let mut s = lt.cases_header.to_string();
            for (i, c) in cases.iter().enumerate() {
                s.push_str(&format!("\n{}. {} → {}", i + 1, c.utterance, c.corrected_label));
            }
            s
        };

        let shown: Vec<&DialogueTurn> = history
            .iter()
            .filter(|t| self.include_assistant_turns || t.speaker == Speaker::User)
            .collect();
        let history_section = if shown.is_empty() {
            String::new()
        } else {
            let mut s = lt.history_header.to_string();
            for t in &shown {
                s.push_str(&format!("\n{}: {}", t.speaker.as_str(), t.text));
            }
            s
        };

        let text = self
            .template
            .render(&rules.rules_text, &cases_section, &history_section, query);
        Ok(PromptText {
            text,
            mode,
            case_count: cases.len(),
            history_turns: shown.len(),
            query: query.to_string(),
        })
    }
}

/// Parsed classifier output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub label: Label,
    pub raw: String,
}

/// Canonical response body for a verdict.
pub fn render_verdict(label: Label) -> String {
    match label {
        Label::Accept => r#"{"result":"YES"}"#.to_string(),
        Label::Reject => r#"{"result":"NO"}"#.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// The whole response must be one JSON object with only a `result` field.
    Strict,
    /// The first syntactically valid JSON object in the response is used.
    Tolerant,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerdictError {
    #[error("no JSON object found in response")]
    NoJsonObject,
    #[error("response has text outside the JSON object")]
    ExtraText,
    #[error("result field missing")]
    MissingResult,
    #[error("unexpected fields besides result")]
    ExtraFields,
    #[error("unrecognized verdict {0:?}")]
    Unrecognized(String),
}

fn verdict_from_object(obj: &serde_json::Map<String, Value>, raw: &str) -> Result<Verdict, VerdictError> {
    let value = obj.get("result").ok_or(VerdictError::MissingResult)?;
    let s = match value {
        Value::String(s) => s.as_str(),
        other => return Err(VerdictError::Unrecognized(other.to_string())),
    };
    let label = if s.eq_ignore_ascii_case("yes") {
        Label::Accept
    } else if s.eq_ignore_ascii_case("no") {
        Label::Reject
    } else {
        return Err(VerdictError::Unrecognized(s.to_string()));
    };
    Ok(Verdict {
        label,
        raw: raw.to_string(),
    })
}

/// Extracts the first syntactically valid JSON object in `raw`.
fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(at, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[at..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(obj))) => Some(obj),
            _ => None,
        }
    })
}

pub fn parse_verdict(raw: &str, mode: ParseMode) -> Result<Verdict, VerdictError> {
    match mode {
        ParseMode::Strict => {
            // JSON's own whitespace around the value is allowed; anything else is not.
            let value: Value = serde_json::from_str(raw).map_err(|_| {
                if first_object(raw).is_some() {
                    VerdictError::ExtraText
                } else {
                    VerdictError::NoJsonObject
                }
            })?;
            let Value::Object(obj) = value else {
                return Err(VerdictError::NoJsonObject);
            };
            if obj.len() > 1 && obj.contains_key("result") {
                return Err(VerdictError::ExtraFields);
            }
            verdict_from_object(&obj, raw)
        }
        ParseMode::Tolerant => {
            let obj = first_object(raw).ok_or(VerdictError::NoJsonObject)?;
            verdict_from_object(&obj, raw)
        }
    }
}
