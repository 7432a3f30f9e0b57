//! Text preprocessing for statements and captions.
//!
//! Statements get their person identifiers standardized ("Alice helps Bob"
//! becomes "the person helps another person"), captions are split into one
//! record per sentence, and both can be trimmed to the central length band
//! before the querying strategies run.

use crate::Label;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::LazyLock;
use thiserror::Error;

const DEFAULT_ABBREVIATIONS: &str = include_str!("../config/abbreviations.txt");
const DEFAULT_FIRST_NAMES: &str = include_str!("../config/first_names.txt");

/// Tokenization used for every length computation in this crate.
pub const TOKENIZATION: &str = "whitespace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementKind {
    Precondition,
    Action,
}

/// A normalized precondition or action sentence.
///
/// `pair_id` and `label` link the statement back to the statement-bank row it
/// came from, so that a grounded precondition can be turned into a labeled
/// instance about its paired action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub text: String,
    pub kind: StatementKind,
    pub source: String,
    pub token_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

/// One caption sentence tied to an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub text: String,
    pub image_ref: String,
    pub source: String,
}

/// Anything whose whitespace token count can be length-filtered.
pub trait TokenLen {
    fn token_len(&self) -> usize;
}

impl TokenLen for Statement {
    fn token_len(&self) -> usize {
        self.token_len
    }
}

impl TokenLen for Caption {
    fn token_len(&self) -> usize {
        count_tokens(&self.text)
    }
}

impl TokenLen for usize {
    fn token_len(&self) -> usize {
        *self
    }
}

pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Why a record was dropped. Written to the rejects sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    #[error("record is empty after normalization")]
    EmptyAfterNormalization,
    #[error("source `{source_tag}` is not in the configured registry")]
    UnknownSource { source_tag: String },
    #[error("record has no image reference")]
    MissingImage,
    #[error("search query is empty")]
    EmptyQuery,
    #[error("source `{source_tag}` is excluded from image querying")]
    ExcludedSource { source_tag: String },
    #[error("provider failed after {attempts} attempts: {message}")]
    ProviderFailed { attempts: u32, message: String },
    #[error("hypothesis has no tokens to mask")]
    EmptyHypothesis,
}

/// A skipped record and its reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    #[serde(flatten)]
    pub reason: SkipReason,
}

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("length filter needs at least one item")]
    EmptyInput,
}

/// Byte range of a person mention inside the raw text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PersonSpan {
    pub start: usize,
    pub end: usize,
}

/// Source of person-name spans. Neural detectors plug in through
/// [`SidecarSpans`].
pub trait PersonDetector: Send + Sync {
    fn detect(&self, id: &str, text: &str) -> Vec<PersonSpan>;
}

static FIXED_IDENTIFIER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:Alice|Bob|Charlie|Person ?[XYZ]|person[xyz])\b").expect("static regex"));

/// The fixed placeholder names used by template-generated statement banks.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedIdentifiers;

impl PersonDetector for FixedIdentifiers {
    fn detect(&self, _id: &str, text: &str) -> Vec<PersonSpan> {
        FIXED_IDENTIFIER
            .find_iter(text)
            .map(|m| PersonSpan {
                start: m.start(),
                end: m.end(),
            })
            .collect()
    }
}

/// First-name lookup. Only capitalized tokens are considered, so lowercase
/// words such as "grace" in running text are left alone.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    names: HashSet<String>,
}

impl Gazetteer {
    pub fn from_lines(text: &str) -> Self {
        let names = config_lines(text).map(|l| l.to_lowercase()).collect();
        Self { names }
    }

    pub fn bundled() -> Self {
        Self::from_lines(DEFAULT_FIRST_NAMES)
    }
}

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b[A-Za-z]+\b").expect("static regex"));

impl PersonDetector for Gazetteer {
    fn detect(&self, _id: &str, text: &str) -> Vec<PersonSpan> {
        WORD.find_iter(text)
            .filter(|m| m.as_str().starts_with(|c: char| c.is_ascii_uppercase()))
            .filter(|m| self.names.contains(&m.as_str().to_lowercase()))
            .map(|m| PersonSpan {
                start: m.start(),
                end: m.end(),
            })
            .collect()
    }
}

/// Spans supplied by an external detector, keyed by record id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SidecarSpans {
    pub spans: HashMap<String, Vec<PersonSpan>>,
}

/// One line of a sidecar spans file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub id: String,
    pub spans: Vec<PersonSpan>,
}

impl SidecarSpans {
    pub fn from_records(records: Vec<SidecarRecord>) -> Self {
        let spans = records.into_iter().map(|r| (r.id, r.spans)).collect();
        Self { spans }
    }
}

impl PersonDetector for SidecarSpans {
    fn detect(&self, id: &str, text: &str) -> Vec<PersonSpan> {
        self.spans
            .get(id)
            .map(|spans| {
                spans
                    .iter()
                    .copied()
                    .filter(|s| s.start < s.end && text.get(s.start..s.end).is_some())
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Runs several detectors and merges their spans.
pub struct DetectorChain(pub Vec<Box<dyn PersonDetector>>);

impl PersonDetector for DetectorChain {
    fn detect(&self, id: &str, text: &str) -> Vec<PersonSpan> {
        self.0.iter().flat_map(|d| d.detect(id, text)).collect()
    }
}

/// Replacement phrase for the `index`-th distinct person (0-based).
pub fn person_phrase(index: usize) -> String {
    const ORDINALS: [&str; 8] = [
        "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth",
    ];
    match index {
        0 => "the person".to_string(),
        1 => "another person".to_string(),
        i if i - 2 < ORDINALS.len() => format!("a {} person", ORDINALS[i - 2]),
        i => format!("person number {}", i + 1),
    }
}

/// Replaces person spans by role phrases, numbering distinct entities in order
/// of first occurrence. Overlapping spans keep the earliest, longest one.
pub fn replace_persons(raw: &str, spans: &[PersonSpan]) -> String {
    let mut spans: Vec<PersonSpan> = spans
        .iter()
        .copied()
        .filter(|s| s.start < s.end && raw.get(s.start..s.end).is_some())
        .collect();
    spans.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));

    let mut entities: HashMap<String, usize> = HashMap::new();
    let mut out = String::with_capacity(raw.len());
    let mut cursor = 0;
    for span in spans {
        if span.start < cursor {
            continue;
        }
        let key = raw[span.start..span.end].to_lowercase();
        let next = entities.len();
        let index = *entities.entry(key).or_insert(next);
        out.push_str(&raw[cursor..span.start]);
        out.push_str(&person_phrase(index));
        cursor = span.end;
    }
    out.push_str(&raw[cursor..]);
    out
}

static POSSESSIVE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bthe person(?:'s|\x{2019}s)\b").expect("static regex"));

/// Lowercases, rewrites "the person's" to "their" and collapses whitespace.
pub fn finish_text(text: &str) -> String {
    let lowered = text.to_lowercase();
    let rewritten = POSSESSIVE.replace_all(&lowered, "their");
    collapse_whitespace(&rewritten)
}

pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Allowed statement-bank tags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SourceRegistry {
    tags: BTreeSet<String>,
}

impl SourceRegistry {
    pub fn new<I, S>(tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            tags: tags.into_iter().map(Into::into).collect(),
        }
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }
}

/// Normalizes one statement given the person spans found in `raw`.
pub fn normalize_statement(
    id: &str,
    raw: &str,
    kind: StatementKind,
    source: &str,
    person_spans: &[PersonSpan],
    registry: &SourceRegistry,
) -> Result<Statement, SkipReason> {
    if !registry.contains(source) {
        return Err(SkipReason::UnknownSource {
            source_tag: source.to_string(),
        });
    }
    let text = finish_text(&replace_persons(raw, person_spans));
    if text.is_empty() {
        return Err(SkipReason::EmptyAfterNormalization);
    }
    Ok(Statement {
        id: id.to_string(),
        token_len: count_tokens(&text),
        text,
        kind,
        source: source.to_string(),
        pair_id: None,
        label: None,
    })
}

/// Span detection followed by [`replace_persons`] and [`finish_text`].
pub fn normalize_text(id: &str, raw: &str, detector: &dyn PersonDetector) -> String {
    let spans = detector.detect(id, raw);
    finish_text(&replace_persons(raw, &spans))
}

/// A raw statement-bank row: one precondition, one action and their label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnliPair {
    pub id: String,
    pub precondition: String,
    pub action: String,
    pub label: Label,
    pub source: String,
}

/// Normalizes both sides of a statement-bank row. Statement ids are
/// `{pair}:p` and `{pair}:a`.
pub fn normalize_pair(
    pair: &PnliPair,
    detector: &dyn PersonDetector,
    registry: &SourceRegistry,
) -> Result<[Statement; 2], Reject> {
    let side = |suffix: &str, raw: &str, kind| {
        let id = format!("{}:{suffix}", pair.id);
        // Spans for both sides come from the pair's id so sidecar files can
        // key on either form.
        let mut spans = detector.detect(&id, raw);
        if spans.is_empty() {
            spans = detector.detect(&pair.id, raw);
        }
        normalize_statement(&id, raw, kind, &pair.source, &spans, registry)
            .map(|mut s| {
                s.pair_id = Some(pair.id.clone());
                s.label = Some(pair.label);
                s
            })
            .map_err(|reason| Reject { id: id.clone(), reason })
    };
    let precondition = side("p", &pair.precondition, StatementKind::Precondition)?;
    let action = side("a", &pair.action, StatementKind::Action)?;
    Ok([precondition, action])
}

fn config_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

static PERSON_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)<\s*person\s*>").expect("static regex"));

/// Rule-based sentence splitter with an abbreviation guard.
#[derive(Debug, Clone)]
pub struct SentenceSplitter {
    abbreviations: HashSet<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self::from_lines(DEFAULT_ABBREVIATIONS)
    }
}

impl SentenceSplitter {
    pub fn from_lines(text: &str) -> Self {
        let abbreviations = config_lines(text).map(|l| l.to_lowercase()).collect();
        Self { abbreviations }
    }

    /// Splits a raw caption into sentence fragments.
    ///
    /// Newlines always split. Inside a line, `.`, `!` or `?` followed by
    /// whitespace and a letter ends a sentence unless the word it closes is a
    /// guarded abbreviation or a single-letter initial. `<PERSON>` tags become
    /// "the person".
    pub fn split(&self, raw: &str) -> Vec<String> {
        let tagged = PERSON_TAG.replace_all(raw, "the person");
        let mut out = Vec::new();
        for line in tagged.split(['\n', '\r']) {
            for fragment in self.split_line(line) {
                let fragment = collapse_whitespace(fragment);
                if !fragment.is_empty() {
                    out.push(fragment);
                }
            }
        }
        out
    }

    fn split_line<'a>(&self, line: &'a str) -> Vec<&'a str> {
        let chars: Vec<(usize, char)> = line.char_indices().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        for (i, &(byte, c)) in chars.iter().enumerate() {
            if !matches!(c, '.' | '!' | '?') {
                continue;
            }
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            let followed_by_letter = j > i + 1 && j < chars.len() && chars[j].1.is_alphabetic();
            if !followed_by_letter {
                continue;
            }
            let end = byte + c.len_utf8();
            if c == '.' && self.is_guarded(&line[start..end]) {
                continue;
            }
            pieces.push(&line[start..end]);
            start = chars[j].0;
        }
        pieces.push(&line[start..]);
        pieces
    }

    fn is_guarded(&self, sentence_so_far: &str) -> bool {
        let word = sentence_so_far
            .rsplit(char::is_whitespace)
            .next()
            .unwrap_or("")
            .trim_start_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        let initial = word.len() == 2 && word.starts_with(|c: char| c.is_alphabetic());
        initial || self.abbreviations.contains(&word)
    }
}

/// Splits with the bundled abbreviation list.
pub fn split_caption(raw: &str) -> Vec<String> {
    SentenceSplitter::default().split(raw)
}

/// A raw caption record before splitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCaption {
    pub id: String,
    pub text: String,
    pub image_ref: String,
    pub source: String,
}

/// Splits and normalizes a caption; fragment `i` gets id `{id}#{i}`.
pub fn normalize_caption(raw: &RawCaption, splitter: &SentenceSplitter) -> Result<Vec<Caption>, SkipReason> {
    if raw.image_ref.trim().is_empty() {
        return Err(SkipReason::MissingImage);
    }
    let captions: Vec<Caption> = splitter
        .split(&raw.text)
        .iter()
        .map(|s| finish_text(s))
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, text)| Caption {
            id: format!("{}#{i}", raw.id),
            text,
            image_ref: raw.image_ref.clone(),
            source: raw.source.clone(),
        })
        .collect();
    if captions.is_empty() {
        return Err(SkipReason::EmptyAfterNormalization);
    }
    Ok(captions)
}

/// Statistics of one length-filter pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub mean: f64,
    pub stddev: f64,
    pub lower: i64,
    pub upper: i64,
    pub total: usize,
    pub retained: usize,
    pub tokenization: String,
}

/// Inclusive token-length band `[round(mean - sd), round(mean + sd)]`.
pub fn retention_band(mean: f64, stddev: f64) -> (i64, i64) {
    ((mean - stddev).round() as i64, (mean + stddev).round() as i64)
}

/// Keeps items whose token length lies within one population standard
/// deviation of the mean, with the band endpoints rounded.
pub fn length_filter<T: TokenLen>(items: Vec<T>) -> Result<(Vec<T>, LengthReport), NormalizeError> {
    if items.is_empty() {
        return Err(NormalizeError::EmptyInput);
    }
    let total = items.len();
    let n = total as f64;
    let mean = items.iter().map(|i| i.token_len() as f64).sum::<f64>() / n;
    let variance = items.iter().map(|i| (i.token_len() as f64 - mean).powi(2)).sum::<f64>() / n;
    let stddev = variance.sqrt();
    let (lower, upper) = retention_band(mean, stddev);
    let retained: Vec<T> = items
        .into_iter()
        .filter(|i| (lower..=upper).contains(&(i.token_len() as i64)))
        .collect();
    let report = LengthReport {
        mean,
        stddev,
        lower,
        upper,
        total,
        retained: retained.len(),
        tokenization: TOKENIZATION.to_string(),
    };
    Ok((retained, report))
}
