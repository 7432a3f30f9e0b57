//! Labeling functions for extraction from captions.
//!
//! A labeling function (LF) is a conjunction pattern such as
//! `{A} unless {P}`. Matching it against a caption yields an action span, a
//! precondition span and a weak label taken from the LF's class. Each LF
//! carries a precision estimated from a small annotated sample, and only
//! LFs above a precision threshold feed the final dataset.

use crate::normalize::Caption;
use crate::Label;
use fancy_regex::Regex;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use thiserror::Error;

const DEFAULT_TABLE: &str = include_str!("../config/lf_table.txt");
const DEFAULT_VERBS: &str = include_str!("../config/verbs.txt");

/// Sample size used when estimating LF precision.
pub const DEFAULT_CALIBRATION_SIZE: usize = 20;
/// Precision threshold used for the released data.
pub const DEFAULT_THRESHOLD: f64 = 0.6;
/// Shortest allowed action or precondition capture, in tokens.
pub const MIN_SPAN_TOKENS: usize = 2;

#[derive(Debug, Error)]
pub enum LfError {
    #[error("lf table row {row} ({name}): {message}")]
    Config { row: usize, name: String, message: String },
    #[error("unknown labeling function `{0}`")]
    UnknownLf(String),
    #[error("annotation score must be 0 or 1, got {0}")]
    InvalidScore(u8),
    #[error("annotation for {caption_id} does not belong to the sample of `{lf_name}`")]
    UnexpectedAnnotation { caption_id: String, lf_name: String },
    #[error("sampled instances without annotation: {0:?}")]
    MissingAnnotations(Vec<String>),
    #[error("bad threshold range `{0}`; expected start:end:step")]
    ThresholdRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelClass {
    Enables,
    Disables,
}

impl LabelClass {
    pub fn label(self) -> Label {
        match self {
            LabelClass::Enables => Label::Allow,
            LabelClass::Disables => Label::Prevent,
        }
    }
}

impl fmt::Display for LabelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelClass::Enables => "enables",
            LabelClass::Disables => "disables",
        })
    }
}

/// One row of the LF table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingFunction {
    pub name: String,
    pub label_class: LabelClass,
    pub template: String,
    pub pos_check: bool,
    pub precision: Option<f64>,
    /// False when fewer than the calibration sample size matched.
    pub min_sample_met: bool,
}

#[derive(Debug, Clone)]
struct CompiledLf {
    lf: LabelingFunction,
    matcher: Regex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Action,
    Precondition,
}

/// Translates a template into a regex with `action` and `precondition`
/// groups. The first placeholder is lazy, the second greedy, so the first
/// occurrence of the connective splits the sentence.
fn compile_template(template: &str) -> Result<String, String> {
    let mut out = String::with_capacity(template.len() + 48);
    let mut slots = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        let slot = match name {
            Some("A") | Some("E") => Some(Slot::Action),
            Some("P") | Some("NP") => Some(Slot::Precondition),
            Some(n) if !n.is_empty() && n.chars().all(|c| c.is_ascii_uppercase()) => {
                return Err(format!("unknown placeholder {{{n}}}"));
            }
            _ => None,
        };
        match slot {
            Some(slot) => {
                out.push_str(&rest[..open]);
                out.push_str(&format!("\u{0}{}", slots.len()));
                slots.push(slot);
                rest = &after[close.unwrap() + 1..];
            }
            None => {
                // A regex quantifier like {2,3}; copy through.
                out.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    out.push_str(rest);

    let actions = slots.iter().filter(|s| **s == Slot::Action).count();
    let preconditions = slots.len() - actions;
    if actions != 1 || preconditions != 1 {
        return Err(format!(
            "template needs exactly one action-class and one precondition-class placeholder, \
             found {actions} and {preconditions}"
        ));
    }
    for (i, slot) in slots.iter().enumerate() {
        let group = match slot {
            Slot::Action => "action",
            Slot::Precondition => "precondition",
        };
        let body = if i == 0 { ".+?" } else { ".+" };
        out = out.replace(&format!("\u{0}{i}"), &format!("(?P<{group}>{body})"));
    }
    Ok(out)
}

/// Byte ranges of one LF match inside the caption text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSpans {
    pub action: Range<usize>,
    pub precondition: Range<usize>,
    /// Literal text between the two captures.
    pub connective: Range<usize>,
}

/// Part-of-speech confirmation hook for LFs whose conjunction has other
/// senses ("due to" as an adjective phrase, for instance).
pub trait ConjunctionCheck: Send + Sync {
    fn confirm(&self, caption: &Caption, lf: &LabelingFunction, spans: &MatchSpans) -> bool;
}

/// Closed-class heuristic: the connective must not follow a determiner, and
/// both clauses must contain a verb from the bundled verb list.
#[derive(Debug, Clone)]
pub struct ClosedClassHeuristic {
    verbs: HashSet<String>,
    determiners: HashSet<&'static str>,
}

impl Default for ClosedClassHeuristic {
    fn default() -> Self {
        Self::with_verbs(DEFAULT_VERBS)
    }
}

impl ClosedClassHeuristic {
    pub fn with_verbs(list: &str) -> Self {
        let verbs = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        let determiners = [
            "a", "an", "the", "this", "that", "these", "those", "my", "your", "his", "her", "its", "our", "their",
            "some", "any", "no", "every", "each",
        ]
        .into_iter()
        .collect();
        Self { verbs, determiners }
    }

    fn has_verb(&self, text: &str) -> bool {
        words(text).any(|w| self.verbs.contains(&w))
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl ConjunctionCheck for ClosedClassHeuristic {
    fn confirm(&self, caption: &Caption, _lf: &LabelingFunction, spans: &MatchSpans) -> bool {
        let text = &caption.text;
        let before = &text[..spans.connective.start];
        let preceded_by_determiner = words(before)
            .last()
            .is_some_and(|w| self.determiners.contains(w.as_str()));
        !preceded_by_determiner
            && self.has_verb(&text[spans.action.clone()])
            && self.has_verb(&text[spans.precondition.clone()])
    }
}

/// Decisions from an external tagger, keyed by `(caption_id, lf_name)`.
/// Captions without a decision fall back to the heuristic.
#[derive(Debug, Clone, Default)]
pub struct SidecarPos {
    decisions: HashMap<(String, String), bool>,
    fallback: ClosedClassHeuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosDecision {
    pub caption_id: String,
    pub lf_name: String,
    pub conjunction: bool,
}

impl SidecarPos {
    pub fn new(records: Vec<PosDecision>) -> Self {
        let decisions = records
            .into_iter()
            .map(|r| ((r.caption_id, r.lf_name), r.conjunction))
            .collect();
        Self {
            decisions,
            fallback: ClosedClassHeuristic::default(),
        }
    }
}

impl ConjunctionCheck for SidecarPos {
    fn confirm(&self, caption: &Caption, lf: &LabelingFunction, spans: &MatchSpans) -> bool {
        match self.decisions.get(&(caption.id.clone(), lf.name.clone())) {
            Some(&decision) => decision,
            None => self.fallback.confirm(caption, lf, spans),
        }
    }
}

/// An action/precondition pair pulled from one caption by one LF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedInstance {
    pub caption_id: String,
    pub image_ref: String,
    pub caption_source: String,
    pub action_text: String,
    pub precondition_text: String,
    pub label: Label,
    pub lf_name: String,
    pub lf_precision: Option<f64>,
    /// Winner of the tie-break among all LFs matching this caption.
    pub primary: bool,
}

/// A compiled LF table.
#[derive(Debug, Clone)]
pub struct LfTable {
    lfs: Vec<CompiledLf>,
}

fn trim_span(text: &str, range: Range<usize>) -> Range<usize> {
    let slice = &text[range.clone()];
    let is_edge = |c: char| !c.is_alphanumeric();
    let start = range.start + (slice.len() - slice.trim_start_matches(is_edge).len());
    let trimmed = slice.trim_matches(is_edge);
    start..start + trimmed.len()
}

impl LfTable {
    /// The bundled table.
    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled lf table compiles")
    }

    /// Parses `label_class | name | precision | template` rows. The template
    /// is the last column and may itself contain `|`.
    pub fn parse(text: &str) -> Result<Self, LfError> {
        let mut lfs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let row = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.splitn(4, '|').map(str::trim).collect();
            let err = |name: &str, message: String| LfError::Config {
                row,
                name: name.to_string(),
                message,
            };
            if cols.len() != 4 {
                return Err(err(line, "expected 4 columns".into()));
            }
            let (pos_check, name) = match cols[1].strip_prefix("**").and_then(|n| n.strip_suffix("**")) {
                Some(inner) => (true, inner.trim()),
                None => (false, cols[1]),
            };
            let label_class = match cols[0] {
                "enables" => LabelClass::Enables,
                "disables" => LabelClass::Disables,
                other => return Err(err(name, format!("unknown label class `{other}`"))),
            };
            let (precision, min_sample_met) = parse_precision(cols[2]).map_err(|m| err(name, m))?;
            let template = cols[3].to_string();
            let pattern = compile_template(&template).map_err(|m| err(name, m))?;
            let matcher = Regex::new(&pattern).map_err(|e| err(name, e.to_string()))?;
            lfs.push(CompiledLf {
                lf: LabelingFunction {
                    name: name.to_string(),
                    label_class,
                    template,
                    pos_check,
                    precision,
                    min_sample_met,
                },
                matcher,
            });
        }
        Ok(Self { lfs })
    }

    /// Renders the table back to its text form.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# label_class | name | precision | template\n");
        for CompiledLf { lf, .. } in &self.lfs {
            let name = if lf.pos_check {
                format!("**{}**", lf.name)
            } else {
                lf.name.clone()
            };
            let precision = match lf.precision {
                None => "---".to_string(),
                Some(p) if lf.min_sample_met => format!("{p:.3}"),
                Some(p) => format!("{p:.3}*"),
            };
            out.push_str(&format!(
                "{} | {name} | {precision} | {}\n",
                lf.label_class, lf.template
            ));
        }
        out
    }

    pub fn functions(&self) -> impl Iterator<Item = &LabelingFunction> {
        self.lfs.iter().map(|c| &c.lf)
    }

    pub fn get(&self, name: &str) -> Option<&LabelingFunction> {
        self.functions().find(|lf| lf.name == name)
    }

    pub fn len(&self) -> usize {
        self.lfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lfs.is_empty()
    }

    /// Names of the calibrated LFs whose precision reaches `threshold`.
    pub fn retained_at(&self, threshold: f64) -> Vec<&str> {
        self.functions()
            .filter(|lf| lf.precision.is_some_and(|p| p >= threshold))
            .map(|lf| lf.name.as_str())
            .collect()
    }

    /// Records a calibration result on the named LF.
    pub fn apply_calibration(&mut self, calibration: &Calibration) -> Result<(), LfError> {
        let lf = self
            .lfs
            .iter_mut()
            .find(|c| c.lf.name == calibration.lf_name)
            .ok_or_else(|| LfError::UnknownLf(calibration.lf_name.clone()))?;
        lf.lf.precision = calibration.precision;
        lf.lf.min_sample_met = calibration.min_sample_met;
        Ok(())
    }

    /// Applies every LF to one caption.
    ///
    /// Spans are trimmed of surrounding punctuation and must keep at least
    /// [`MIN_SPAN_TOKENS`] tokens. LFs with `pos_check` also need `pos` to
    /// confirm the conjunction reading. All surviving matches are returned;
    /// the one with the highest precision (then longer precondition, then
    /// table order) is flagged `primary`.
    pub fn extract(&self, caption: &Caption, pos: &dyn ConjunctionCheck) -> Vec<ExtractedInstance> {
        let text = caption.text.as_str();
        let mut found: Vec<(usize, ExtractedInstance)> = Vec::new();
        for (order, CompiledLf { lf, matcher }) in self.lfs.iter().enumerate() {
            let Ok(Some(caps)) = matcher.captures(text) else {
                continue;
            };
            let (Some(action), Some(precondition)) = (caps.name("action"), caps.name("precondition")) else {
                continue;
            };
            let (first, second) = if action.start() < precondition.start() {
                (action.range(), precondition.range())
            } else {
                (precondition.range(), action.range())
            };
            let spans = MatchSpans {
                action: trim_span(text, action.range()),
                precondition: trim_span(text, precondition.range()),
                connective: first.end..second.start,
            };
            let action_text = &text[spans.action.clone()];
            let precondition_text = &text[spans.precondition.clone()];
            if action_text.split_whitespace().count() < MIN_SPAN_TOKENS
                || precondition_text.split_whitespace().count() < MIN_SPAN_TOKENS
            {
                continue;
            }
            if lf.pos_check && !pos.confirm(caption, lf, &spans) {
                continue;
            }
            found.push((
                order,
                ExtractedInstance {
                    caption_id: caption.id.clone(),
                    image_ref: caption.image_ref.clone(),
                    caption_source: caption.source.clone(),
                    action_text: action_text.to_string(),
                    precondition_text: precondition_text.to_string(),
                    label: lf.label_class.label(),
                    lf_name: lf.name.clone(),
                    lf_precision: lf.precision,
                    primary: false,
                },
            ));
        }
        let winner = found
            .iter()
            .enumerate()
            .max_by(|(_, (oa, a)), (_, (ob, b))| {
                let pa = a.lf_precision.unwrap_or(f64::NEG_INFINITY);
                let pb = b.lf_precision.unwrap_or(f64::NEG_INFINITY);
                pa.total_cmp(&pb)
                    .then(a.precondition_text.len().cmp(&b.precondition_text.len()))
                    .then(ob.cmp(oa))
            })
            .map(|(i, _)| i);
        if let Some(i) = winner {
            found[i].1.primary = true;
        }
        found.into_iter().map(|(_, inst)| inst).collect()
    }

    /// Extracts from a corpus, preserving caption order then table order.
    pub fn extract_all(&self, captions: &[Caption], pos: &dyn ConjunctionCheck) -> Vec<ExtractedInstance> {
        captions.iter().flat_map(|c| self.extract(c, pos)).collect()
    }
}

fn parse_precision(col: &str) -> Result<(Option<f64>, bool), String> {
    let col = col.trim();
    if col.chars().all(|c| c == '-') && !col.is_empty() {
        return Ok((None, false));
    }
    let (digits, met) = match col.strip_suffix('*') {
        Some(d) => (d.trim(), false),
        None => (col, true),
    };
    let p: f64 = digits.parse().map_err(|_| format!("bad precision `{col}`"))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("precision {p} outside [0, 1]"));
    }
    Ok((Some(p), met))
}

/// Instances drawn from one LF for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub lf_name: String,
    pub matched_count: usize,
    pub requested: usize,
    pub seed: u64,
    pub instances: Vec<ExtractedInstance>,
}

/// Draws up to `n` matches of `lf_name` uniformly without replacement.
pub fn calibrate(lf_name: &str, corpus: &[ExtractedInstance], n: usize, seed: u64) -> CalibrationSample {
    let matches: Vec<&ExtractedInstance> = corpus.iter().filter(|i| i.lf_name == lf_name).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n.min(matches.len());
    let mut picked: Vec<usize> = sample(&mut rng, matches.len(), take).into_vec();
    picked.sort_unstable();
    CalibrationSample {
        lf_name: lf_name.to_string(),
        matched_count: matches.len(),
        requested: n,
        seed,
        instances: picked.into_iter().map(|i| matches[i].clone()).collect(),
    }
}

/// A sampled instance with its relevance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(flatten)]
    pub instance: ExtractedInstance,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lf_name: String,
    pub precision: Option<f64>,
    pub sample_size: usize,
    pub matched_count: usize,
    pub min_sample_met: bool,
}

/// Precision is the mean relevance score of the annotated sample.
pub fn ingest_calibration(sample: &CalibrationSample, annotations: &[Annotation]) -> Result<Calibration, LfError> {
    let mut ones = 0usize;
    let mut seen = HashSet::new();
    for a in annotations {
        if a.score > 1 {
            return Err(LfError::InvalidScore(a.score));
        }
        if a.instance.lf_name != sample.lf_name {
            return Err(LfError::UnexpectedAnnotation {
                caption_id: a.instance.caption_id.clone(),
                lf_name: sample.lf_name.clone(),
            });
        }
        seen.insert(a.instance.caption_id.as_str());
        ones += a.score as usize;
    }
    let missing: Vec<String> = sample
        .instances
        .iter()
        .filter(|i| !seen.contains(i.caption_id.as_str()))
        .map(|i| i.caption_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(LfError::MissingAnnotations(missing));
    }
    let precision = (!annotations.is_empty()).then(|| ones as f64 / annotations.len() as f64);
    Ok(Calibration {
        lf_name: sample.lf_name.clone(),
        precision,
        sample_size: annotations.len(),
        matched_count: sample.matched_count,
        min_sample_met: sample.matched_count >= sample.requested,
    })
}

/// Keeps instances whose LF precision reaches `threshold`. Uncalibrated LFs
/// pass only when whitelisted.
pub fn threshold_filter(
    instances: &[ExtractedInstance],
    threshold: f64,
    whitelist: &HashSet<String>,
) -> Vec<ExtractedInstance> {
    instances
        .iter()
        .filter(|i| match i.lf_precision {
            Some(p) => p >= threshold,
            None => whitelist.contains(&i.lf_name),
        })
        .cloned()
        .collect()
}

/// One point of the cumulative precision curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub threshold: f64,
    pub retained: usize,
    /// Retained instances over all instances.
    pub fraction_retained: f64,
    /// Allow-labeled share of the retained instances.
    pub fraction_allow: f64,
}

pub fn cumulative_report(instances: &[ExtractedInstance], thresholds: &[f64]) -> Vec<CumulativePoint> {
    let total = instances.len();
    thresholds
        .iter()
        .map(|&t| {
            let kept = threshold_filter(instances, t, &HashSet::new());
            let allow = kept.iter().filter(|i| i.label == Label::Allow).count();
            CumulativePoint {
                threshold: t,
                retained: kept.len(),
                fraction_retained: ratio(kept.len(), total),
                fraction_allow: ratio(allow, kept.len()),
            }
        })
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Parses `start:end:step` into an inclusive threshold grid, rounded to nine
/// decimals so that grid points compare cleanly against table precisions.
pub fn parse_thresholds(spec: &str) -> Result<Vec<f64>, LfError> {
    let bad = || LfError::ThresholdRange(spec.to_string());
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    if step.is_nan() || step <= 0.0 || end < start || !start.is_finite() || !end.is_finite() {
        return Err(bad());
    }
    let steps = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=steps)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// Per caption-source LF match counts.
pub fn lf_counts(instances: &[ExtractedInstance], primary_only: bool) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for inst in instances.iter().filter(|i| !primary_only || i.primary) {
        *out.entry(inst.caption_source.clone())
            .or_default()
            .entry(inst.lf_name.clone())
            .or_default() += 1;
    }
    out
}
