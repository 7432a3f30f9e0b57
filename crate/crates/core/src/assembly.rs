//! Dataset assembly: merging the three strategies, splits, reports,
//! counterfactual variants and prediction scoring.

use crate::image_query::ImageResult;
use crate::lf_engine::ExtractedInstance;
use crate::normalize::{Caption, Reject, SkipReason, Statement, StatementKind};
use crate::rank_fusion::FusionResult;
use crate::Label;
use fnv::FnvHasher;
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hasher;
use thiserror::Error;

pub const DEFAULT_TUNING: usize = 16_000;
pub const DEFAULT_NOISY_TEST: usize = 6_000;
pub const MASK_TOKEN: &str = "[MASK]";
pub const DEFAULT_GRID: (usize, usize) = (4, 4);

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("split needs {needed} records but only {available} are eligible")]
    InsufficientRecords { needed: usize, available: usize },
    #[error("predictions do not match gold: missing {missing:?}, duplicate {duplicate:?}, unknown {unknown:?}")]
    Predictions {
        missing: Vec<String>,
        duplicate: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("gold set is empty")]
    EmptyGold,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sizes config line {0}: expected `<source> <size>`")]
    SizesConfig(usize),
    #[error("mask grid {0}x{1} does not fit the image buffer")]
    Grid(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "EC")]
    Ec,
    #[serde(rename = "CQ")]
    Cq,
    #[serde(rename = "IQ")]
    Iq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Tuning,
    NoisyTest,
    CleanTest,
    #[default]
    Unassigned,
}

/// Strategy-specific provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProvenanceDetail {
    LabelingFunction {
        lf_name: String,
        lf_precision: Option<f64>,
        caption_id: String,
    },
    Fusion {
        statement_id: String,
        query_kind: StatementKind,
        caption_id: String,
        caption_source: String,
        perplexity: f64,
        model_agreement: f64,
    },
    Search {
        statement_id: String,
        query_kind: StatementKind,
        rank: usize,
        site: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    /// Caption dataset for EC, statement bank for CQ and IQ.
    pub source: String,
    #[serde(flatten)]
    pub detail: ProvenanceDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvliInstance {
    pub id: String,
    pub hypothesis: String,
    pub premise_image_ref: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub conflict: bool,
}

impl PvliInstance {
    pub fn strategy(&self) -> Strategy {
        self.provenance.strategy
    }
}

fn instance_id(hypothesis: &str, image: &str, label: Label) -> String {
    let mut h = Sha256::new();
    h.update(hypothesis.as_bytes());
    h.update([0]);
    h.update(image.as_bytes());
    h.update([0]);
    h.update(label.as_str().as_bytes());
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("pvli-{hex}")
}

fn new_instance(
    hypothesis: &str,
    image: &str,
    label: Label,
    rationale: Option<String>,
    provenance: Provenance,
) -> PvliInstance {
    PvliInstance {
        id: instance_id(hypothesis, image, label),
        hypothesis: hypothesis.to_string(),
        premise_image_ref: image.to_string(),
        label,
        rationale,
        provenance,
        split: Split::Unassigned,
        conflict: false,
    }
}

/// EC instance: the caption's action, its image, and the precondition as
/// rationale.
pub fn from_extracted(e: &ExtractedInstance) -> PvliInstance {
    new_instance(
        &e.action_text,
        &e.image_ref,
        e.label,
        Some(e.precondition_text.clone()),
        Provenance {
            strategy: Strategy::Ec,
            source: e.caption_source.clone(),
            detail: ProvenanceDetail::LabelingFunction {
                lf_name: e.lf_name.clone(),
                lf_precision: e.lf_precision,
                caption_id: e.caption_id.clone(),
            },
        },
    )
}

/// Statements grouped by their statement-bank row.
#[derive(Debug, Clone, Default)]
pub struct StatementBank {
    by_id: HashMap<String, Statement>,
    pairs: HashMap<String, (Option<String>, Option<String>)>,
}

impl StatementBank {
    pub fn new(statements: &[Statement]) -> Self {
        let mut bank = Self::default();
        for s in statements {
            bank.by_id.insert(s.id.clone(), s.clone());
            if let Some(pair) = &s.pair_id {
                let slot = bank.pairs.entry(pair.clone()).or_default();
                match s.kind {
                    StatementKind::Precondition => slot.0 = Some(s.id.clone()),
                    StatementKind::Action => slot.1 = Some(s.id.clone()),
                }
            }
        }
        bank
    }

    pub fn get(&self, id: &str) -> Option<&Statement> {
        self.by_id.get(id)
    }

    /// The (precondition, action) pair a statement belongs to.
    pub fn pair_of(&self, id: &str) -> Option<(&Statement, &Statement)> {
        let s = self.by_id.get(id)?;
        let (p, a) = self.pairs.get(s.pair_id.as_ref()?)?;
        Some((self.by_id.get(p.as_ref()?)?, self.by_id.get(a.as_ref()?)?))
    }
}

/// CQ instance: the paired action grounded in the chosen caption's image.
pub fn from_fusion(
    f: &FusionResult,
    bank: &StatementBank,
    captions: &HashMap<String, Caption>,
) -> Option<PvliInstance> {
    let statement = bank.get(&f.query_id)?;
    let (precondition, action) = bank.pair_of(&f.query_id)?;
    let label = statement.label?;
    let caption = captions.get(&f.chosen)?;
    Some(new_instance(
        &action.text,
        &caption.image_ref,
        label,
        Some(precondition.text.clone()),
        Provenance {
            strategy: Strategy::Cq,
            source: statement.source.clone(),
            detail: ProvenanceDetail::Fusion {
                statement_id: statement.id.clone(),
                query_kind: statement.kind,
                caption_id: caption.id.clone(),
                caption_source: caption.source.clone(),
                perplexity: f.perplexity,
                model_agreement: f.model_agreement,
            },
        },
    ))
}

/// IQ instance: the paired action with a searched image; the rationale is
/// the statement that was searched.
pub fn from_image_result(r: &ImageResult, bank: &StatementBank) -> Option<PvliInstance> {
    let statement = bank.get(&r.statement_id)?;
    let (_, action) = bank.pair_of(&r.statement_id)?;
    let label = statement.label?;
    Some(new_instance(
        &action.text,
        &r.image_url,
        label,
        Some(statement.text.clone()),
        Provenance {
            strategy: Strategy::Iq,
            source: statement.source.clone(),
            detail: ProvenanceDetail::Search {
                statement_id: statement.id.clone(),
                query_kind: statement.kind,
                rank: r.rank,
                site: r.site.clone(),
            },
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub input: BTreeMap<Strategy, usize>,
    pub kept: BTreeMap<Strategy, usize>,
    pub duplicates_removed: usize,
    pub conflicts: usize,
}

/// Collapses exact `(hypothesis, image, label)` duplicates, keeping EC over
/// CQ over IQ. Opposite labels for the same `(hypothesis, image)` are both
/// kept and flagged.
pub fn merge_dedupe(
    ec: Vec<PvliInstance>,
    cq: Vec<PvliInstance>,
    iq: Vec<PvliInstance>,
) -> (Vec<PvliInstance>, MergeReport) {
    let mut input = BTreeMap::new();
    let mut all = Vec::with_capacity(ec.len() + cq.len() + iq.len());
    for stream in [ec, cq, iq] {
        for inst in stream {
            *input.entry(inst.strategy()).or_insert(0) += 1;
            all.push(inst);
        }
    }
    // Stable sort keeps stream order within a strategy.
    all.sort_by_key(|i| i.strategy());

    let mut seen: HashSet<(String, String, Label)> = HashSet::new();
    let mut out: Vec<PvliInstance> = Vec::new();
    let mut duplicates_removed = 0;
    for inst in all {
        let key = (inst.hypothesis.clone(), inst.premise_image_ref.clone(), inst.label);
        if !seen.insert(key) {
            duplicates_removed += 1;
            continue;
        }
        out.push(inst);
    }

    let mut labels: HashMap<(&str, &str), HashSet<Label>> = HashMap::new();
    for inst in &out {
        labels
            .entry((&inst.hypothesis, &inst.premise_image_ref))
            .or_default()
            .insert(inst.label);
    }
    let conflicted: HashSet<(String, String)> = labels
        .into_iter()
        .filter(|(_, l)| l.len() > 1)
        .map(|((h, i), _)| (h.to_string(), i.to_string()))
        .collect();
    let mut conflicts = 0;
    for inst in &mut out {
        if conflicted.contains(&(inst.hypothesis.clone(), inst.premise_image_ref.clone())) {
            inst.conflict = true;
            conflicts += 1;
        }
    }
    let mut kept = BTreeMap::new();
    for inst in &out {
        *kept.entry(inst.strategy()).or_insert(0) += 1;
    }
    let report = MergeReport {
        input,
        kept,
        duplicates_removed,
        conflicts,
    };
    (out, report)
}

/// Order-independent digest of the dataset's ids.
pub fn dataset_hash(dataset: &[PvliInstance]) -> String {
    let mut ids: Vec<&str> = dataset.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub seed: u64,
    pub dataset_hash: String,
    pub tuning: usize,
    pub noisy_test: usize,
    pub unassigned: usize,
    pub sampling: String,
}

/// Uniformly samples disjoint tuning and noisy-test sets. Clean-test records
/// are never reassigned; everything else not drawn becomes unassigned.
pub fn split_sample(
    dataset: &mut [PvliInstance],
    n_tuning: usize,
    n_noisy_test: usize,
    seed: u64,
) -> Result<SplitReport, AssemblyError> {
    let mut eligible: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset[i].split != Split::CleanTest)
        .collect();
    let needed = n_tuning + n_noisy_test;
    if needed > eligible.len() {
        return Err(AssemblyError::InsufficientRecords {
            needed,
            available: eligible.len(),
        });
    }
    eligible.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    for (pos, &i) in eligible.iter().enumerate() {
        dataset[i].split = if pos < n_tuning {
            Split::Tuning
        } else if pos < needed {
            Split::NoisyTest
        } else {
            Split::Unassigned
        };
    }
    Ok(SplitReport {
        seed,
        dataset_hash: dataset_hash(dataset),
        tuning: n_tuning,
        noisy_test: n_noisy_test,
        unassigned: eligible.len() - needed,
        sampling: "uniform without replacement, not stratified".into(),
    })
}

/// Source sizes used for expected percentages.
pub fn parse_sizes(text: &str) -> Result<BTreeMap<String, u64>, AssemblyError> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line
            .split(|c: char| c.is_whitespace() || c == ',' || c == '\t')
            .filter(|c| !c.is_empty());
        let (Some(tag), Some(size), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(AssemblyError::SizesConfig(idx + 1));
        };
        let size = size.parse().map_err(|_| AssemblyError::SizesConfig(idx + 1))?;
        out.insert(tag.to_string(), size);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub source: String,
    pub count: usize,
    pub observed_pct: f64,
    pub expected_pct: Option<f64>,
    pub ratio: Option<f64>,
}

/// Observed share of each source against the share its size predicts.
/// Sources without a configured size get no ratio and a warning.
pub fn observed_vs_expected(
    counts: &BTreeMap<String, usize>,
    sizes: &BTreeMap<String, u64>,
) -> (Vec<RatioRow>, Vec<String>) {
    let total: usize = counts.values().sum();
    let size_total: u64 = sizes.values().sum();
    let mut sources: Vec<&String> = counts.keys().chain(sizes.keys()).collect();
    sources.sort();
    sources.dedup();
    let mut warnings = Vec::new();
    let rows = sources
        .into_iter()
        .map(|source| {
            let count = counts.get(source).copied().unwrap_or(0);
            let observed_pct = if total == 0 {
                0.0
            } else {
                100.0 * count as f64 / total as f64
            };
            let expected_pct = sizes
                .get(source)
                .filter(|_| size_total > 0)
                .map(|&s| 100.0 * s as f64 / size_total as f64);
            if expected_pct.is_none() {
                warnings.push(format!("no size configured for source `{source}`; ratio omitted"));
            }
            let ratio = expected_pct.filter(|e| *e > 0.0).map(|e| observed_pct / e);
            RatioRow {
                source: source.clone(),
                count,
                observed_pct,
                expected_pct,
                ratio,
            }
        })
        .collect();
    (rows, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfShare {
    pub lf_name: String,
    pub count: usize,
    pub pct: f64,
    pub log10_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqSourceTable {
    pub query_kind: StatementKind,
    pub statement_source: String,
    pub rows: Vec<RatioRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub total: usize,
    pub strategy_pct: BTreeMap<Strategy, f64>,
    /// EC matches per caption source and LF.
    pub lf_distribution: BTreeMap<String, Vec<LfShare>>,
    /// CQ caption sources per statement bank, against caption dataset sizes.
    pub caption_source_ratios: Vec<CqSourceTable>,
    pub warnings: Vec<String>,
}

pub fn distribution_report(
    dataset: &[PvliInstance],
    caption_sizes: &BTreeMap<String, u64>,
) -> Result<DistributionReport, AssemblyError> {
    if dataset.is_empty() {
        return Err(AssemblyError::EmptyDataset);
    }
    let total = dataset.len();
    let mut strategy_counts: BTreeMap<Strategy, usize> = BTreeMap::new();
    let mut lf: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut cq: BTreeMap<(StatementKind, String), BTreeMap<String, usize>> = BTreeMap::new();
    for inst in dataset {
        *strategy_counts.entry(inst.strategy()).or_default() += 1;
        match &inst.provenance.detail {
            ProvenanceDetail::LabelingFunction { lf_name, .. } => {
                *lf.entry(inst.provenance.source.clone())
                    .or_default()
                    .entry(lf_name.clone())
                    .or_default() += 1;
            }
            ProvenanceDetail::Fusion {
                query_kind,
                caption_source,
                ..
            } => {
                *cq.entry((*query_kind, inst.provenance.source.clone()))
                    .or_default()
                    .entry(caption_source.clone())
                    .or_default() += 1;
            }
            ProvenanceDetail::Search { .. } => {}
        }
    }
    let strategy_pct = strategy_counts
        .into_iter()
        .map(|(s, c)| (s, 100.0 * c as f64 / total as f64))
        .collect();
    let lf_distribution = lf
        .into_iter()
        .map(|(source, counts)| {
            let n: usize = counts.values().sum();
            let mut shares: Vec<LfShare> = counts
                .into_iter()
                .map(|(lf_name, count)| LfShare {
                    lf_name,
                    count,
                    pct: 100.0 * count as f64 / n as f64,
                    log10_count: (count as f64).log10(),
                })
                .collect();
            shares.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.lf_name.cmp(&b.lf_name)));
            (source, shares)
        })
        .collect();
    let mut warnings = Vec::new();
    let caption_source_ratios = cq
        .into_iter()
        .map(|((query_kind, statement_source), counts)| {
            let (rows, w) = observed_vs_expected(&counts, caption_sizes);
            warnings.extend(w);
            CqSourceTable {
                query_kind,
                statement_source,
                rows,
            }
        })
        .collect();
    warnings.sort();
    warnings.dedup();
    Ok(DistributionReport {
        total,
        strategy_pct,
        lf_distribution,
        caption_source_ratios,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    TextTokenMask,
    ImageRegionMask,
    TextBlind,
    ImageBlind,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::TextTokenMask,
        VariantKind::ImageRegionMask,
        VariantKind::TextBlind,
        VariantKind::ImageBlind,
    ];

    fn is_text(self) -> bool {
        matches!(self, VariantKind::TextTokenMask | VariantKind::TextBlind)
    }
}

impl std::str::FromStr for VariantKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text_token_mask" => Ok(Self::TextTokenMask),
            "image_region_mask" => Ok(Self::ImageRegionMask),
            "text_blind" => Ok(Self::TextBlind),
            "image_blind" => Ok(Self::ImageBlind),
            other => Err(format!("unknown variant kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualVariant {
    pub base_id: String,
    pub variant_kind: VariantKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_text: Option<String>,
    /// Row-major `rows x cols` lattice; `true` cells are masked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_grid: Option<Vec<Vec<bool>>>,
}

/// Tokens masked out of `n`: 67% rounded half up, at least one.
pub fn text_mask_count(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        ((67 * n + 50) / 100).max(1)
    }
}

/// Cells masked out of `cells`: half, rounded half up.
pub fn image_mask_count(cells: usize) -> usize {
    cells.div_ceil(2)
}

fn instance_rng(seed: u64, id: &str, kind: VariantKind) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    h.write(id.as_bytes());
    h.write_u8(kind as u8);
    ChaCha8Rng::seed_from_u64(seed ^ h.finish())
}

pub fn make_counterfactuals(
    instance: &PvliInstance,
    kinds: &[VariantKind],
    seed: u64,
    grid: (usize, usize),
) -> (Vec<CounterfactualVariant>, Vec<Reject>) {
    let tokens: Vec<&str> = instance.hypothesis.split_whitespace().collect();
    let (rows, cols) = grid;
    let mut variants = Vec::new();
    let mut rejects = Vec::new();
    for &kind in kinds {
        if kind.is_text() && tokens.is_empty() {
            rejects.push(Reject {
                id: instance.id.clone(),
                reason: SkipReason::EmptyHypothesis,
            });
            continue;
        }
        let mut rng = instance_rng(seed, &instance.id, kind);
        let (masked_text, mask_grid) = match kind {
            VariantKind::TextTokenMask => {
                let chosen: HashSet<usize> = sample(&mut rng, tokens.len(), text_mask_count(tokens.len()))
                    .into_iter()
                    .collect();
                let text = tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if chosen.contains(&i) { MASK_TOKEN } else { t })
                    .collect::<Vec<_>>()
                    .join(" ");
                (Some(text), None)
            }
            VariantKind::TextBlind => (Some(vec![MASK_TOKEN; tokens.len()].join(" ")), None),
            VariantKind::ImageRegionMask => {
                let cells = rows * cols;
                let mut g = vec![vec![false; cols]; rows];
                for c in sample(&mut rng, cells, image_mask_count(cells)) {
                    g[c / cols][c % cols] = true;
                }
                (None, Some(g))
            }
            VariantKind::ImageBlind => (None, Some(vec![vec![true; cols]; rows])),
        };
        variants.push(CounterfactualVariant {
            base_id: instance.id.clone(),
            variant_kind: kind,
            seed,
            masked_text,
            mask_grid,
        });
    }
    (variants, rejects)
}

/// A decoded image: `width * height * channels` bytes, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bytes: Vec<u8>,
}

/// Zeroes the pixels under masked cells. Cell `(r, c)` covers rows
/// `[r*h/R, (r+1)*h/R)` and the analogous columns.
pub fn apply_patch_mask(image: &mut ImageBuffer, grid: &[Vec<bool>]) -> Result<(), AssemblyError> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || rows > image.height || cols > image.width || grid.iter().any(|r| r.len() != cols) {
        return Err(AssemblyError::Grid(rows, cols));
    }
    for (r, row) in grid.iter().enumerate() {
        for (c, &masked) in row.iter().enumerate() {
            if !masked {
                continue;
            }
            for y in r * image.height / rows..(r + 1) * image.height / rows {
                let start = (y * image.width + c * image.width / cols) * image.channels;
                let end = (y * image.width + (c + 1) * image.width / cols) * image.channels;
                image.bytes[start..end].fill(0);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// gold label -> predicted label -> count
    pub confusion: BTreeMap<Label, BTreeMap<Label, usize>>,
    pub gold_counts: BTreeMap<Label, usize>,
    pub majority_class: Label,
    pub majority_baseline: f64,
}

pub fn score_predictions(gold: &[PvliInstance], predictions: &[Prediction]) -> Result<ScoreReport, AssemblyError> {
    if gold.is_empty() {
        return Err(AssemblyError::EmptyGold);
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let mut by_id: HashMap<&str, Label> = HashMap::new();
    let mut duplicate = Vec::new();
    let mut unknown = Vec::new();
    for p in predictions {
        if !gold_ids.contains(p.id.as_str()) {
            unknown.push(p.id.clone());
        } else if by_id.insert(&p.id, p.label).is_some() {
            duplicate.push(p.id.clone());
        }
    }
    let missing: Vec<String> = gold
        .iter()
        .filter(|g| !by_id.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    if !(missing.is_empty() && duplicate.is_empty() && unknown.is_empty()) {
        return Err(AssemblyError::Predictions {
            missing,
            duplicate,
            unknown,
        });
    }
    let mut confusion: BTreeMap<Label, BTreeMap<Label, usize>> = BTreeMap::new();
    let mut gold_counts: BTreeMap<Label, usize> = BTreeMap::new();
    let mut correct = 0;
    for g in gold {
        let predicted = by_id[g.id.as_str()];
        *confusion.entry(g.label).or_default().entry(predicted).or_default() += 1;
        *gold_counts.entry(g.label).or_default() += 1;
        correct += usize::from(predicted == g.label);
    }
    let (majority_class, majority) = majority(&gold_counts);
    let total = gold.len();
    Ok(ScoreReport {
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        confusion,
        gold_counts,
        majority_class,
        majority_baseline: majority as f64 / total as f64,
    })
}

fn majority(counts: &BTreeMap<Label, usize>) -> (Label, usize) {
    let allow = counts.get(&Label::Allow).copied().unwrap_or(0);
    let prevent = counts.get(&Label::Prevent).copied().unwrap_or(0);
    if allow >= prevent {
        (Label::Allow, allow)
    } else {
        (Label::Prevent, prevent)
    }
}

/// Accuracy of majority-class prediction on `gold`.
pub fn majority_baseline(gold: &[PvliInstance]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let mut counts = BTreeMap::new();
    for g in gold {
        *counts.entry(g.label).or_insert(0usize) += 1;
    }
    Some(majority(&counts).1 as f64 / gold.len() as f64)
}

/// Accuracy of seeded uniform-random predictions on `gold`.
pub fn uniform_random_baseline(gold: &[PvliInstance], seed: u64) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let correct = gold
        .iter()
        .filter(|g| {
            let guess = if rng.random::<bool>() {
                Label::Allow
            } else {
                Label::Prevent
            };
            guess == g.label
        })
        .count();
    Some(correct as f64 / gold.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn inst(strategy: Strategy, h: &str, img: &str, label: Label) -> PvliInstance {
        let detail = match strategy {
            Strategy::Ec => ProvenanceDetail::LabelingFunction {
                lf_name: "unless".into(),
                lf_precision: Some(0.75),
                caption_id: "c".into(),
            },
            Strategy::Cq => ProvenanceDetail::Fusion {
                statement_id: "s".into(),
                query_kind: StatementKind::Precondition,
                caption_id: "c".into(),
                caption_source: "coco".into(),
                perplexity: 0.2,
                model_agreement: 0.5,
            },
            Strategy::Iq => ProvenanceDetail::Search {
                statement_id: "s".into(),
                query_kind: StatementKind::Action,
                rank: 1,
                site: "x.com".into(),
            },
        };
        new_instance(
            h,
            img,
            label,
            Some("r".into()),
            Provenance {
                strategy,
                source: "src".into(),
                detail,
            },
        )
    }

    #[test]
    fn exact_duplicates_collapse() {
        let a = inst(Strategy::Ec, "h", "i", Label::Allow);
        let (out, report) = merge_dedupe(vec![a.clone(), a], vec![], vec![]);
        assert_eq!(out.len(), 1);
        assert_eq!(report.duplicates_removed, 1);
    }

    #[test]
    fn ec_beats_iq() {
        let iq = inst(Strategy::Iq, "h", "i", Label::Allow);
        let ec = inst(Strategy::Ec, "h", "i", Label::Allow);
        let (out, _) = merge_dedupe(vec![], vec![], vec![iq]);
        assert_eq!(out[0].strategy(), Strategy::Iq);
        let (out, report) = merge_dedupe(vec![ec], vec![], vec![inst(Strategy::Iq, "h", "i", Label::Allow)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].strategy(), Strategy::Ec);
        assert_eq!(report.kept[&Strategy::Ec], 1);
    }

    #[test]
    fn conflicting_labels_flagged() {
        let (out, report) = merge_dedupe(
            vec![inst(Strategy::Ec, "h", "i", Label::Allow)],
            vec![inst(Strategy::Cq, "h", "i", Label::Prevent)],
            vec![],
        );
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|i| i.conflict));
        assert_eq!(report.conflicts, 2);
        assert_ne!(out[0].id, out[1].id);
    }

    fn many(n: usize) -> Vec<PvliInstance> {
        (0..n)
            .map(|i| inst(Strategy::Iq, &format!("h{i}"), "i", Label::Allow))
            .collect()
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let mut a = many(10);
        let report = split_sample(&mut a, 6, 2, 7).unwrap();
        assert_eq!(report.unassigned, 2);
        let count = |d: &[PvliInstance], s| d.iter().filter(|i| i.split == s).count();
        assert_eq!(count(&a, Split::Tuning), 6);
        assert_eq!(count(&a, Split::NoisyTest), 2);
        let mut b = many(10);
        b.reverse();
        split_sample(&mut b, 6, 2, 7).unwrap();
        let assign = |d: &[PvliInstance]| {
            let mut v: Vec<(String, Split)> = d.iter().map(|i| (i.id.clone(), i.split)).collect();
            v.sort();
            v
        };
        assert_eq!(assign(&a), assign(&b));
        let mut c = many(10);
        split_sample(&mut c, 6, 2, 8).unwrap();
        assert_ne!(assign(&a), assign(&c));
    }

    #[test]
    fn split_keeps_clean_test_and_checks_size() {
        let mut d = many(5);
        d[0].split = Split::CleanTest;
        assert_eq!(
            split_sample(&mut d, 4, 1, 1).unwrap_err(),
            AssemblyError::InsufficientRecords {
                needed: 5,
                available: 4
            }
        );
        split_sample(&mut d, 3, 1, 1).unwrap();
        assert_eq!(d[0].split, Split::CleanTest);
    }

    #[test]
    fn default_split_sizes() {
        let mut d = many(22_050);
        split_sample(&mut d, DEFAULT_TUNING, DEFAULT_NOISY_TEST, 0).unwrap();
        assert_eq!(d.iter().filter(|i| i.split == Split::Tuning).count(), 16_000);
        assert_eq!(d.iter().filter(|i| i.split == Split::NoisyTest).count(), 6_000);
    }

    #[test]
    fn ratios() {
        let sizes: BTreeMap<String, u64> = [("a".to_string(), 100), ("b".to_string(), 100)].into();
        let counts: BTreeMap<String, usize> = [("a".to_string(), 30), ("b".to_string(), 10)].into();
        let (rows, w) = observed_vs_expected(&counts, &sizes);
        assert!(w.is_empty());
        assert!((rows[0].ratio.unwrap() - 1.5).abs() < 1e-12);
        assert!((rows[1].ratio.unwrap() - 0.5).abs() < 1e-12);

        let one: BTreeMap<String, u64> = [("a".to_string(), 7)].into();
        let (rows, _) = observed_vs_expected(&[("a".to_string(), 4)].into(), &one);
        assert_eq!(rows[0].ratio, Some(1.0));

        let (rows, _) = observed_vs_expected(&[("a".to_string(), 4)].into(), &sizes);
        assert_eq!(rows[1].ratio, Some(0.0));

        let (rows, w) = observed_vs_expected(&[("z".to_string(), 4)].into(), &sizes);
        assert_eq!(rows.iter().find(|r| r.source == "z").unwrap().ratio, None);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn sizes_config() {
        let s = parse_sizes("# caption datasets\ncc12m 12000000\ncoco,600000\n").unwrap();
        assert_eq!(s["coco"], 600_000);
        assert_eq!(parse_sizes("cc12m").unwrap_err(), AssemblyError::SizesConfig(1));
    }

    #[test]
    fn distribution_report_sums() {
        let d = vec![
            inst(Strategy::Ec, "a", "1", Label::Allow),
            inst(Strategy::Cq, "b", "2", Label::Allow),
            inst(Strategy::Iq, "c", "3", Label::Prevent),
        ];
        let sizes: BTreeMap<String, u64> = [("coco".to_string(), 10)].into();
        let r = distribution_report(&d, &sizes).unwrap();
        assert!((r.strategy_pct.values().sum::<f64>() - 100.0).abs() < 1e-9);
        assert_eq!(r.lf_distribution["src"][0].count, 1);
        assert_eq!(r.caption_source_ratios[0].rows[0].ratio, Some(1.0));
        assert!(distribution_report(&[], &sizes).is_err());
    }

    #[test]
    fn mask_counts() {
        assert_eq!(text_mask_count(3), 2);
        assert_eq!(text_mask_count(1), 1);
        assert_eq!(text_mask_count(0), 0);
        assert_eq!(image_mask_count(16), 8);
        assert_eq!(image_mask_count(9), 5);
    }

    #[test]
    fn counterfactual_variants() {
        let mut base = inst(Strategy::Ec, "a b c", "img", Label::Allow);
        let (v, r) = make_counterfactuals(&base, &VariantKind::ALL, 3, DEFAULT_GRID);
        assert!(r.is_empty());
        assert_eq!(v.len(), 4);
        let masked = v[0].masked_text.as_ref().unwrap();
        assert_eq!(masked.split(' ').filter(|t| *t == MASK_TOKEN).count(), 2);
        let grid = v[1].mask_grid.as_ref().unwrap();
        assert_eq!(grid.iter().flatten().filter(|c| **c).count(), 8);
        assert_eq!(v[2].masked_text.as_deref(), Some("[MASK] [MASK] [MASK]"));
        assert!(v[3].mask_grid.as_ref().unwrap().iter().flatten().all(|c| *c));
        assert!(v.iter().all(|x| x.seed == 3));
        let (again, _) = make_counterfactuals(&base, &VariantKind::ALL, 3, DEFAULT_GRID);
        assert_eq!(v, again);

        base.hypothesis = "  ".into();
        let (v, r) = make_counterfactuals(&base, &VariantKind::ALL, 3, DEFAULT_GRID);
        assert_eq!(v.len(), 2);
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn patch_mask_zeroes_cells() {
        let mut img = ImageBuffer {
            width: 4,
            height: 4,
            channels: 1,
            bytes: vec![9; 16],
        };
        let grid = vec![vec![true, false], vec![false, false]];
        apply_patch_mask(&mut img, &grid).unwrap();
        assert_eq!(img.bytes.iter().filter(|b| **b == 0).count(), 4);
        assert_eq!(&img.bytes[..4], &[0, 0, 9, 9]);
        assert!(apply_patch_mask(&mut img, &[vec![true; 5]]).is_err());
    }

    fn gold(labels: &[Label]) -> Vec<PvliInstance> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| inst(Strategy::Ec, &format!("h{i}"), "i", *l))
            .collect()
    }

    #[test]
    fn scoring() {
        use Label::*;
        let g = gold(&[Allow, Allow, Prevent, Prevent]);
        let preds: Vec<Prediction> = g
            .iter()
            .enumerate()
            .map(|(i, x)| Prediction {
                id: x.id.clone(),
                label: if i == 0 { Prevent } else { x.label },
            })
            .collect();
        let r = score_predictions(&g, &preds).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.confusion[&Allow][&Prevent], 1);
        let exact: Vec<Prediction> = g
            .iter()
            .map(|x| Prediction {
                id: x.id.clone(),
                label: x.label,
            })
            .collect();
        assert_eq!(score_predictions(&g, &exact).unwrap().accuracy, 1.0);
    }

    #[test]
    fn scoring_rejects_bad_prediction_sets() {
        let g = gold(&[Label::Allow, Label::Prevent]);
        let mut preds = vec![Prediction {
            id: g[0].id.clone(),
            label: Label::Allow,
        }];
        preds.push(preds[0].clone());
        preds.push(Prediction {
            id: "nope".into(),
            label: Label::Allow,
        });
        match score_predictions(&g, &preds).unwrap_err() {
            AssemblyError::Predictions {
                missing,
                duplicate,
                unknown,
            } => {
                assert_eq!(missing, vec![g[1].id.clone()]);
                assert_eq!(duplicate, vec![g[0].id.clone()]);
                assert_eq!(unknown, vec!["nope".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baselines() {
        let mut labels = vec![Label::Allow; 151];
        labels.extend(vec![Label::Prevent; 110]);
        let g = gold(&labels);
        assert!((majority_baseline(&g).unwrap() - 151.0 / 261.0).abs() < 1e-12);
        let r = uniform_random_baseline(&g, 1).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert_eq!(r, uniform_random_baseline(&g, 1).unwrap());
    }

    proptest! {
        #[test]
        fn accuracy_is_one_minus_hamming(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
            let to = |b: bool| if b { Label::Allow } else { Label::Prevent };
            let labels: Vec<Label> = bits.iter().map(|(g, _)| to(*g)).collect();
            let g = gold(&labels);
            let preds: Vec<Prediction> = g.iter().zip(&bits).map(|(x, (_, p))| Prediction { id: x.id.clone(), label: to(*p) }).collect();
            let hamming = bits.iter().filter(|(a, b)| a != b).count() as f64 / bits.len() as f64;
            let r = score_predictions(&g, &preds).unwrap();
            prop_assert!((r.accuracy - (1.0 - hamming)).abs() < 1e-12);
        }
    }
}
