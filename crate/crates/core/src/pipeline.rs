//! End-to-end construction run: normalization, the three grounding
//! strategies, merge and split, in one deterministic pass.

use crate::assembly::{self, AssemblyError, MergeReport, PvliInstance, SplitReport, StatementBank};
use crate::embed_index::{HashingEmbedder, IndexError, VectorIndex, DEFAULT_K};
use crate::image_query::{self, ImageProvider, SearchConfig};
use crate::lf_engine::{threshold_filter, ClosedClassHeuristic, LfTable, DEFAULT_THRESHOLD};
use crate::normalize::{
    self, length_filter, LengthReport, NormalizeError, PnliPair, RawCaption, Reject, SentenceSplitter, SourceRegistry,
};
use crate::rank_fusion::{fuse_all, FusionError, DEFAULT_PERSISTENCE};
use crate::synth::default_detector;
use crate::{Caption, Ranking, Statement, StatementKind};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
}

/// One hashed encoder space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub model_id: String,
    pub dim: usize,
    pub ngram: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub statement_sources: Vec<String>,
    pub threshold: f64,
    pub whitelist: Vec<String>,
    pub spaces: Vec<SpaceConfig>,
    pub k: usize,
    pub persistence: f64,
    pub image_n: usize,
    pub iq_excluded_sources: Vec<String>,
    pub n_tuning: usize,
    pub n_noisy_test: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let space = |model_id: &str, dim, ngram, seed| SpaceConfig {
            model_id: model_id.into(),
            dim,
            ngram,
            seed,
        };
        Self {
            statement_sources: crate::synth::STATEMENT_SOURCES.iter().map(|s| s.to_string()).collect(),
            threshold: DEFAULT_THRESHOLD,
            whitelist: Vec::new(),
            spaces: vec![
                space("hash-256-c3", 256, 3, 11),
                space("hash-384-c4", 384, 4, 23),
                space("hash-512-c5", 512, 5, 37),
            ],
            k: DEFAULT_K,
            persistence: DEFAULT_PERSISTENCE,
            image_n: image_query::DEFAULT_N,
            iq_excluded_sources: Vec::new(),
            n_tuning: 30,
            n_noisy_test: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub raw_captions: usize,
    pub caption_fragments: usize,
    pub statements: usize,
    /// Absent when no statement survived normalization.
    pub statement_length: Option<LengthReport>,
    pub queried_statements: usize,
    pub ec_matches: usize,
    pub ec_retained: usize,
    pub cq_instances: usize,
    pub iq_results: usize,
    pub iq_instances: usize,
    pub merge: MergeReport,
    pub split: SplitReport,
    pub rejects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub dataset: Vec<PvliInstance>,
    pub report: PipelineReport,
    pub rejects: Vec<Reject>,
}

/// Runs every stage over raw captions and statement pairs.
pub fn run(
    raw_captions: &[RawCaption],
    pairs: &[PnliPair],
    provider: &dyn ImageProvider,
    config: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let mut rejects = Vec::new();

    let splitter = SentenceSplitter::default();
    let mut captions: Vec<Caption> = Vec::new();
    for raw in raw_captions {
        match normalize::normalize_caption(raw, &splitter) {
            Ok(found) => captions.extend(found),
            Err(reason) => rejects.push(Reject {
                id: raw.id.clone(),
                reason,
            }),
        }
    }

    let registry = SourceRegistry::new(config.statement_sources.iter().map(String::as_str));
    let detector = default_detector();
    let mut statements: Vec<Statement> = Vec::new();
    for pair in pairs {
        match normalize::normalize_pair(pair, &detector, &registry) {
            Ok(sides) => statements.extend(sides),
            Err(reject) => rejects.push(reject),
        }
    }
    let bank = StatementBank::new(&statements);
    let (retained, statement_length) = if statements.is_empty() {
        (Vec::new(), None)
    } else {
        let (kept, report) = length_filter(statements.clone())?;
        (kept, Some(report))
    };
    let queries: Vec<Statement> = retained
        .into_iter()
        .filter(|s| s.kind == StatementKind::Precondition)
        .collect();

    // Extraction from captions.
    let table = LfTable::bundled();
    let extracted = table.extract_all(&captions, &ClosedClassHeuristic::default());
    let whitelist: HashSet<String> = config.whitelist.iter().cloned().collect();
    let kept: Vec<_> = threshold_filter(&extracted, config.threshold, &whitelist)
        .into_iter()
        .filter(|e| e.primary)
        .collect();
    let ec: Vec<PvliInstance> = kept.iter().map(assembly::from_extracted).collect();

    // Caption querying.
    let mut rankings: Vec<Ranking> = Vec::new();
    for space in &config.spaces {
        let embedder = HashingEmbedder::new(space.dim, space.ngram, space.seed);
        let records = captions
            .iter()
            .map(|c| (c.id.clone(), embedder.embed(&c.text)))
            .collect();
        let index = VectorIndex::build(embedder.space(&space.model_id), records)?;
        for q in &queries {
            rankings.push(index.query(&q.id, &embedder.embed(&q.text), config.k)?);
        }
    }
    let fused = fuse_all(rankings, config.k, config.persistence)?;
    let caption_map: HashMap<String, Caption> = captions.iter().map(|c| (c.id.clone(), c.clone())).collect();
    let cq: Vec<PvliInstance> = fused
        .iter()
        .filter_map(|f| assembly::from_fusion(f, &bank, &caption_map))
        .collect();

    // Image querying.
    let search = SearchConfig {
        n: config.image_n,
        excluded_sources: config.iq_excluded_sources.iter().cloned().collect(),
        ..SearchConfig::default()
    };
    let (results, iq_rejects) = image_query::run(provider, &queries, &search);
    rejects.extend(iq_rejects);
    let iq: Vec<PvliInstance> = results
        .iter()
        .filter_map(|r| assembly::from_image_result(r, &bank))
        .collect();

    let report_counts = (extracted.len(), ec.len(), cq.len(), results.len(), iq.len());
    let (mut dataset, merge) = assembly::merge_dedupe(ec, cq, iq);
    let split = assembly::split_sample(&mut dataset, config.n_tuning, config.n_noisy_test, config.seed)?;

    let report = PipelineReport {
        raw_captions: raw_captions.len(),
        caption_fragments: captions.len(),
        statements: statements.len(),
        statement_length,
        queried_statements: queries.len(),
        ec_matches: report_counts.0,
        ec_retained: report_counts.1,
        cq_instances: report_counts.2,
        iq_results: report_counts.3,
        iq_instances: report_counts.4,
        merge,
        split,
        rejects: rejects.len(),
    };
    Ok(PipelineOutput {
        dataset,
        report,
        rejects,
    })
}
