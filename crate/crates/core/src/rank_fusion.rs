//! Fusing per-encoder caption rankings.
//!
//! The winner is chosen with Copeland's method, and each fused query carries
//! two quality signals: perplexity (mean distance to the chosen caption over
//! spaces) and model agreement (mean pairwise extrapolated rank-biased
//! overlap between the spaces' rankings).

use crate::embed_index::Ranking;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

/// RBO persistence used when none is configured.
pub const DEFAULT_PERSISTENCE: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("no candidates in any ranking")]
    NoCandidates,
    #[error("caption `{0}` appears in no ranking")]
    NotRanked(String),
    #[error("persistence p must satisfy 0 < p < 1, got {0}")]
    Persistence(f64),
    #[error("quantile binning needs q >= 2 and at least one value")]
    Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub query_id: String,
    pub chosen: String,
    pub copeland_scores: BTreeMap<String, i64>,
    pub perplexity: f64,
    pub model_agreement: f64,
    /// 1-based rank of the chosen caption in each space, in input order.
    pub chosen_ranks: Vec<Option<usize>>,
    pub persistence: f64,
}

/// Copeland score for every candidate in the union of `rankings`.
///
/// `x` beats `y` when a strict majority of the rankings place `x` above `y`.
/// A candidate missing from a ranking sits below every listed candidate and
/// level with other missing ones. Score is wins minus losses.
pub fn copeland_scores(rankings: &[Ranking]) -> BTreeMap<String, i64> {
    let positions: Vec<HashMap<&str, usize>> = rankings
        .iter()
        .map(|r| {
            r.entries
                .iter()
                .enumerate()
                .map(|(i, (id, _))| (id.as_str(), i))
                .collect()
        })
        .collect();
    let candidates: Vec<&str> = {
        let mut set: Vec<&str> = rankings
            .iter()
            .flat_map(|r| r.entries.iter().map(|(id, _)| id.as_str()))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        set.sort_unstable();
        set
    };
    let mut scores: BTreeMap<String, i64> = candidates.iter().map(|c| (c.to_string(), 0)).collect();
    let m = rankings.len();
    for (i, x) in candidates.iter().enumerate() {
        for y in &candidates[i + 1..] {
            let mut x_above = 0;
            let mut y_above = 0;
            for pos in &positions {
                let px = pos.get(x).copied().unwrap_or(usize::MAX);
                let py = pos.get(y).copied().unwrap_or(usize::MAX);
                if px < py {
                    x_above += 1;
                } else if py < px {
                    y_above += 1;
                }
            }
            if 2 * x_above > m {
                *scores.get_mut(*x).unwrap() += 1;
                *scores.get_mut(*y).unwrap() -= 1;
            } else if 2 * y_above > m {
                *scores.get_mut(*y).unwrap() += 1;
                *scores.get_mut(*x).unwrap() -= 1;
            }
        }
    }
    scores
}

/// Mean over spaces of the chosen caption's distance, substituting the last
/// entry's distance where the caption is missing. Empty rankings are skipped.
pub fn perplexity(chosen: &str, rankings: &[Ranking]) -> Result<f64, FusionError> {
    let mut sum = 0.0;
    let mut spaces = 0usize;
    let mut present = false;
    for r in rankings {
        let Some((_, last)) = r.entries.last() else {
            continue;
        };
        let d = match r.entries.iter().find(|(id, _)| id == chosen) {
            Some((_, d)) => {
                present = true;
                *d
            }
            None => *last,
        };
        sum += d;
        spaces += 1;
    }
    if !present {
        return Err(FusionError::NotRanked(chosen.to_string()));
    }
    Ok(sum / spaces as f64)
}

/// Extrapolated rank-biased overlap at depth `min(|s|, |t|)`:
///
/// `(X_k / k) p^k + ((1 - p) / p) * sum_{d=1..k} (X_d / d) p^d`
///
/// where `X_d` is the overlap of the two depth-`d` prefixes. Two empty
/// rankings score 1, one empty ranking scores 0.
pub fn rbo_ext<T: Eq + std::hash::Hash>(s: &[T], t: &[T], p: f64) -> Result<f64, FusionError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(FusionError::Persistence(p));
    }
    let k = s.len().min(t.len());
    if k == 0 {
        return Ok(if s.is_empty() && t.is_empty() { 1.0 } else { 0.0 });
    }
    let mut seen_s = HashSet::with_capacity(k);
    let mut seen_t = HashSet::with_capacity(k);
    let mut overlap = 0usize;
    let mut sum = 0.0;
    let mut weight = 1.0;
    for d in 1..=k {
        let (a, b) = (&s[d - 1], &t[d - 1]);
        if a == b {
            overlap += 1;
        } else {
            if seen_t.contains(a) {
                overlap += 1;
            }
            if seen_s.contains(b) {
                overlap += 1;
            }
        }
        seen_s.insert(a);
        seen_t.insert(b);
        weight *= p;
        sum += overlap as f64 / d as f64 * weight;
    }
    let value = overlap as f64 / k as f64 * weight + (1.0 - p) / p * sum;
    Ok(value.clamp(0.0, 1.0))
}

/// Mean [`rbo_ext`] over all unordered pairs of rankings; 1.0 with fewer than
/// two rankings.
pub fn model_agreement(rankings: &[Ranking], p: f64) -> Result<f64, FusionError> {
    let ids: Vec<Vec<&str>> = rankings.iter().map(Ranking::ids).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            total += rbo_ext(&ids[i], &ids[j], p)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        if !(p > 0.0 && p < 1.0) {
            return Err(FusionError::Persistence(p));
        }
        return Ok(1.0);
    }
    Ok(total / pairs as f64)
}

/// Picks the Copeland winner; ties go to lower perplexity, then smaller id.
pub fn copeland_select(query_id: &str, rankings: &[Ranking], p: f64) -> Result<FusionResult, FusionError> {
    let scores = copeland_scores(rankings);
    let best = *scores.values().max().ok_or(FusionError::NoCandidates)?;
    let mut chosen: Option<(&str, f64)> = None;
    for (id, _) in scores.iter().filter(|(_, s)| **s == best) {
        let ppl = perplexity(id, rankings)?;
        if chosen.is_none_or(|(_, best_ppl)| ppl < best_ppl) {
            chosen = Some((id, ppl));
        }
    }
    let (chosen, ppl) = chosen.expect("at least one top candidate");
    let chosen_ranks = rankings
        .iter()
        .map(|r| r.entries.iter().position(|(id, _)| id == chosen).map(|i| i + 1))
        .collect();
    Ok(FusionResult {
        query_id: query_id.to_string(),
        chosen: chosen.to_string(),
        perplexity: ppl,
        model_agreement: model_agreement(rankings, p)?,
        copeland_scores: scores,
        chosen_ranks,
        persistence: p,
    })
}

/// Groups rankings by query id (spaces ordered by model id) and fuses each
/// group, truncating rankings to `k` first.
pub fn fuse_all(rankings: Vec<Ranking>, k: usize, p: f64) -> Result<Vec<FusionResult>, FusionError> {
    let mut groups: BTreeMap<String, Vec<Ranking>> = BTreeMap::new();
    for mut r in rankings {
        r.entries.truncate(k);
        groups.entry(r.query_id.clone()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (query_id, mut group) in groups {
        group.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        match copeland_select(&query_id, &group, p) {
            Ok(result) => out.push(result),
            Err(FusionError::NoCandidates) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Quantile bin edges and per-value bin assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBins {
    /// `q + 1` edges: the minimum, the `q - 1` interior quantiles, the maximum.
    pub edges: Vec<f64>,
    pub assignments: Vec<usize>,
}

impl QuantileBins {
    pub fn interior(&self) -> &[f64] {
        &self.edges[1..self.edges.len() - 1]
    }
}

/// Linear-interpolation sample quantile of sorted data at fraction `f`.
fn quantile_sorted(sorted: &[f64], f: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * f;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bins values at the `i / q` sample quantiles. Bins are half-open
/// `[e_i, e_{i+1})` except the last, which is closed.
pub fn quantile_bins(values: &[f64], q: usize) -> Result<QuantileBins, FusionError> {
    if q < 2 || values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::Quantiles);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=q).map(|i| quantile_sorted(&sorted, i as f64 / q as f64)).collect();
    let interior = &edges[1..q];
    let assignments = values
        .iter()
        .map(|v| interior.iter().filter(|e| **e <= *v).count())
        .collect();
    Ok(QuantileBins { edges, assignments })
}

/// Joint heatmap over marginal quantile bins of two diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub counts: Vec<Vec<usize>>,
    /// Mean of the supplied scores per cell; `None` for empty cells.
    pub mean_score: Vec<Vec<Option<f64>>>,
}

pub fn heatmap(x: &[f64], y: &[f64], scores: &[f64], q: usize) -> Result<Heatmap, FusionError> {
    if x.len() != y.len() || x.len() != scores.len() {
        return Err(FusionError::Quantiles);
    }
    let bx = quantile_bins(x, q)?;
    let by = quantile_bins(y, q)?;
    let mut counts = vec![vec![0usize; q]; q];
    let mut sums = vec![vec![0f64; q]; q];
    for ((i, j), s) in bx.assignments.iter().zip(&by.assignments).zip(scores) {
        counts[*i][*j] += 1;
        sums[*i][*j] += s;
    }
    let mean_score = counts
        .iter()
        .zip(&sums)
        .map(|(cr, sr)| {
            cr.iter()
                .zip(sr)
                .map(|(&c, &s)| (c > 0).then(|| s / c as f64))
                .collect()
        })
        .collect();
    Ok(Heatmap {
        x_edges: bx.edges,
        y_edges: by.edges,
        counts,
        mean_score,
    })
}
