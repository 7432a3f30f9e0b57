//! Exact nearest-neighbor search over precomputed embeddings.
//!
//! Each encoder space is loaded from a vector file:
//!
//! ```text
//! model_id<TAB>dim<TAB>metric
//! id<TAB>base64(little-endian f32 * dim)
//! ...
//! ```
//!
//! `metric` is `cosine-distance` (1 - cosine similarity) or `negative-dot`
//! (-<q, v>), so smaller is better under both.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;
use thiserror::Error;

/// Captions retrieved per query and space.
pub const DEFAULT_K: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("vector file is empty")]
    MissingHeader,
    #[error("bad header `{0}`; expected model_id<TAB>dim<TAB>metric")]
    BadHeader(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("record `{id}`: expected {expected} components, found {found}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("record `{id}`: component {index} is not finite")]
    NonFinite { id: String, index: usize },
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "cosine-distance")]
    CosineDistance,
    #[serde(rename = "negative-dot")]
    NegativeDot,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::CosineDistance => "cosine-distance",
            Metric::NegativeDot => "negative-dot",
        })
    }
}

impl FromStr for Metric {
    type Err = IndexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine-distance" | "cosine" => Ok(Metric::CosineDistance),
            "negative-dot" | "dot" => Ok(Metric::NegativeDot),
            other => Err(IndexError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpace {
    pub model_id: String,
    pub dim: usize,
    pub metric: Metric,
}

/// Nearest captions for one query in one space, closest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query_id: String,
    pub model_id: String,
    pub entries: Vec<(String, f64)>,
}

impl Ranking {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(id, _)| id.as_str()).collect()
    }
}

/// An immutable, exact-search index for one encoder space.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    space: EncoderSpace,
    ids: Vec<String>,
    // Row-major, unit-normalized for cosine spaces.
    data: Vec<f64>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(id: &str, v: &[f32]) -> Result<(), IndexError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(IndexError::NonFinite {
            id: id.to_string(),
            index,
        }),
        None => Ok(()),
    }
}

impl VectorIndex {
    pub fn build(space: EncoderSpace, records: Vec<(String, Vec<f32>)>) -> Result<Self, IndexError> {
        let mut ids = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * space.dim);
        for (id, v) in records {
            if v.len() != space.dim {
                return Err(IndexError::DimensionMismatch {
                    id,
                    expected: space.dim,
                    found: v.len(),
                });
            }
            check_finite(&id, &v)?;
            let mut row: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            if space.metric == Metric::CosineDistance {
                let norm = l2_norm(&row);
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
            data.extend(row);
            ids.push(id);
        }
        Ok(Self { space, ids, data })
    }

    /// Parses a vector file (see module docs).
    pub fn from_vector_file(text: &str) -> Result<Self, IndexError> {
        let (space, records) = parse_vector_file(text)?;
        Self::build(space, records)
    }

    pub fn space(&self) -> &EncoderSpace {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Exact top-`k` under the space metric. Ties go to the smaller id.
    pub fn query(&self, query_id: &str, query: &[f32], k: usize) -> Result<Ranking, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if query.len() != self.space.dim {
            return Err(IndexError::DimensionMismatch {
                id: query_id.to_string(),
                expected: self.space.dim,
                found: query.len(),
            });
        }
        check_finite(query_id, query)?;
        let mut q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        if self.space.metric == Metric::CosineDistance {
            let norm = l2_norm(&q);
            if norm > 0.0 {
                q.iter_mut().for_each(|x| *x /= norm);
            }
        }
        let mut scored: Vec<(f64, usize)> = self
            .data
            .chunks_exact(self.space.dim.max(1))
            .take(self.ids.len())
            .enumerate()
            .map(|(i, row)| {
                let dot: f64 = row.iter().zip(&q).map(|(a, b)| a * b).sum();
                let distance = match self.space.metric {
                    Metric::CosineDistance => (1.0 - dot).clamp(0.0, 2.0),
                    Metric::NegativeDot => -dot,
                };
                (distance, i)
            })
            .collect();
        let order =
            |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(Ranking {
            query_id: query_id.to_string(),
            model_id: self.space.model_id.clone(),
            entries: scored.into_iter().map(|(d, i)| (self.ids[i].clone(), d)).collect(),
        })
    }
}

pub fn encode_vector(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_vector(text: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(text.trim()).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// `(id, vector)` records of one space.
pub type VectorRecords = Vec<(String, Vec<f32>)>;

pub fn parse_vector_file(text: &str) -> Result<(EncoderSpace, VectorRecords), IndexError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(IndexError::MissingHeader)?;
    let cols: Vec<&str> = header.split('\t').collect();
    let [model_id, dim, metric] = cols[..] else {
        return Err(IndexError::BadHeader(header.to_string()));
    };
    let dim: usize = dim
        .trim()
        .parse()
        .ok()
        .filter(|d| *d > 0)
        .ok_or_else(|| IndexError::BadHeader(header.to_string()))?;
    let space = EncoderSpace {
        model_id: model_id.trim().to_string(),
        dim,
        metric: metric.trim().parse()?,
    };
    let mut records = Vec::new();
    for (idx, line) in lines {
        let (id, payload) = line.split_once('\t').ok_or_else(|| IndexError::BadRecord {
            line: idx + 1,
            message: "expected id<TAB>base64".into(),
        })?;
        let v = decode_vector(payload).map_err(|message| IndexError::BadRecord {
            line: idx + 1,
            message: format!("record `{id}`: {message}"),
        })?;
        records.push((id.to_string(), v));
    }
    Ok((space, records))
}

pub fn write_vector_file(space: &EncoderSpace, records: &[(String, Vec<f32>)]) -> String {
    let mut out = format!("{}\t{}\t{}\n", space.model_id, space.dim, space.metric);
    for (id, v) in records {
        out.push_str(id);
        out.push('\t');
        out.push_str(&encode_vector(v));
        out.push('\n');
    }
    out
}

/// Deterministic feature-hashing embedder for tests and offline runs.
///
/// Word unigrams and character n-grams of the padded, lowercased text are
/// hashed (FNV-1a, salted with `seed`) into `dim` signed buckets and the
/// result is l2-normalized. Different seeds act as different encoders.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub ngram: usize,
    pub seed: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, ngram: usize, seed: u64) -> Self {
        Self { dim, ngram, seed }
    }

    fn bucket(&self, feature: &str) -> (usize, f32) {
        let mut h = FnvHasher::default();
        h.write_u64(self.seed);
        h.write(feature.as_bytes());
        let hash = h.finish();
        (
            (hash % self.dim as u64) as usize,
            if hash >> 63 == 0 { 1.0 } else { -1.0 },
        )
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let lowered = text.to_lowercase();
        for word in lowered.split_whitespace() {
            let (b, s) = self.bucket(&format!("w:{word}"));
            v[b] += s;
        }
        let padded: Vec<char> = format!(" {} ", lowered.split_whitespace().collect::<Vec<_>>().join(" "))
            .chars()
            .collect();
        if self.ngram > 0 && padded.len() >= self.ngram {
            for gram in padded.windows(self.ngram) {
                let gram: String = gram.iter().collect();
                let (b, s) = self.bucket(&format!("c:{gram}"));
                v[b] += 0.5 * s;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn space(&self, model_id: &str) -> EncoderSpace {
        EncoderSpace {
            model_id: model_id.to_string(),
            dim: self.dim,
            metric: Metric::CosineDistance,
        }
    }
}
