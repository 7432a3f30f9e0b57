//! Human verification of weakly labeled instances.
//!
//! Every instance becomes a question unit that collects three votes from
//! distinct annotators. Votes go to an append-only log before they are
//! acknowledged, and the in-memory state is a pure fold over that log, so a
//! restart replays to exactly the state that was acknowledged. Instances
//! that at least two annotators find correct form the clean test set.

use crate::assembly::{PvliInstance, Split};
use crate::Label;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const REQUIRED_VOTES: usize = 3;
/// Correct votes needed for the clean test set.
pub const CLEAN_TEST_MIN_CORRECT: usize = 2;

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("annotator `{0}` is not registered")]
    UnknownAnnotator(String),
    #[error("annotator `{annotator}` already voted on `{unit}`")]
    Duplicate { unit: String, annotator: String },
    #[error("unit `{0}` already has all its votes")]
    UnitComplete(String),
    #[error("a choice is required unless the unit is flagged invalid")]
    MissingChoice,
    #[error("vote log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vote log {path}, line {line}: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("kappa needs units with the same number (>= 2) of votes")]
    KappaShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    True,
    False,
    NotSure,
}

impl Choice {
    pub const ALL: [Choice; 3] = [Choice::True, Choice::False, Choice::NotSure];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub unit_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    #[serde(default)]
    pub invalid_flag: bool,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl Vote {
    /// Correct iff not flagged invalid and the choice matches the weak label
    /// (allow -> true, prevent -> false).
    pub fn is_correct(&self, label: Label) -> bool {
        !self.invalid_flag && self.choice == expected_choice(label)
    }

    /// Category used for agreement: flagged votes count as not sure.
    pub fn category(&self) -> Choice {
        if self.invalid_flag {
            Choice::NotSure
        } else {
            self.choice
        }
    }
}

pub fn expected_choice(label: Label) -> Choice {
    match label {
        Label::Allow => Choice::True,
        Label::Prevent => Choice::False,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitStatus {
    Open,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionUnit {
    pub unit_id: String,
    pub prompt: String,
    pub image_ref: String,
    pub required_votes: usize,
    pub status: UnitStatus,
}

pub fn prompt_for(hypothesis: &str) -> String {
    format!("Based on the image, is this statement true? \"{hypothesis}\"")
}

#[derive(Debug, Clone, PartialEq)]
struct UnitState {
    unit: QuestionUnit,
    votes: Vec<Vote>,
}

/// In-memory verification state; a pure fold over accepted votes.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationState {
    units: BTreeMap<String, UnitState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub units_total: usize,
    pub units_complete: usize,
    pub units_open: usize,
    pub votes_total: usize,
}

impl VerificationState {
    pub fn new(instances: &[PvliInstance]) -> Self {
        let units = instances
            .iter()
            .map(|i| {
                let unit = QuestionUnit {
                    unit_id: i.id.clone(),
                    prompt: prompt_for(&i.hypothesis),
                    image_ref: i.premise_image_ref.clone(),
                    required_votes: REQUIRED_VOTES,
                    status: UnitStatus::Open,
                };
                (
                    i.id.clone(),
                    UnitState {
                        unit,
                        votes: Vec::new(),
                    },
                )
            })
            .collect();
        Self { units }
    }

    /// Validates without mutating.
    pub fn check(&self, vote: &Vote) -> Result<(), VerificationError> {
        let unit = self
            .units
            .get(&vote.unit_id)
            .ok_or_else(|| VerificationError::UnknownUnit(vote.unit_id.clone()))?;
        if unit.votes.iter().any(|v| v.annotator_id == vote.annotator_id) {
            return Err(VerificationError::Duplicate {
                unit: vote.unit_id.clone(),
                annotator: vote.annotator_id.clone(),
            });
        }
        if unit.unit.status == UnitStatus::Complete {
            return Err(VerificationError::UnitComplete(vote.unit_id.clone()));
        }
        Ok(())
    }

    /// Applies a vote; returns whether the unit is now complete.
    pub fn apply(&mut self, vote: Vote) -> Result<bool, VerificationError> {
        self.check(&vote)?;
        let unit = self.units.get_mut(&vote.unit_id).expect("checked");
        unit.votes.push(vote);
        if unit.votes.len() >= unit.unit.required_votes {
            unit.unit.status = UnitStatus::Complete;
        }
        Ok(unit.unit.status == UnitStatus::Complete)
    }

    /// Replays votes from scratch, skipping any the state would reject.
    pub fn fold(instances: &[PvliInstance], votes: impl IntoIterator<Item = Vote>) -> Self {
        let mut state = Self::new(instances);
        for vote in votes {
            let _ = state.apply(vote);
        }
        state
    }

    /// An open unit this annotator has not voted on, preferring units with
    /// the most votes, then the smallest id.
    pub fn next_unit(&self, annotator_id: &str) -> Option<QuestionUnit> {
        self.units
            .values()
            .filter(|u| u.unit.status == UnitStatus::Open)
            .filter(|u| u.votes.iter().all(|v| v.annotator_id != annotator_id))
            .max_by(|a, b| {
                a.votes
                    .len()
                    .cmp(&b.votes.len())
                    .then(b.unit.unit_id.cmp(&a.unit.unit_id))
            })
            .map(|u| u.unit.clone())
    }

    pub fn unit(&self, unit_id: &str) -> Option<&QuestionUnit> {
        self.units.get(unit_id).map(|u| &u.unit)
    }

    pub fn votes(&self) -> Vec<Vote> {
        self.units.values().flat_map(|u| u.votes.iter().cloned()).collect()
    }

    pub fn votes_for(&self, unit_id: &str) -> &[Vote] {
        self.units.get(unit_id).map_or(&[], |u| &u.votes)
    }

    pub fn progress(&self) -> Progress {
        let complete = self
            .units
            .values()
            .filter(|u| u.unit.status == UnitStatus::Complete)
            .count();
        Progress {
            units_total: self.units.len(),
            units_complete: complete,
            units_open: self.units.len() - complete,
            votes_total: self.units.values().map(|u| u.votes.len()).sum(),
        }
    }
}

/// Append-only, fsync-per-vote log of accepted votes, one JSON line each.
#[derive(Debug)]
pub struct VoteLog {
    path: PathBuf,
    file: File,
}

impl VoteLog {
    /// Opens (creating if needed) and returns the logged votes. A torn final
    /// line left by a crash mid-write is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<Vote>), VerificationError> {
        let path = path.as_ref().to_path_buf();
        let io = |source| VerificationError::Log {
            path: path.clone(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;
        let mut votes = Vec::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(io)?;
                if read == 0 {
                    break;
                }
                lineno += 1;
                if !line.ends_with('\n') {
                    log::warn!("{}: dropping torn final line {lineno}", path.display());
                    break;
                }
                if !line.trim().is_empty() {
                    let vote = serde_json::from_str(&line).map_err(|e| VerificationError::CorruptLog {
                        path: path.clone(),
                        line: lineno,
                        message: e.to_string(),
                    })?;
                    votes.push(vote);
                }
                good_len += read as u64;
            }
        }
        if file.metadata().map_err(io)?.len() != good_len {
            file.set_len(good_len).map_err(io)?;
            file.seek(SeekFrom::End(0)).map_err(io)?;
        }
        Ok((Self { path, file }, votes))
    }

    pub fn append(&mut self, vote: &Vote) -> Result<(), VerificationError> {
        let mut line = serde_json::to_string(vote).expect("vote serializes");
        line.push('\n');
        let io = |source| VerificationError::Log {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// A vote as submitted by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub unit_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub choice: Option<Choice>,
    #[serde(default)]
    pub invalid_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    pub unit_id: String,
    pub complete: bool,
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The state-owning service. All writes go through one lock, so votes are
/// logged and applied in a single order.
#[derive(Debug)]
pub struct VerificationService {
    instances: Vec<PvliInstance>,
    state: RwLock<VerificationState>,
    log: Mutex<VoteLog>,
    allowlist: Option<HashSet<String>>,
}

impl VerificationService {
    pub fn open(
        instances: Vec<PvliInstance>,
        log_path: impl AsRef<Path>,
        allowlist: Option<HashSet<String>>,
    ) -> Result<Self, VerificationError> {
        let (log, votes) = VoteLog::open(log_path)?;
        let state = VerificationState::fold(&instances, votes);
        Ok(Self {
            instances,
            state: RwLock::new(state),
            log: Mutex::new(log),
            allowlist,
        })
    }

    fn check_annotator(&self, annotator_id: &str) -> Result<(), VerificationError> {
        let known = !annotator_id.trim().is_empty() && self.allowlist.as_ref().is_none_or(|a| a.contains(annotator_id));
        if known {
            Ok(())
        } else {
            Err(VerificationError::UnknownAnnotator(annotator_id.to_string()))
        }
    }

    pub fn next_unit(&self, annotator_id: &str) -> Result<Option<QuestionUnit>, VerificationError> {
        self.check_annotator(annotator_id)?;
        Ok(self.state.read().expect("state poisoned").next_unit(annotator_id))
    }

    pub fn record_vote(&self, request: VoteRequest) -> Result<VoteAck, VerificationError> {
        self.check_annotator(&request.annotator_id)?;
        let choice = match (request.choice, request.invalid_flag) {
            (Some(c), _) => c,
            (None, true) => Choice::NotSure,
            (None, false) => return Err(VerificationError::MissingChoice),
        };
        let vote = Vote {
            unit_id: request.unit_id,
            annotator_id: request.annotator_id,
            choice,
            invalid_flag: request.invalid_flag,
            timestamp: now_millis(),
        };
        let mut state = self.state.write().expect("state poisoned");
        state.check(&vote)?;
        self.log.lock().expect("log poisoned").append(&vote)?;
        let unit_id = vote.unit_id.clone();
        let complete = state.apply(vote)?;
        Ok(VoteAck { unit_id, complete })
    }

    pub fn progress(&self) -> Progress {
        self.state.read().expect("state poisoned").progress()
    }

    pub fn snapshot(&self) -> VerificationState {
        self.state.read().expect("state poisoned").clone()
    }

    pub fn instances(&self) -> &[PvliInstance] {
        &self.instances
    }

    /// Instances currently selected for the clean test set.
    pub fn clean_test(&self) -> Vec<PvliInstance> {
        let votes = self.snapshot().votes();
        let mut dataset = self.instances.clone();
        select_clean_test(&mut dataset, &votes);
        dataset.retain(|i| i.split == Split::CleanTest);
        dataset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanTestSummary {
    pub size: usize,
    pub allow: usize,
    pub incomplete: Vec<String>,
}

/// Marks instances with at least two correct votes as clean test. Units with
/// fewer than three votes are skipped and listed.
pub fn select_clean_test(dataset: &mut [PvliInstance], votes: &[Vote]) -> CleanTestSummary {
    let mut by_unit: HashMap<&str, Vec<&Vote>> = HashMap::new();
    for v in votes {
        by_unit.entry(v.unit_id.as_str()).or_default().push(v);
    }
    let mut summary = CleanTestSummary {
        size: 0,
        allow: 0,
        incomplete: Vec::new(),
    };
    for inst in dataset.iter_mut() {
        let Some(unit_votes) = by_unit.get(inst.id.as_str()) else {
            continue;
        };
        if unit_votes.len() < REQUIRED_VOTES {
            summary.incomplete.push(inst.id.clone());
            continue;
        }
        let correct = unit_votes.iter().filter(|v| v.is_correct(inst.label)).count();
        if correct >= CLEAN_TEST_MIN_CORRECT {
            inst.split = Split::CleanTest;
            summary.size += 1;
            summary.allow += usize::from(inst.label == Label::Allow);
        }
    }
    summary.incomplete.sort();
    summary
}

/// Fleiss' kappa over units rated by the same number of raters.
///
/// With all ratings in a single category the expected agreement is 1 and
/// kappa is defined as 1.
pub fn fleiss_kappa(units: &[Vec<Choice>]) -> Result<f64, VerificationError> {
    let n = units.first().map_or(0, Vec::len);
    if n < 2 || units.iter().any(|u| u.len() != n) {
        return Err(VerificationError::KappaShape);
    }
    let mut totals = [0usize; 3];
    let mut p_bar = 0.0;
    for unit in units {
        let mut counts = [0usize; 3];
        for c in unit {
            counts[*c as usize] += 1;
        }
        let squares: usize = counts.iter().map(|c| c * c).sum();
        p_bar += (squares - n) as f64 / (n * (n - 1)) as f64;
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    let ratings = (units.len() * n) as f64;
    p_bar /= units.len() as f64;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / ratings).powi(2)).sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Kappa over every unit holding exactly three votes.
pub fn kappa_from_votes(votes: &[Vote]) -> Result<f64, VerificationError> {
    let mut by_unit: BTreeMap<&str, Vec<Choice>> = BTreeMap::new();
    for v in votes {
        by_unit.entry(&v.unit_id).or_default().push(v.category());
    }
    let units: Vec<Vec<Choice>> = by_unit.into_values().filter(|v| v.len() == REQUIRED_VOTES).collect();
    fleiss_kappa(&units)
}

/// Caller-controlled sample of instances to verify.
pub fn sample_units(dataset: &[PvliInstance], n: usize, seed: u64) -> Vec<PvliInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, dataset.len(), n.min(dataset.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| dataset[i].clone()).collect()
}

pub mod http {
    //! JSON-over-HTTP surface consumed by the annotation UI.

    use super::*;
    use axum::extract::{Query, State};
    use axum::http::{header, StatusCode};
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::{Json, Router};
    use tower_http::services::ServeDir;

    #[derive(Debug, Deserialize)]
    pub struct NextParams {
        pub annotator: String,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
    pub struct UnitPayload {
        pub unit_id: String,
        pub prompt: String,
        pub image_ref: String,
    }

    #[derive(Debug, Serialize)]
    struct ErrorBody {
        error: String,
    }

    struct ApiError(VerificationError);

    impl IntoResponse for ApiError {
        fn into_response(self) -> Response {
            let status = match &self.0 {
                VerificationError::UnknownUnit(_) => StatusCode::NOT_FOUND,
                VerificationError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
                VerificationError::Duplicate { .. } | VerificationError::UnitComplete(_) => StatusCode::CONFLICT,
                VerificationError::MissingChoice => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            };
            (
                status,
                Json(ErrorBody {
                    error: self.0.to_string(),
                }),
            )
                .into_response()
        }
    }

    async fn next(State(svc): State<Arc<VerificationService>>, Query(params): Query<NextParams>) -> Response {
        match svc.next_unit(&params.annotator) {
            Ok(Some(u)) => Json(UnitPayload {
                unit_id: u.unit_id,
                prompt: u.prompt,
                image_ref: u.image_ref,
            })
            .into_response(),
            Ok(None) => StatusCode::NO_CONTENT.into_response(),
            Err(e) => ApiError(e).into_response(),
        }
    }

    async fn vote(State(svc): State<Arc<VerificationService>>, Json(req): Json<VoteRequest>) -> Response {
        let outcome = tokio::task::spawn_blocking(move || svc.record_vote(req)).await;
        match outcome {
            Ok(Ok(ack)) => Json(ack).into_response(),
            Ok(Err(e)) => ApiError(e).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }

    async fn progress(State(svc): State<Arc<VerificationService>>) -> Json<Progress> {
        Json(svc.progress())
    }

    async fn export_clean_test(State(svc): State<Arc<VerificationService>>) -> Response {
        let body = crate::io::to_jsonl_string(&svc.clean_test()).unwrap_or_default();
        ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
    }

    /// API routes, plus static files from `ui_dir` for everything else.
    pub fn router(svc: Arc<VerificationService>, ui_dir: Option<PathBuf>) -> Router {
        let api = Router::new()
            .route("/api/next", get(next))
            .route("/api/vote", post(vote))
            .route("/api/progress", get(progress))
            .route("/api/export/clean-test", get(export_clean_test))
            .with_state(svc);
        match ui_dir {
            Some(dir) => api.fallback_service(ServeDir::new(dir)),
            None => api,
        }
    }

    pub async fn serve(svc: Arc<VerificationService>, addr: &str, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("verification server listening on {}", listener.local_addr()?);
        axum::serve(listener, router(svc, ui_dir)).await
    }
}
