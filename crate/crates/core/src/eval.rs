//! Human evaluation: rater sessions, Likert ratings and their aggregation.
//!
//! All state changes are events in an append-only JSONL log (one session or
//! rating event per line). Replaying the log from scratch rebuilds the
//! store, so the summary can always be recomputed offline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DiagnosisLabel;
use crate::gateway::ImagePayload;
use crate::manifest::DatasetManifest;
use crate::parser::split_steps;
use crate::pipeline::{load_image_payload, PredictionRecord};

pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("requested {requested} cases but only {available} have successful diagnoses")]
    InsufficientCases { requested: usize, available: usize },
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("rating for `{got}` is out of order; the session expects {expected}")]
    OutOfOrder { expected: String, got: String },
    #[error("{field} must be between 1 and 5, got {value}")]
    LikertOutOfRange { field: &'static str, value: i64 },
    #[error("unknown diagnosis `{0}`")]
    UnknownDiagnosis(String),
    #[error("invalid rater id `{0}`: use letters, digits, `-`, `_` or `.`")]
    InvalidRater(String),
    #[error("sample size must be at least 1")]
    EmptySample,
    #[error("no ratings recorded yet")]
    EmptyLog,
    #[error("rating log {path}, line {line}: {reason}")]
    BadLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("image for case `{case_id}`: {detail}")]
    Image { case_id: String, detail: String },
    #[error("rating log: {0}")]
    Io(#[from] io::Error),
}

impl EvalError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::InsufficientCases { .. } => "insufficient_cases",
            EvalError::UnknownSession(_) => "unknown_session",
            EvalError::UnknownCase(_) => "unknown_case",
            EvalError::OutOfOrder { .. } => "out_of_order",
            EvalError::LikertOutOfRange { .. } => "likert_out_of_range",
            EvalError::UnknownDiagnosis(_) => "unknown_diagnosis",
            EvalError::InvalidRater(_) => "invalid_rater",
            EvalError::EmptySample => "empty_sample",
            EvalError::EmptyLog => "empty_log",
            EvalError::BadLog { .. } => "bad_log",
            EvalError::Image { .. } => "image_unavailable",
            EvalError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterSession {
    pub session_id: String,
    pub rater_id: String,
    pub assigned_case_ids: Vec<String>,
    pub cursor: usize,
}

impl RaterSession {
    pub fn current(&self) -> Option<&str> {
        self.assigned_case_ids.get(self.cursor).map(String::as_str)
    }

    pub fn progress(&self) -> Progress {
        Progress {
            rated: self.cursor,
            total: self.assigned_case_ids.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
}

/// What a rater submits for one case. Scores are taken as wide integers so
/// out-of-range values reach validation instead of failing deserialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingInput {
    pub case_id: String,
    pub clarity: i64,
    pub completeness: i64,
    pub trust: i64,
    pub rater_diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub rater_id: String,
    pub case_id: String,
    pub clarity: u8,
    pub completeness: u8,
    pub trust: u8,
    pub rater_diagnosis: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Session(RaterSession),
    Rating {
        session_id: String,
        #[serde(flatten)]
        record: RatingRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub avg_clarity: f64,
    pub avg_completeness: f64,
    pub avg_trust: f64,
    /// Share of consensus cases where the model's label equals the consensus.
    pub model_vs_consensus_accuracy_percent: Option<f64>,
    /// Share of consensus cases where the consensus equals the ground truth.
    pub consensus_vs_truth_accuracy_percent: Option<f64>,
    pub n_cases_rated: usize,
    pub n_raters: usize,
    pub n_ratings: usize,
    pub n_consensus_cases: usize,
    /// Cases left out of both percentages because the vote was tied.
    pub n_ties_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePayload {
    pub case_id: String,
    pub image_url: String,
    pub image_media_type: String,
    pub model_diagnosis: String,
    pub model_diagnosis_id: String,
    pub rationale: String,
    pub rationale_steps: Vec<String>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NextCase {
    Case(Box<CasePayload>),
    Done(Progress),
}

#[derive(Debug, Clone)]
struct CaseEntry {
    truth: String,
    model_label: String,
    rationale: String,
    rationale_steps: Vec<String>,
    image_path: PathBuf,
}

/// Predictions under review plus the rating state rebuilt from the log.
#[derive(Debug)]
pub struct EvalStore {
    cases: BTreeMap<String, CaseEntry>,
    /// Case ids eligible for sampling, in predictions order.
    pool: Vec<String>,
    classes: Vec<DiagnosisLabel>,
    sessions: HashMap<String, RaterSession>,
    session_counters: HashMap<String, u64>,
    ratings: BTreeMap<(String, String), RatingRecord>,
    log: Option<File>,
    log_path: Option<PathBuf>,
}

fn valid_rater(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn likert(field: &'static str, value: i64) -> Result<u8, EvalError> {
    if (LIKERT_MIN as i64..=LIKERT_MAX as i64).contains(&value) {
        Ok(value as u8)
    } else {
        Err(EvalError::LikertOutOfRange { field, value })
    }
}

impl EvalStore {
    /// In-memory store. Only cases with a successful diagnosis that also
    /// appear in the manifest are eligible for review.
    pub fn new(predictions: &[PredictionRecord], manifest: &DatasetManifest) -> Self {
        let mut cases = BTreeMap::new();
        let mut pool = Vec::new();
        for record in predictions {
            let (Some(result), Some(case)) = (record.diagnosis.result(), manifest.case(&record.case_id))
            else {
                continue;
            };
            if cases.contains_key(&record.case_id) {
                continue;
            }
            let steps = if result.rationale.is_empty() {
                split_steps(&result.raw_rationale)
            } else {
                result.rationale.clone()
            };
            cases.insert(
                record.case_id.clone(),
                CaseEntry {
                    truth: case.true_label.clone(),
                    model_label: result.label.clone(),
                    rationale: result.raw_rationale.clone(),
                    rationale_steps: steps,
                    image_path: manifest.resolve_image(case),
                },
            );
            pool.push(record.case_id.clone());
        }
        Self {
            cases,
            pool,
            classes: manifest.classes.clone(),
            sessions: HashMap::new(),
            session_counters: HashMap::new(),
            ratings: BTreeMap::new(),
            log: None,
            log_path: None,
        }
    }

    /// Store backed by a log file. Existing events are replayed first; new
    /// events are appended.
    pub fn open(
        predictions: &[PredictionRecord],
        manifest: &DatasetManifest,
        log_path: &Path,
    ) -> Result<Self, EvalError> {
        let mut store = Self::new(predictions, manifest);
        if log_path.exists() {
            for event in read_log(log_path)? {
                store.apply(event);
            }
        }
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        store.log = Some(OpenOptions::new().create(true).append(true).open(log_path)?);
        store.log_path = Some(log_path.to_path_buf());
        Ok(store)
    }

    /// Forces appended events to disk.
    pub fn sync(&mut self) -> Result<(), EvalError> {
        if let Some(file) = self.log.as_mut() {
            file.flush()?;
            file.sync_all()?;
        }
        Ok(())
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn eligible_cases(&self) -> usize {
        self.pool.len()
    }

    pub fn classes(&self) -> &[DiagnosisLabel] {
        &self.classes
    }

    pub fn session(&self, session_id: &str) -> Result<&RaterSession, EvalError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| EvalError::UnknownSession(session_id.to_string()))
    }

    /// Effective ratings, one per (rater, case), ordered by rater then case.
    pub fn ratings(&self) -> impl Iterator<Item = &RatingRecord> {
        self.ratings.values()
    }

    fn append(&mut self, event: &LogEvent) -> Result<(), EvalError> {
        if let Some(file) = self.log.as_mut() {
            let mut line = serde_json::to_string(event).expect("event serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        Ok(())
    }

    fn apply(&mut self, event: LogEvent) {
        match event {
            LogEvent::Session(session) => {
                let counter = self.session_counters.entry(session.rater_id.clone()).or_default();
                *counter += 1;
                self.sessions.insert(session.session_id.clone(), session);
            }
            LogEvent::Rating { session_id, record } => {
                if let Some(session) = self.sessions.get_mut(&session_id) {
                    if session.current() == Some(record.case_id.as_str()) {
                        session.cursor += 1;
                    }
                }
                self.ratings
                    .insert((record.rater_id.clone(), record.case_id.clone()), record);
            }
        }
    }

    /// Draws a seeded panel of `sample_size` cases. The same seed and size
    /// give every rater the same cases in the same order.
    pub fn create_session(
        &mut self,
        rater_id: &str,
        sample_size: usize,
        seed: u64,
    ) -> Result<RaterSession, EvalError> {
        if !valid_rater(rater_id) {
            return Err(EvalError::InvalidRater(rater_id.to_string()));
        }
        let assigned = sample_panel(&self.pool, sample_size, seed)?;
        let n = self.session_counters.get(rater_id).copied().unwrap_or(0) + 1;
        let session = RaterSession {
            session_id: format!("{rater_id}-{n}"),
            rater_id: rater_id.to_string(),
            assigned_case_ids: assigned,
            cursor: 0,
        };
        let event = LogEvent::Session(session.clone());
        self.append(&event)?;
        self.apply(event);
        Ok(session)
    }

    /// The case at the session cursor, without advancing it.
    pub fn next_case(&self, session_id: &str) -> Result<NextCase, EvalError> {
        let session = self.session(session_id)?;
        let Some(case_id) = session.current() else {
            return Ok(NextCase::Done(session.progress()));
        };
        let entry = &self.cases[case_id];
        let display = self
            .classes
            .iter()
            .find(|c| c.id == entry.model_label)
            .map(|c| c.display_name.clone())
            .unwrap_or_else(|| entry.model_label.clone());
        Ok(NextCase::Case(Box::new(CasePayload {
            case_id: case_id.to_string(),
            image_url: format!("/cases/{case_id}/image"),
            image_media_type: "image/png".to_string(),
            model_diagnosis: display,
            model_diagnosis_id: entry.model_label.clone(),
            rationale: entry.rationale.clone(),
            rationale_steps: entry.rationale_steps.clone(),
            progress: session.progress(),
        })))
    }

    /// Image bytes for a reviewable case, PNG-encoded.
    pub fn case_image(&self, case_id: &str) -> Result<ImagePayload, EvalError> {
        let entry = self
            .cases
            .get(case_id)
            .ok_or_else(|| EvalError::UnknownCase(case_id.to_string()))?;
        let case = crate::domain::CaseRecord {
            case_id: case_id.to_string(),
            image_ref: entry.image_path.display().to_string(),
            true_label: entry.truth.clone(),
            true_concepts: None,
            split: crate::domain::Split::Test,
            tags: BTreeSet::new(),
        };
        load_image_payload(&case, &entry.image_path).map_err(|e| EvalError::Image {
            case_id: case_id.to_string(),
            detail: e.to_string(),
        })
    }

    /// Records a rating for the cursor case and advances the cursor. A case
    /// this session already rated may be re-rated; the newer rating replaces
    /// the older one and the cursor stays put.
    pub fn submit_rating(
        &mut self,
        session_id: &str,
        input: &RatingInput,
    ) -> Result<Progress, EvalError> {
        let session = self.session(session_id)?;
        let position = session
            .assigned_case_ids
            .iter()
            .position(|c| *c == input.case_id);
        let in_order = match position {
            Some(p) => p <= session.cursor && p < session.assigned_case_ids.len(),
            None => false,
        };
        if !in_order {
            return Err(EvalError::OutOfOrder {
                expected: session
                    .current()
                    .map(|c| format!("case `{c}`"))
                    .unwrap_or_else(|| "no further ratings".to_string()),
                got: input.case_id.clone(),
            });
        }
        let clarity = likert("clarity", input.clarity)?;
        let completeness = likert("completeness", input.completeness)?;
        let trust = likert("trust", input.trust)?;
        if !self.classes.iter().any(|c| c.id == input.rater_diagnosis) {
            return Err(EvalError::UnknownDiagnosis(input.rater_diagnosis.clone()));
        }
        let event = LogEvent::Rating {
            session_id: session_id.to_string(),
            record: RatingRecord {
                rater_id: session.rater_id.clone(),
                case_id: input.case_id.clone(),
                clarity,
                completeness,
                trust,
                rater_diagnosis: input.rater_diagnosis.clone(),
                timestamp: now_millis(),
            },
        };
        self.append(&event)?;
        self.apply(event);
        Ok(self.sessions[session_id].progress())
    }

    pub fn summary(&self) -> Result<EvalSummary, EvalError> {
        let truth: BTreeMap<&str, &str> = self
            .cases
            .iter()
            .map(|(id, e)| (id.as_str(), e.truth.as_str()))
            .collect();
        let model: BTreeMap<&str, &str> = self
            .cases
            .iter()
            .map(|(id, e)| (id.as_str(), e.model_label.as_str()))
            .collect();
        aggregate(self.ratings.values(), &model, &truth)
    }
}

/// Seeded case panel: shuffle the eligible pool, keep the first `size`.
pub fn sample_panel(pool: &[String], size: usize, seed: u64) -> Result<Vec<String>, EvalError> {
    if size == 0 {
        return Err(EvalError::EmptySample);
    }
    if size > pool.len() {
        return Err(EvalError::InsufficientCases {
            requested: size,
            available: pool.len(),
        });
    }
    let mut ids = pool.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(size);
    Ok(ids)
}

/// Summary over effective ratings. `model` and `truth` map case ids to the
/// model's label and the ground-truth label.
pub fn aggregate<'a>(
    ratings: impl IntoIterator<Item = &'a RatingRecord>,
    model: &BTreeMap<&str, &str>,
    truth: &BTreeMap<&str, &str>,
) -> Result<EvalSummary, EvalError> {
    let ratings: Vec<&RatingRecord> = ratings.into_iter().collect();
    if ratings.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let n = ratings.len() as f64;
    let mean = |f: fn(&RatingRecord) -> u8| ratings.iter().map(|r| f(r) as f64).sum::<f64>() / n;

    let mut votes: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut raters = BTreeSet::new();
    for r in &ratings {
        *votes
            .entry(r.case_id.as_str())
            .or_default()
            .entry(r.rater_diagnosis.as_str())
            .or_default() += 1;
        raters.insert(r.rater_id.as_str());
    }

    let (mut consensus_cases, mut ties, mut model_hits, mut truth_hits) = (0usize, 0usize, 0usize, 0usize);
    for (case_id, tally) in &votes {
        let top = tally.values().copied().max().unwrap_or(0);
        let mut leaders = tally.iter().filter(|(_, &c)| c == top).map(|(l, _)| *l);
        let (Some(consensus), None) = (leaders.next(), leaders.next()) else {
            ties += 1;
            continue;
        };
        consensus_cases += 1;
        if model.get(case_id) == Some(&consensus) {
            model_hits += 1;
        }
        if truth.get(case_id) == Some(&consensus) {
            truth_hits += 1;
        }
    }
    let percent = |hits: usize| {
        (consensus_cases > 0).then(|| 100.0 * hits as f64 / consensus_cases as f64)
    };

    Ok(EvalSummary {
        avg_clarity: mean(|r| r.clarity),
        avg_completeness: mean(|r| r.completeness),
        avg_trust: mean(|r| r.trust),
        model_vs_consensus_accuracy_percent: percent(model_hits),
        consensus_vs_truth_accuracy_percent: percent(truth_hits),
        n_cases_rated: votes.len(),
        n_raters: raters.len(),
        n_ratings: ratings.len(),
        n_consensus_cases: consensus_cases,
        n_ties_excluded: ties,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<LogEvent>, EvalError> {
    let file = File::open(path)?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| EvalError::BadLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(events)
}

/// Rebuilds the store from a log alone and returns its summary.
pub fn replay_summary(
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
    log_path: &Path,
) -> Result<EvalSummary, EvalError> {
    let mut store = EvalStore::new(predictions, manifest);
    for event in read_log(log_path)? {
        store.apply(event);
    }
    store.summary()
}
