//! Two-stage execution: concept perception, then diagnostic reasoning.
//!
//! For each case the perception stage issues one query per vocabulary
//! concept, the findings are rendered as a bullet list into the reasoning
//! prompt, and the reasoning stage returns a label with its rationale. Stage
//! order within a case is strictly sequential; cases run in parallel on a
//! bounded pool and results always come back in manifest order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{
    CaseRecord, ConceptFinding, ConceptSpec, DiagnosisLabel, DiagnosisResult, Split,
    Variant,
};
use crate::exec::{map_ordered, Execution};
use crate::gateway::{Gateway, GatewayError, ImagePayload, ModelExchange, Request};
use crate::manifest::{filter_cases, DatasetManifest};
use crate::parser::{
    parse_concept, parse_diagnosis, repair_prompt, ParseError, ParseMethod, ParseOutcome,
    DEFAULT_MAX_REPAIR_ROUNDS,
};
use crate::prompt::{
    render_concept_prompt, render_reasoning_prompt, PromptError, RenderedPrompt, TemplateSet,
    CONCEPT_FORMAT,
};
use crate::raster::RgbRaster;

/// Prefix of the trailing summary line in a predictions file.
pub const SUMMARY_PREFIX: &str = "#summary ";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("case {case_id}: could not load image {path}: {detail}")]
    ImageLoad {
        case_id: String,
        path: PathBuf,
        detail: String,
    },
    #[error("case {case_id}: backend error: {source}")]
    Backend {
        case_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("case {case_id}: {source}")]
    Prompt {
        case_id: String,
        #[source]
        source: PromptError,
    },
    #[error("no cases match the requested split and tags")]
    EmptySelection,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed predictions file {path}, line {line}: {reason}")]
    BadPredictions {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub vocabulary: Vec<ConceptSpec>,
    pub classes: Vec<DiagnosisLabel>,
    pub templates: TemplateSet,
    pub max_repair_rounds: u32,
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(variant: Variant, vocabulary: Vec<ConceptSpec>, classes: Vec<DiagnosisLabel>) -> Self {
        Self {
            variant,
            vocabulary,
            classes,
            templates: TemplateSet::builtin(),
            max_repair_rounds: DEFAULT_MAX_REPAIR_ROUNDS,
            cache_dir: None,
            workers: 1,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptFailure {
    pub concept_id: String,
    pub error: ParseError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DiagnosisOutcome {
    Diagnosed {
        #[serde(flatten)]
        result: DiagnosisResult,
        method: ParseMethod,
        repair_rounds: u32,
    },
    /// Every repair round was used up without a usable reply.
    ParseFailure {
        error: ParseError,
        last_response: String,
    },
    /// The case could not be run (image or backend failure).
    Error { detail: String },
}

impl DiagnosisOutcome {
    pub fn label(&self) -> Option<&str> {
        match self {
            DiagnosisOutcome::Diagnosed { result, .. } => Some(&result.label),
            _ => None,
        }
    }

    pub fn result(&self) -> Option<&DiagnosisResult> {
        match self {
            DiagnosisOutcome::Diagnosed { result, .. } => Some(result),
            _ => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        !matches!(self, DiagnosisOutcome::Diagnosed { .. })
    }
}

/// Full per-case trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub variant: Variant,
    pub backend_id: String,
    pub findings: Vec<ConceptFinding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub concept_failures: Vec<ConceptFailure>,
    pub diagnosis: DiagnosisOutcome,
    pub exchanges: Vec<ModelExchange>,
    pub stage1_latency: f64,
    pub stage2_latency: f64,
    pub total_latency: f64,
}

impl PredictionRecord {
    /// Copy with every timing field zeroed, for determinism comparisons.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        out.stage1_latency = 0.0;
        out.stage2_latency = 0.0;
        out.total_latency = 0.0;
        for ex in &mut out.exchanges {
            ex.latency = 0.0;
        }
        out
    }

    pub fn finding(&self, concept_id: &str) -> Option<&ConceptFinding> {
        self.findings.iter().find(|f| f.concept_id == concept_id)
    }

    fn failed(case_id: &str, variant: Variant, backend_id: &str, detail: String) -> Self {
        Self {
            case_id: case_id.to_string(),
            variant,
            backend_id: backend_id.to_string(),
            findings: Vec::new(),
            concept_failures: Vec::new(),
            diagnosis: DiagnosisOutcome::Error { detail },
            exchanges: Vec::new(),
            stage1_latency: 0.0,
            stage2_latency: 0.0,
            total_latency: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub backend_id: String,
    pub n_cases: usize,
    /// Cases without a usable diagnosis (parse failures plus errors).
    pub n_failures: usize,
    pub n_parse_failures: usize,
    pub n_errors: usize,
    pub n_concept_failures: usize,
    pub n_exchanges: usize,
    pub cache_hits: usize,
    pub wall_time_seconds: f64,
}

/// Stage-one result for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Perception {
    pub findings: Vec<ConceptFinding>,
    pub failures: Vec<ConceptFailure>,
    pub exchanges: Vec<ModelExchange>,
    pub latency: f64,
}

/// Stage-two result for one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Reasoning {
    pub outcome: DiagnosisOutcome,
    pub exchanges: Vec<ModelExchange>,
    pub latency: f64,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    cache_hits: AtomicUsize,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, gateway: Gateway) -> Self {
        Self {
            config,
            gateway,
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    // One prompt plus up to `max_repair_rounds` follow-ups. The outer result
    // is a backend failure; the inner one a parse failure after all repairs.
    fn ask<T>(
        &self,
        case_id: &str,
        prompt: RenderedPrompt,
        image: &ImagePayload,
        parse: impl Fn(&str) -> Result<ParseOutcome<T>, ParseError>,
        exchanges: &mut Vec<ModelExchange>,
    ) -> Result<Result<ParseOutcome<T>, (ParseError, String)>, GatewayError> {
        let mut prompt = prompt;
        loop {
            let exchange = self.gateway.query(&Request {
                prompt: &prompt,
                image: Some(image),
                case_id,
                variant: self.config.variant,
            })?;
            let raw = exchange.response_text.clone();
            exchanges.push(exchange);
            match parse(&raw) {
                Ok(outcome) => return Ok(Ok(outcome.repaired(prompt.repair_round))),
                Err(e) if prompt.repair_round >= self.config.max_repair_rounds => {
                    return Ok(Err((e, raw)))
                }
                Err(e) => {
                    log::debug!("case {case_id}: {e}; requesting repair");
                    prompt = repair_prompt(&raw, &e, &prompt, &self.config.classes);
                }
            }
        }
    }

    pub fn perceive_concepts(
        &self,
        case: &CaseRecord,
        image: &ImagePayload,
    ) -> Result<Perception, PipelineError> {
        let template = &self.config.templates.perception;
        let mut findings = Vec::with_capacity(self.config.vocabulary.len());
        let mut failures = Vec::new();
        let mut exchanges = Vec::new();
        for concept in &self.config.vocabulary {
            let prompt = render_concept_prompt(template, concept, CONCEPT_FORMAT).map_err(|source| {
                PipelineError::Prompt {
                    case_id: case.case_id.clone(),
                    source,
                }
            })?;
            let answer = self
                .ask(
                    &case.case_id,
                    prompt,
                    image,
                    |raw| parse_concept(raw, &concept.id),
                    &mut exchanges,
                )
                .map_err(|source| PipelineError::Backend {
                    case_id: case.case_id.clone(),
                    source,
                })?;
            match answer {
                Ok(outcome) => findings.push(outcome.value),
                Err((error, _)) => failures.push(ConceptFailure {
                    concept_id: concept.id.clone(),
                    error,
                }),
            }
        }
        let latency = exchanges.iter().map(|e| e.latency).sum();
        Ok(Perception {
            findings,
            failures,
            exchanges,
            latency,
        })
    }

    pub fn reason_diagnosis(
        &self,
        case: &CaseRecord,
        findings: &[ConceptFinding],
        image: &ImagePayload,
    ) -> Result<Reasoning, PipelineError> {
        let variant = self.config.variant;
        let prompt = render_reasoning_prompt(
            self.config.templates.reasoning(variant),
            findings,
            &self.config.vocabulary,
            &self.config.classes,
            variant,
        )
        .map_err(|source| PipelineError::Prompt {
            case_id: case.case_id.clone(),
            source,
        })?;
        let mut exchanges = Vec::new();
        let answer = self
            .ask(
                &case.case_id,
                prompt,
                image,
                |raw| parse_diagnosis(raw, &self.config.classes),
                &mut exchanges,
            )
            .map_err(|source| PipelineError::Backend {
                case_id: case.case_id.clone(),
                source,
            })?;
        let outcome = match answer {
            Ok(o) => DiagnosisOutcome::Diagnosed {
                result: o.value,
                method: o.method,
                repair_rounds: o.repair_rounds,
            },
            Err((error, last_response)) => DiagnosisOutcome::ParseFailure {
                error,
                last_response,
            },
        };
        let latency = exchanges.iter().map(|e| e.latency).sum();
        Ok(Reasoning {
            outcome,
            exchanges,
            latency,
        })
    }

    pub fn run_case(
        &self,
        manifest: &DatasetManifest,
        case: &CaseRecord,
    ) -> Result<PredictionRecord, PipelineError> {
        let cache_path = self.cache_path(case);
        if let Some(path) = &cache_path {
            if let Some(record) = read_cached(path) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(record);
            }
        }

        let image = load_image_payload(case, &manifest.resolve_image(case))?;
        let perception = if self.config.variant.uses_perception() {
            self.perceive_concepts(case, &image)?
        } else {
            Perception {
                findings: Vec::new(),
                failures: Vec::new(),
                exchanges: Vec::new(),
                latency: 0.0,
            }
        };
        let reasoning = self.reason_diagnosis(case, &perception.findings, &image)?;

        let mut exchanges = perception.exchanges;
        exchanges.extend(reasoning.exchanges);
        let record = PredictionRecord {
            case_id: case.case_id.clone(),
            variant: self.config.variant,
            backend_id: self.gateway.backend_id().to_string(),
            findings: perception.findings,
            concept_failures: perception.failures,
            diagnosis: reasoning.outcome,
            exchanges,
            stage1_latency: perception.latency,
            stage2_latency: reasoning.latency,
            total_latency: perception.latency + reasoning.latency,
        };
        if let Some(path) = &cache_path {
            if let Err(e) = write_cached(path, &record) {
                log::warn!("could not cache {}: {e}", case.case_id);
            }
        }
        Ok(record)
    }

    /// Runs every case, converting per-case errors into failure records.
    pub fn run_cases(&self, manifest: &DatasetManifest, cases: &[&CaseRecord]) -> Vec<PredictionRecord> {
        let execution = Execution::with_workers(self.config.workers);
        map_ordered(cases, execution, |case| {
            self.run_case(manifest, case).unwrap_or_else(|e| {
                log::warn!("{e}");
                PredictionRecord::failed(
                    &case.case_id,
                    self.config.variant,
                    self.gateway.backend_id(),
                    e.to_string(),
                )
            })
        })
    }

    /// Runs the selected cases and writes the predictions file at `out`.
    pub fn run_dataset(
        &self,
        manifest: &DatasetManifest,
        split: Split,
        tags: &BTreeSet<String>,
        out: &Path,
    ) -> Result<RunSummary, PipelineError> {
        let cases = filter_cases(manifest, split, tags);
        if cases.is_empty() {
            return Err(PipelineError::EmptySelection);
        }
        let hits_before = self.cache_hits();
        let started = Instant::now();
        let records = self.run_cases(manifest, &cases);
        let mut summary = summarize(&records, self.config.variant, self.gateway.backend_id());
        summary.cache_hits = self.cache_hits() - hits_before;
        summary.wall_time_seconds = started.elapsed().as_secs_f64();
        write_predictions(out, &records, &summary)?;
        Ok(summary)
    }

    fn cache_path(&self, case: &CaseRecord) -> Option<PathBuf> {
        let dir = self.config.cache_dir.as_ref()?;
        let mut hasher = Sha256::new();
        hasher.update(self.gateway.backend_id().as_bytes());
        hasher.update([0]);
        hasher.update(self.config.templates.fingerprint(self.config.variant).as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_vec(&self.config.vocabulary).unwrap_or_default());
        hasher.update(serde_json::to_vec(&self.config.classes).unwrap_or_default());
        hasher.update(self.config.max_repair_rounds.to_le_bytes());
        hasher.update(case.image_ref.as_bytes());
        let digest = hex::encode(hasher.finalize());
        let safe_id: String = case
            .case_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        Some(dir.join(format!("{safe_id}.{}.{}.json", self.config.variant, &digest[..16])))
    }
}

pub fn summarize(records: &[PredictionRecord], variant: Variant, backend_id: &str) -> RunSummary {
    let n_parse_failures = records
        .iter()
        .filter(|r| matches!(r.diagnosis, DiagnosisOutcome::ParseFailure { .. }))
        .count();
    let n_errors = records
        .iter()
        .filter(|r| matches!(r.diagnosis, DiagnosisOutcome::Error { .. }))
        .count();
    RunSummary {
        variant,
        backend_id: backend_id.to_string(),
        n_cases: records.len(),
        n_failures: n_parse_failures + n_errors,
        n_parse_failures,
        n_errors,
        n_concept_failures: records.iter().map(|r| r.concept_failures.len()).sum(),
        n_exchanges: records.iter().map(|r| r.exchanges.len()).sum(),
        cache_hits: 0,
        wall_time_seconds: 0.0,
    }
}

fn read_cached(path: &Path) -> Option<PredictionRecord> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
            None
        }
    }
}

// Write to a temporary sibling and rename so concurrent readers never see a
// partial entry.
fn write_cached(path: &Path, record: &PredictionRecord) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, serde_json::to_vec(record)?)?;
    fs::rename(&tmp, path)
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a case image for transport. PNG files pass through unchanged;
/// anything else the decoder understands is re-encoded as PNG.
pub fn load_image_payload(case: &CaseRecord, path: &Path) -> Result<ImagePayload, PipelineError> {
    let fail = |detail: String| PipelineError::ImageLoad {
        case_id: case.case_id.clone(),
        path: path.to_path_buf(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    if bytes.is_empty() {
        return Err(fail("file is empty".into()));
    }
    if bytes.starts_with(PNG_MAGIC) {
        return Ok(ImagePayload {
            bytes,
            media_type: "image/png".into(),
        });
    }
    let raster =
        RgbRaster::decode(&bytes, &path.display().to_string()).map_err(|e| fail(e.to_string()))?;
    let png = raster.to_png().map_err(|e| fail(e.to_string()))?;
    Ok(ImagePayload {
        bytes: png,
        media_type: "image/png".into(),
    })
}

pub fn write_predictions(
    path: &Path,
    records: &[PredictionRecord],
    summary: &RunSummary,
) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    out.push_str(SUMMARY_PREFIX);
    out.push_str(&serde_json::to_string(summary).expect("summary serializes"));
    out.push('\n');
    let mut file =
        fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    file.write_all(out.as_bytes())
        .map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_predictions(
    path: &Path,
) -> Result<(Vec<PredictionRecord>, Option<RunSummary>), PipelineError> {
    let file = fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let bad = |line: usize, reason: String| PipelineError::BadPredictions {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    let mut summary = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(SUMMARY_PREFIX) {
            summary = Some(serde_json::from_str(rest).map_err(|e| bad(i + 1, e.to_string()))?);
        } else {
            records.push(serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?);
        }
    }
    Ok((records, summary))
}

/// Records with timings zeroed, one JSON object per line.
pub fn canonical_jsonl(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(&r.canonical()).expect("record serializes") + "\n")
        .collect()
}
