//! Two-stage lesion analysis toolkit.
//!
//! A vision-language model is first asked one question per visual concept
//! (asymmetry, streaks, blue-whitish veil, ...). The resulting findings are
//! rendered into a second prompt that asks the model for a diagnosis and a
//! step-wise rationale. Around that flow sit the pieces needed to evaluate it:
//! manifest loading, deterministic image perturbation, tolerant response
//! parsing, a scripted mock backend, classification metrics, report rendering
//! and the bookkeeping behind a human rating study.

pub mod domain;
pub mod eval;
pub mod exec;
pub mod gateway;
pub mod manifest;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod raster;
pub mod report;

pub use domain::{
    CaseRecord, ConceptFinding, ConceptSpec, DiagnosisLabel, DiagnosisResult, Split, Stage,
    Variant,
};
pub use manifest::{filter_cases, load_manifest, DatasetManifest, ManifestError};
