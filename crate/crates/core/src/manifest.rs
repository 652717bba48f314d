//! Dataset manifests: loading, validation and case selection.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{default_vocabulary, CaseRecord, ConceptSpec, DiagnosisLabel, Split};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("could not read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("schema violation in `{field}`: {reason}")]
    SchemaViolation { field: String, reason: String },
    #[error("duplicate case id `{0}`")]
    DuplicateCaseId(String),
    #[error("case `{case_id}` references unknown label `{label}`")]
    UnknownLabel { case_id: String, label: String },
}

fn violation(field: impl Into<String>, reason: impl Into<String>) -> ManifestError {
    ManifestError::SchemaViolation {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default = "default_vocabulary")]
    pub vocabulary: Vec<ConceptSpec>,
    pub classes: Vec<DiagnosisLabel>,
    pub cases: Vec<CaseRecord>,
    #[serde(default)]
    pub source_note: String,
    /// Directory relative image references resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    /// Checks every structural invariant. Called by [`load_manifest`]; exposed
    /// for manifests built in memory.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.classes.is_empty() {
            return Err(violation("classes", "must not be empty"));
        }
        let mut class_ids = BTreeSet::new();
        for class in &self.classes {
            if class.id.trim().is_empty() {
                return Err(violation("classes", "class id must not be empty"));
            }
            if !class_ids.insert(class.id.as_str()) {
                return Err(violation("classes", format!("duplicate class id `{}`", class.id)));
            }
        }

        let mut concept_ids = BTreeSet::new();
        for concept in &self.vocabulary {
            if concept.id.trim().is_empty() {
                return Err(violation("vocabulary", "concept id must not be empty"));
            }
            if concept.question.trim().is_empty() {
                return Err(violation(
                    "vocabulary",
                    format!("concept `{}` has an empty question", concept.id),
                ));
            }
            if !concept_ids.insert(concept.id.as_str()) {
                return Err(violation(
                    "vocabulary",
                    format!("duplicate concept id `{}`", concept.id),
                ));
            }
        }

        let mut case_ids = BTreeSet::new();
        for case in &self.cases {
            if case.case_id.trim().is_empty() {
                return Err(violation("cases.case_id", "must not be empty"));
            }
            if !case_ids.insert(case.case_id.as_str()) {
                return Err(ManifestError::DuplicateCaseId(case.case_id.clone()));
            }
            if case.image_ref.trim().is_empty() {
                return Err(violation(
                    "cases.image_ref",
                    format!("case `{}` has no image reference", case.case_id),
                ));
            }
            if !class_ids.contains(case.true_label.as_str()) {
                return Err(ManifestError::UnknownLabel {
                    case_id: case.case_id.clone(),
                    label: case.true_label.clone(),
                });
            }
            if let Some(truth) = &case.true_concepts {
                for (concept, value) in truth {
                    if !concept_ids.contains(concept.as_str()) {
                        return Err(violation(
                            "cases.true_concepts",
                            format!(
                                "case `{}` labels concept `{concept}` outside the vocabulary",
                                case.case_id
                            ),
                        ));
                    }
                    if *value > 1 {
                        return Err(violation(
                            "cases.true_concepts",
                            format!(
                                "case `{}` concept `{concept}` must be 0 or 1, got {value}",
                                case.case_id
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn case(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn class(&self, class_id: &str) -> Option<&DiagnosisLabel> {
        self.classes.iter().find(|c| c.id == class_id)
    }

    pub fn resolve_image(&self, case: &CaseRecord) -> PathBuf {
        let path = Path::new(&case.image_ref);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Reads and validates a manifest document. Case order is the file order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ManifestError::MissingFile(path.to_path_buf()),
        _ => ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    parse_manifest(&text, base_dir)
}

pub fn parse_manifest(text: &str, base_dir: PathBuf) -> Result<DatasetManifest, ManifestError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| violation("document", e.to_string()))?;
    let object = value
        .as_object()
        .ok_or_else(|| violation("document", "top level must be a JSON object"))?;
    for key in ["classes", "cases"] {
        if !object.contains_key(key) {
            return Err(violation(key, "missing required key"));
        }
    }
    if let Some(cases) = object["cases"].as_array() {
        for case in cases {
            if let Some(split) = case.get("split").and_then(|s| s.as_str()) {
                split.parse::<Split>().map_err(|e| violation("cases.split", e))?;
            }
        }
    }
    let mut manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| violation("document", e.to_string()))?;
    manifest.base_dir = base_dir;
    manifest.validate()?;
    Ok(manifest)
}

/// Cases in `split` carrying every tag in `tags`, in manifest order.
pub fn filter_cases<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    tags: &BTreeSet<String>,
) -> Vec<&'a CaseRecord> {
    manifest
        .cases
        .iter()
        .filter(|case| case.split == split && tags.is_subset(&case.tags))
        .collect()
}
