//! Prompt templates and rendering for both pipeline stages.
//!
//! Templates are plain UTF-8 text with `{{name}}` placeholders. Which names
//! are legal depends on the stage:
//!
//! | stage      | placeholders                                                  |
//! |------------|---------------------------------------------------------------|
//! | perception | `concept_question`, `format_instructions`                     |
//! | reasoning  | `concept_findings`, `class_list`, `format_instructions`       |
//!
//! Values substituted into a template never introduce a new `{{` marker, so a
//! rendered prompt is always fully resolved.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{ConceptFinding, ConceptSpec, DiagnosisLabel, Stage, Variant};

/// Output contract appended to every perception prompt.
pub const CONCEPT_FORMAT: &str = "Reply with a single JSON object and nothing else, \
exactly in this shape: {\"present\": <true|false>, \"description\": \"<text>\"}";

/// Output contract appended to every reasoning prompt.
pub const DIAGNOSIS_FORMAT: &str = "Finish your reply with a final line that contains \
only this JSON object: {\"diagnosis\": \"<class_id>\", \"rationale\": \"<text>\"}";

const PERCEPTION_PLACEHOLDERS: &[&str] = &["concept_question", "format_instructions"];
const REASONING_PLACEHOLDERS: &[&str] = &["concept_findings", "class_list", "format_instructions"];

pub const PERCEPTION_DEFAULT_ID: &str = "perception.default";
pub const REASONING_FULL_ID: &str = "reasoning.full";
pub const REASONING_NO_COT_ID: &str = "reasoning.no_cot";
pub const REASONING_NO_CONCEPT_ID: &str = "reasoning.no_concept";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template `{template}` is for the {actual} stage, expected {expected}")]
    WrongStage {
        template: String,
        expected: Stage,
        actual: Stage,
    },
    #[error("unresolved placeholder `{0}`")]
    UnresolvedPlaceholder(String),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("template `{0}` has an empty body")]
    EmptyTemplate(String),
    #[error("could not read template {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub stage: Stage,
    pub variant: Variant,
    pub body: String,
}

impl PromptTemplate {
    /// Builds a template after checking its placeholders against the stage.
    pub fn new(id: &str, stage: Stage, variant: Variant, body: &str) -> Result<Self, PromptError> {
        if body.trim().is_empty() {
            return Err(PromptError::EmptyTemplate(id.to_string()));
        }
        let template = Self {
            id: id.to_string(),
            stage,
            variant,
            body: body.to_string(),
        };
        template.check_placeholders()?;
        Ok(template)
    }

    pub fn placeholders(&self) -> Result<Vec<String>, PromptError> {
        scan_placeholders(&self.body)
    }

    fn allowed(&self) -> &'static [&'static str] {
        match self.stage {
            Stage::Perception => PERCEPTION_PLACEHOLDERS,
            Stage::Reasoning => REASONING_PLACEHOLDERS,
        }
    }

    fn check_placeholders(&self) -> Result<(), PromptError> {
        let allowed = self.allowed();
        for name in self.placeholders()? {
            if !allowed.contains(&name.as_str()) {
                return Err(PromptError::UnresolvedPlaceholder(name));
            }
        }
        Ok(())
    }

    fn expect_stage(&self, expected: Stage) -> Result<(), PromptError> {
        if self.stage != expected {
            return Err(PromptError::WrongStage {
                template: self.id.clone(),
                expected,
                actual: self.stage,
            });
        }
        Ok(())
    }

    fn fill(&self, lookup: impl Fn(&str) -> Option<String>) -> Result<String, PromptError> {
        self.check_placeholders()?;
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| PromptError::UnresolvedPlaceholder(after.to_string()))?;
            let name = after[..end].trim();
            let value =
                lookup(name).ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
            out.push_str(&defuse(&value));
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn scan_placeholders(body: &str) -> Result<Vec<String>, PromptError> {
    let mut names = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| {
            PromptError::UnresolvedPlaceholder(after.chars().take(32).collect())
        })?;
        names.push(after[..end].trim().to_string());
        rest = &after[end + 2..];
    }
    Ok(names)
}

// Substituted text must not reintroduce placeholder syntax.
fn defuse(value: &str) -> String {
    let mut s = value.to_string();
    while s.contains("{{") {
        s = s.replace("{{", "{ {");
    }
    s
}

/// A fully resolved prompt ready to send to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_id: Option<String>,
    pub attach_image: bool,
    /// 0 for the original prompt, n for the n-th repair follow-up.
    #[serde(default)]
    pub repair_round: u32,
}

pub fn render_concept_prompt(
    template: &PromptTemplate,
    concept: &ConceptSpec,
    format: &str,
) -> Result<RenderedPrompt, PromptError> {
    template.expect_stage(Stage::Perception)?;
    let text = template.fill(|name| match name {
        "concept_question" => Some(concept.question.clone()),
        "format_instructions" => Some(format.to_string()),
        _ => None,
    })?;
    Ok(RenderedPrompt {
        text,
        stage: Stage::Perception,
        concept_id: Some(concept.id.clone()),
        attach_image: true,
        repair_round: 0,
    })
}

/// Bullet list `- <display name>: present|absent — <description>`, one line
/// per finding, in finding order.
pub fn findings_block(findings: &[ConceptFinding], vocabulary: &[ConceptSpec]) -> String {
    if findings.is_empty() {
        return "- (no concept findings could be extracted)".to_string();
    }
    findings
        .iter()
        .map(|f| {
            let name = vocabulary
                .iter()
                .find(|c| c.id == f.concept_id)
                .map(|c| c.display_name.as_str())
                .unwrap_or(f.concept_id.as_str());
            let state = if f.is_present() { "present" } else { "absent" };
            let description = single_line(&f.description);
            if description.is_empty() {
                format!("- {name}: {state}")
            } else {
                format!("- {name}: {state} — {description}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn class_block(classes: &[DiagnosisLabel]) -> String {
    classes
        .iter()
        .map(|c| format!("- {}: {}", c.id, c.display_name))
        .collect::<Vec<_>>()
        .join("\n")
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_reasoning_prompt(
    template: &PromptTemplate,
    findings: &[ConceptFinding],
    vocabulary: &[ConceptSpec],
    classes: &[DiagnosisLabel],
    variant: Variant,
) -> Result<RenderedPrompt, PromptError> {
    template.expect_stage(Stage::Reasoning)?;
    if template.variant != variant {
        return Err(PromptError::VariantMismatch(format!(
            "template `{}` is for {}, requested {variant}",
            template.id, template.variant
        )));
    }
    if variant == Variant::NoConcept && !findings.is_empty() {
        return Err(PromptError::VariantMismatch(format!(
            "{} findings supplied to the no_concept variant",
            findings.len()
        )));
    }
    let text = template.fill(|name| match name {
        "concept_findings" if variant == Variant::NoConcept => Some(String::new()),
        "concept_findings" => Some(findings_block(findings, vocabulary)),
        "class_list" => Some(class_block(classes)),
        "format_instructions" => Some(DIAGNOSIS_FORMAT.to_string()),
        _ => None,
    })?;
    Ok(RenderedPrompt {
        text,
        stage: Stage::Reasoning,
        concept_id: None,
        attach_image: true,
        repair_round: 0,
    })
}

/// One perception prompt per concept, in vocabulary order.
pub fn prompt_set(
    vocabulary: &[ConceptSpec],
    template: &PromptTemplate,
) -> Result<Vec<RenderedPrompt>, PromptError> {
    if vocabulary.is_empty() {
        return Err(PromptError::EmptyVocabulary);
    }
    vocabulary
        .iter()
        .map(|concept| render_concept_prompt(template, concept, CONCEPT_FORMAT))
        .collect()
}

/// The four templates a pipeline run needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub perception: PromptTemplate,
    pub reasoning_full: PromptTemplate,
    pub reasoning_no_cot: PromptTemplate,
    pub reasoning_no_concept: PromptTemplate,
}

impl TemplateSet {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_bodies(
            include_str!("../templates/perception.default"),
            include_str!("../templates/reasoning.full"),
            include_str!("../templates/reasoning.no_cot"),
            include_str!("../templates/reasoning.no_concept"),
        )
        .expect("built-in templates are valid")
    }

    pub fn from_bodies(
        perception: &str,
        full: &str,
        no_cot: &str,
        no_concept: &str,
    ) -> Result<Self, PromptError> {
        Ok(Self {
            perception: PromptTemplate::new(
                PERCEPTION_DEFAULT_ID,
                Stage::Perception,
                Variant::Full,
                perception,
            )?,
            reasoning_full: PromptTemplate::new(
                REASONING_FULL_ID,
                Stage::Reasoning,
                Variant::Full,
                full,
            )?,
            reasoning_no_cot: PromptTemplate::new(
                REASONING_NO_COT_ID,
                Stage::Reasoning,
                Variant::NoCot,
                no_cot,
            )?,
            reasoning_no_concept: PromptTemplate::new(
                REASONING_NO_CONCEPT_ID,
                Stage::Reasoning,
                Variant::NoConcept,
                no_concept,
            )?,
        })
    }

    /// Loads templates from `dir`. Files are named after the template ids;
    /// any file that is absent falls back to the built-in body.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let builtin = Self::builtin();
        let read = |id: &str, fallback: &str| -> Result<String, PromptError> {
            let path = dir.join(id);
            match fs::read_to_string(&path) {
                Ok(body) => Ok(body),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(e) => Err(PromptError::Io {
                    path,
                    reason: e.to_string(),
                }),
            }
        };
        Self::from_bodies(
            &read(PERCEPTION_DEFAULT_ID, &builtin.perception.body)?,
            &read(REASONING_FULL_ID, &builtin.reasoning_full.body)?,
            &read(REASONING_NO_COT_ID, &builtin.reasoning_no_cot.body)?,
            &read(REASONING_NO_CONCEPT_ID, &builtin.reasoning_no_concept.body)?,
        )
    }

    pub fn reasoning(&self, variant: Variant) -> &PromptTemplate {
        match variant {
            Variant::Full => &self.reasoning_full,
            Variant::NoCot => &self.reasoning_no_cot,
            Variant::NoConcept => &self.reasoning_no_concept,
        }
    }

    /// Hex digest over the templates a variant actually uses.
    pub fn fingerprint(&self, variant: Variant) -> String {
        let mut hasher = Sha256::new();
        if variant.uses_perception() {
            hasher.update(self.perception.body.as_bytes());
        }
        hasher.update([0u8]);
        hasher.update(self.reasoning(variant).body.as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::default_classes;

    fn asymmetry() -> ConceptSpec {
        ConceptSpec::new("asymmetry", "Asymmetry", "Is asymmetry present in the lesion?")
    }

    fn finding(id: &str, present: u8, description: &str) -> ConceptFinding {
        ConceptFinding {
            concept_id: id.into(),
            present,
            description: description.into(),
            confidence_note: None,
        }
    }

    #[test]
    fn concept_prompt_contains_question_and_contract() {
        let set = TemplateSet::builtin();
        let p = render_concept_prompt(&set.perception, &asymmetry(), CONCEPT_FORMAT).unwrap();
        assert!(p.text.contains("Is asymmetry present in the lesion?"));
        assert!(p.text.contains(r#"{"present": <true|false>, "description": "<text>"}"#));
        assert!(p.attach_image);
        assert_eq!(p.concept_id.as_deref(), Some("asymmetry"));
        assert!(!p.text.contains("{{"));
    }

    #[test]
    fn template_without_placeholders_renders_verbatim() {
        let t = PromptTemplate::new("plain", Stage::Perception, Variant::Full, "Look closely.").unwrap();
        let p = render_concept_prompt(&t, &asymmetry(), CONCEPT_FORMAT).unwrap();
        assert_eq!(p.text, "Look closely.");
        assert_eq!(p.concept_id.as_deref(), Some("asymmetry"));
    }

    #[test]
    fn unknown_placeholder_is_reported() {
        let err = PromptTemplate::new("bad", Stage::Perception, Variant::Full, "Q: {{unknown}}")
            .unwrap_err();
        assert_eq!(err, PromptError::UnresolvedPlaceholder("unknown".into()));

        // Placeholders are stage-scoped.
        let err = PromptTemplate::new("bad", Stage::Perception, Variant::Full, "{{class_list}}")
            .unwrap_err();
        assert_eq!(err, PromptError::UnresolvedPlaceholder("class_list".into()));

        // A template mutated after construction is still checked at render time.
        let mut t = TemplateSet::builtin().perception;
        t.body = "{{unknown}}".into();
        assert_eq!(
            render_concept_prompt(&t, &asymmetry(), CONCEPT_FORMAT).unwrap_err(),
            PromptError::UnresolvedPlaceholder("unknown".into())
        );
    }

    #[test]
    fn wrong_stage() {
        let set = TemplateSet::builtin();
        assert!(matches!(
            render_concept_prompt(&set.reasoning_full, &asymmetry(), CONCEPT_FORMAT),
            Err(PromptError::WrongStage { .. })
        ));
        assert!(matches!(
            render_reasoning_prompt(&set.perception, &[], &[], &default_classes(), Variant::Full),
            Err(PromptError::WrongStage { .. })
        ));
    }

    #[test]
    fn full_prompt_embeds_findings_and_cot_instruction() {
        let set = TemplateSet::builtin();
        let vocab = vec![
            asymmetry(),
            ConceptSpec::new("colors", "Multiple colors", "Are multiple colors present?"),
            ConceptSpec::new("edges", "Irregular edges", "Are the edges irregular?"),
        ];
        let findings = vec![
            finding("asymmetry", 1, "high degree of asymmetry"),
            finding("colors", 1, "multiple colors"),
            finding("edges", 1, "irregular edges"),
        ];
        let p = render_reasoning_prompt(
            &set.reasoning_full,
            &findings,
            &vocab,
            &default_classes(),
            Variant::Full,
        )
        .unwrap();
        assert!(p.text.contains("- Asymmetry: present — high degree of asymmetry"));
        assert!(p.text.contains("- Multiple colors: present — multiple colors"));
        assert!(p.text.contains("- Irregular edges: present — irregular edges"));
        assert!(p.text.contains("step-by-step"));
        assert!(p.text.contains("- melanoma: Melanoma"));
        assert!(p.text.contains(r#"{"diagnosis": "<class_id>", "rationale": "<text>"}"#));
        assert!(p.attach_image);
    }

    #[test]
    fn no_concept_prompt_has_no_findings_block() {
        let set = TemplateSet::builtin();
        let p = render_reasoning_prompt(
            &set.reasoning_no_concept,
            &[],
            &[],
            &default_classes(),
            Variant::NoConcept,
        )
        .unwrap();
        assert!(!p.text.contains("Visual concepts reported"));
        assert!(p.text.contains("- dermatofibroma: Dermatofibroma"));

        let err = render_reasoning_prompt(
            &set.reasoning_no_concept,
            &[finding("asymmetry", 1, "x")],
            &[asymmetry()],
            &default_classes(),
            Variant::NoConcept,
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::VariantMismatch(_)));
    }

    #[test]
    fn template_variant_must_match() {
        let set = TemplateSet::builtin();
        let err = render_reasoning_prompt(
            &set.reasoning_full,
            &[finding("asymmetry", 1, "x")],
            &[asymmetry()],
            &default_classes(),
            Variant::NoCot,
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::VariantMismatch(_)));
    }

    #[test]
    fn injected_braces_are_defused() {
        let set = TemplateSet::builtin();
        let p = render_reasoning_prompt(
            &set.reasoning_full,
            &[finding("asymmetry", 1, "weird {{class_list}} text")],
            &[asymmetry()],
            &default_classes(),
            Variant::Full,
        )
        .unwrap();
        assert!(!p.text.contains("{{"));
    }

    #[test]
    fn prompt_set_sizes() {
        let set = TemplateSet::builtin();
        assert_eq!(prompt_set(&[asymmetry()], &set.perception).unwrap().len(), 1);
        assert_eq!(
            prompt_set(&[], &set.perception).unwrap_err(),
            PromptError::EmptyVocabulary
        );
    }

    #[test]
    fn load_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(REASONING_NO_COT_ID), "Direct. {{class_list}}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.reasoning_no_cot.body, "Direct. {{class_list}}");
        assert_eq!(set.perception, TemplateSet::builtin().perception);
        assert_ne!(
            set.fingerprint(Variant::NoCot),
            TemplateSet::builtin().fingerprint(Variant::NoCot)
        );
    }
}
