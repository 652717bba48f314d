//! Shared domain vocabulary: concepts, findings, labels, cases.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A binary visual feature the perception stage asks about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: String,
    pub display_name: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity_note: Option<String>,
}

impl ConceptSpec {
    pub fn new(id: &str, display_name: &str, question: &str) -> Self {
        Self {
            id: id.to_string(),
            display_name: display_name.to_string(),
            question: question.to_string(),
            polarity_note: None,
        }
    }
}

/// One answer of the perception stage: presence bit plus the model's description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptFinding {
    pub concept_id: String,
    /// Presence indicator, always 0 or 1.
    pub present: u8,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_note: Option<String>,
}

impl ConceptFinding {
    pub fn is_present(&self) -> bool {
        self.present == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiagnosisLabel {
    pub id: String,
    pub display_name: String,
}

impl DiagnosisLabel {
    pub fn new(id: &str, display_name: &str) -> Self {
        Self {
            id: id.to_string(),
            display_name: display_name.to_string(),
        }
    }
}

/// Predicted label plus the rationale split into reasoning steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosisResult {
    pub label: String,
    pub rationale: Vec<String>,
    pub raw_rationale: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_ref: String,
    pub true_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_concepts: Option<BTreeMap<String, u8>>,
    pub split: Split,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Perception,
    Reasoning,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Perception => "perception",
            Stage::Reasoning => "reasoning",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perception" => Ok(Stage::Perception),
            "reasoning" => Ok(Stage::Reasoning),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Pipeline configuration under test. `NoConcept` skips perception entirely,
/// `NoCot` keeps the findings but asks for a direct answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoConcept,
    NoCot,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoConcept, Variant::NoCot];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoConcept => "no_concept",
            Variant::NoCot => "no_cot",
        }
    }

    pub fn uses_perception(&self) -> bool {
        !matches!(self, Variant::NoConcept)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_concept" => Ok(Variant::NoConcept),
            "no_cot" => Ok(Variant::NoCot),
            other => Err(format!(
                "unknown variant `{other}` (expected full, no_concept or no_cot)"
            )),
        }
    }
}

/// Seven-point checklist features followed by the ABCD-style prose features.
pub fn default_vocabulary() -> Vec<ConceptSpec> {
    vec![
        ConceptSpec::new(
            "pigment_network",
            "Atypical pigment network",
            "Is an atypical pigment network present in the lesion?",
        ),
        ConceptSpec::new(
            "streaks",
            "Streaks",
            "Are irregular streaks present at the periphery of the lesion?",
        ),
        ConceptSpec::new(
            "irregular_pigmentation",
            "Irregular pigmentation",
            "Is irregular pigmentation (blotches) present in the lesion?",
        ),
        ConceptSpec::new(
            "regression_structures",
            "Regression structures",
            "Are regression structures present in the lesion?",
        ),
        ConceptSpec::new(
            "dots_globules",
            "Irregular dots/globules",
            "Are irregular dots or globules present in the lesion?",
        ),
        ConceptSpec::new(
            "blue_whitish_veil",
            "Blue-whitish veil",
            "Is a blue-whitish veil present in the lesion?",
        ),
        ConceptSpec::new(
            "vascular_structures",
            "Atypical vascular structures",
            "Are atypical vascular structures present in the lesion?",
        ),
        ConceptSpec::new("asymmetry", "Asymmetry", "Is asymmetry present in the lesion?"),
        ConceptSpec::new(
            "color_variety",
            "Color variety",
            "Are multiple colors or marked color variations present in the lesion?",
        ),
        ConceptSpec::new(
            "border_irregularity",
            "Border irregularity",
            "Are the borders of the lesion irregular?",
        ),
    ]
}

pub fn default_classes() -> Vec<DiagnosisLabel> {
    vec![
        DiagnosisLabel::new("melanoma", "Melanoma"),
        DiagnosisLabel::new("melanocytic_nevus", "Melanocytic Nevus"),
        DiagnosisLabel::new("basal_cell_carcinoma", "Basal Cell Carcinoma"),
        DiagnosisLabel::new("benign_keratosis", "Benign Keratosis-like Lesion"),
        DiagnosisLabel::new("vascular_lesion", "Vascular Lesion"),
        DiagnosisLabel::new("dermatofibroma", "Dermatofibroma"),
        DiagnosisLabel::new("actinic_keratosis", "Actinic Keratosis/Bowen's Disease"),
    ]
}
