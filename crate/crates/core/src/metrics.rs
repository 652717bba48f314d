//! Classification metrics over prediction records.
//!
//! Conventions:
//! - F1 is macro-averaged (unweighted mean over classes).
//! - Per-class balanced accuracy is one-vs-rest: (sensitivity + specificity) / 2.
//! - A case without a usable diagnosis lands in a per-row `failed` column. It
//!   lowers the recall of its true class and is in no class's predicted set.
//! - F1 with a zero precision+recall denominator is 0.
//! - A class with no true samples is an error, never silently dropped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DiagnosisLabel;
use crate::manifest::DatasetManifest;
use crate::pipeline::PredictionRecord;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction for unknown case `{0}`")]
    UnknownCase(String),
    #[error("class `{0}` has no true samples")]
    EmptyClass(String),
    #[error("label `{0}` is not in the class list")]
    UnknownLabel(String),
    #[error("no case carries concept ground truth for the predicted concepts")]
    NoConceptLabels,
    #[error("no records to summarize")]
    EmptyInput,
    #[error("confusion matrix must be square with one row per class")]
    Shape,
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Failed predictions per true class.
    pub failed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
            failed: vec![0; n],
        }
    }

    pub fn from_counts(
        classes: Vec<String>,
        counts: Vec<Vec<u64>>,
        failed: Option<Vec<u64>>,
    ) -> Result<Self, MetricsError> {
        let n = classes.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(MetricsError::Shape);
        }
        let failed = failed.unwrap_or_else(|| vec![0; n]);
        if failed.len() != n {
            return Err(MetricsError::Shape);
        }
        Ok(Self {
            classes,
            counts,
            failed,
        })
    }

    pub fn identity(classes: Vec<String>) -> Self {
        let mut m = Self::new(classes);
        for i in 0..m.n() {
            m.counts[i][i] = 1;
        }
        m
    }

    fn index(&self, label: &str) -> Result<usize, MetricsError> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))
    }

    /// Records one case; `predicted = None` is a failed prediction.
    pub fn add(&mut self, truth: &str, predicted: Option<&str>) -> Result<(), MetricsError> {
        let t = self.index(truth)?;
        match predicted {
            Some(p) => {
                let p = self.index(p)?;
                self.counts[t][p] += 1;
            }
            None => self.failed[t] += 1,
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.classes.len()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        self.counts[c].iter().sum::<u64>() + self.failed[c]
    }

    pub fn column_total(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.n()).map(|c| self.row_total(c)).sum()
    }

    fn check_rows(&self) -> Result<(), MetricsError> {
        for c in 0..self.n() {
            if self.row_total(c) == 0 {
                return Err(MetricsError::EmptyClass(self.classes[c].clone()));
            }
        }
        Ok(())
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.row_total(c))
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.counts[c][c], self.column_total(c))
    }

    pub fn specificity(&self, c: usize) -> f64 {
        let negatives = self.total() - self.row_total(c);
        let false_pos = self.column_total(c) - self.counts[c][c];
        if negatives == 0 {
            // single-class problem: nothing can be misclassified as c
            return 1.0;
        }
        ratio(negatives - false_pos, negatives)
    }

    pub fn f1(&self, c: usize) -> f64 {
        f1(self.precision(c), self.recall(c))
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Builds the confusion matrix of `predictions` against manifest truth.
pub fn confusion(
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
    classes: &[DiagnosisLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    let mut m = ConfusionMatrix::new(classes.iter().map(|c| c.id.clone()).collect());
    for record in predictions {
        let case = manifest
            .case(&record.case_id)
            .ok_or_else(|| MetricsError::UnknownCase(record.case_id.clone()))?;
        m.add(&case.true_label, record.diagnosis.label())?;
    }
    Ok(m)
}

/// Mean per-class recall, in percent.
pub fn balanced_accuracy(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    m.check_rows()?;
    let sum: f64 = (0..m.n()).map(|c| m.recall(c)).sum();
    Ok(100.0 * sum / m.n() as f64)
}

/// Unweighted mean of per-class F1, in percent.
pub fn macro_f1(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    m.check_rows()?;
    let sum: f64 = (0..m.n()).map(|c| m.f1(c)).sum();
    Ok(100.0 * sum / m.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub bacc_percent: f64,
    pub f1_percent: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub support: u64,
}

pub fn per_class_metrics(m: &ConfusionMatrix) -> Result<Vec<ClassMetrics>, MetricsError> {
    m.check_rows()?;
    Ok((0..m.n())
        .map(|c| {
            let sensitivity = m.recall(c);
            let specificity = m.specificity(c);
            ClassMetrics {
                class: m.classes[c].clone(),
                bacc_percent: 100.0 * (sensitivity + specificity) / 2.0,
                f1_percent: 100.0 * m.f1(c),
                sensitivity,
                specificity,
                precision: m.precision(c),
                support: m.row_total(c),
            }
        })
        .collect())
}

/// 2x2 tallies for one binary decision, positive = present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl BinaryCounts {
    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Mean of the rates that are defined: with only one truth class present
    /// this is that class's rate alone.
    pub fn bacc(&self) -> f64 {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        let sens = ratio(self.tp, pos);
        let spec = ratio(self.tn, neg);
        match (pos > 0, neg > 0) {
            (true, true) => (sens + spec) / 2.0,
            (true, false) => sens,
            (false, true) => spec,
            (false, false) => 0.0,
        }
    }

    pub fn f1(&self) -> f64 {
        f1(ratio(self.tp, self.tp + self.fp), ratio(self.tp, self.tp + self.fn_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub concept: String,
    pub bacc_percent: f64,
    pub f1_percent: f64,
    pub counts: BinaryCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub per_concept: Vec<ConceptMetrics>,
    /// Unweighted mean over concepts.
    pub mean_bacc_percent: f64,
    pub mean_f1_percent: f64,
    /// Metrics over all concept decisions pooled into one 2x2 table.
    pub pooled: ConceptMetrics,
}

/// Per-concept detection quality over cases that carry concept ground truth.
/// A concept whose perception answer failed to parse counts as a wrong
/// decision. Records without any perception stage are skipped.
pub fn concept_metrics(
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
) -> Result<ConceptReport, MetricsError> {
    let mut tallies: BTreeMap<&str, BinaryCounts> = BTreeMap::new();
    for record in predictions {
        if record.findings.is_empty() && record.concept_failures.is_empty() {
            continue;
        }
        let case = manifest
            .case(&record.case_id)
            .ok_or_else(|| MetricsError::UnknownCase(record.case_id.clone()))?;
        let Some(truth) = &case.true_concepts else {
            continue;
        };
        for concept in &manifest.vocabulary {
            let Some(&t) = truth.get(&concept.id) else {
                continue;
            };
            let truth = t == 1;
            let predicted = match record.finding(&concept.id) {
                Some(f) => f.is_present(),
                None => !truth,
            };
            tallies.entry(&concept.id).or_default().add(truth, predicted);
        }
    }
    if tallies.is_empty() {
        return Err(MetricsError::NoConceptLabels);
    }

    // vocabulary order
    let per_concept: Vec<ConceptMetrics> = manifest
        .vocabulary
        .iter()
        .filter_map(|c| tallies.get(c.id.as_str()).map(|t| (c, t)))
        .map(|(c, t)| ConceptMetrics {
            concept: c.id.clone(),
            bacc_percent: 100.0 * t.bacc(),
            f1_percent: 100.0 * t.f1(),
            counts: *t,
        })
        .collect();
    let k = per_concept.len() as f64;
    let mut pooled = BinaryCounts::default();
    for t in tallies.values() {
        pooled.tp += t.tp;
        pooled.fp += t.fp;
        pooled.fn_ += t.fn_;
        pooled.tn += t.tn;
    }
    Ok(ConceptReport {
        mean_bacc_percent: per_concept.iter().map(|c| c.bacc_percent).sum::<f64>() / k,
        mean_f1_percent: per_concept.iter().map(|c| c.f1_percent).sum::<f64>() / k,
        per_concept,
        pooled: ConceptMetrics {
            concept: "pooled".into(),
            bacc_percent: 100.0 * pooled.bacc(),
            f1_percent: 100.0 * pooled.f1(),
            counts: pooled,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_seconds: f64,
    pub median_seconds: f64,
    /// Nearest-rank 95th percentile.
    pub p95_seconds: f64,
    pub n: usize,
}

pub fn latency_summary(predictions: &[PredictionRecord]) -> Result<LatencySummary, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut totals: Vec<f64> = predictions.iter().map(|r| r.total_latency).collect();
    totals.sort_by(f64::total_cmp);
    let n = totals.len();
    let median = if n % 2 == 1 {
        totals[n / 2]
    } else {
        (totals[n / 2 - 1] + totals[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(LatencySummary {
        mean_seconds: totals.iter().sum::<f64>() / n as f64,
        median_seconds: median,
        p95_seconds: totals[rank - 1],
        n,
    })
}

/// Everything the report renderer needs for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bacc_percent: f64,
    pub macro_f1_percent: f64,
    pub per_class: Vec<ClassMetrics>,
    pub per_concept: Vec<ConceptMetrics>,
    pub mean_concept_bacc: Option<f64>,
    pub mean_concept_f1: Option<f64>,
    pub pooled_concept: Option<ConceptMetrics>,
    pub latency_mean_seconds: f64,
    pub latency: Option<LatencySummary>,
    pub n_cases: usize,
    pub n_failures: usize,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    /// Diagnosis metrics always; concept metrics when ground truth exists.
    pub fn build(
        predictions: &[PredictionRecord],
        manifest: &DatasetManifest,
        classes: &[DiagnosisLabel],
    ) -> Result<Self, MetricsError> {
        let m = confusion(predictions, manifest, classes)?;
        let concepts = match concept_metrics(predictions, manifest) {
            Ok(c) => Some(c),
            Err(MetricsError::NoConceptLabels) => None,
            Err(e) => return Err(e),
        };
        let latency = latency_summary(predictions).ok();
        Ok(Self {
            bacc_percent: balanced_accuracy(&m)?,
            macro_f1_percent: macro_f1(&m)?,
            per_class: per_class_metrics(&m)?,
            per_concept: concepts.as_ref().map(|c| c.per_concept.clone()).unwrap_or_default(),
            mean_concept_bacc: concepts.as_ref().map(|c| c.mean_bacc_percent),
            mean_concept_f1: concepts.as_ref().map(|c| c.mean_f1_percent),
            pooled_concept: concepts.map(|c| c.pooled),
            latency_mean_seconds: latency.map(|l| l.mean_seconds).unwrap_or(0.0),
            latency,
            n_cases: predictions.len(),
            n_failures: predictions.iter().filter(|r| r.diagnosis.is_failure()).count(),
            confusion: m,
        })
    }

    /// Headline-only report, e.g. for rendering stored reference values.
    pub fn headline(bacc_percent: f64, macro_f1_percent: f64) -> Self {
        Self {
            bacc_percent,
            macro_f1_percent,
            per_class: Vec::new(),
            per_concept: Vec::new(),
            mean_concept_bacc: None,
            mean_concept_f1: None,
            pooled_concept: None,
            latency_mean_seconds: 0.0,
            latency: None,
            n_cases: 0,
            n_failures: 0,
            confusion: ConfusionMatrix::new(Vec::new()),
        }
    }
}

/// Restricts `classes` to those with at least one true sample among `predictions`.
pub fn classes_present(
    predictions: &[PredictionRecord],
    manifest: &DatasetManifest,
    classes: &[DiagnosisLabel],
) -> Vec<DiagnosisLabel> {
    classes
        .iter()
        .filter(|c| {
            predictions.iter().any(|r| {
                manifest
                    .case(&r.case_id)
                    .is_some_and(|case| case.true_label == c.id)
            })
        })
        .cloned()
        .collect()
}
