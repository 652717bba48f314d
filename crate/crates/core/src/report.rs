//! Rendering metrics as comparison tables (Markdown, CSV or LaTeX).
//!
//! Published comparison numbers ship in `data/reference_tables.json`, keyed
//! by table id. Rows with role `baseline` are injected above our own row;
//! rows with role `reference` hold published values for the method itself
//! and are only used for side-by-side checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::DatasetManifest;
use crate::metrics::MetricsReport;
use crate::pipeline::PredictionRecord;

pub const OURS_LABEL: &str = "Ours";
const MISSING: &str = "–";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("could not read reference tables {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("unknown reference table `{0}`")]
    UnknownTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStyle {
    Markdown,
    Csv,
    Latex,
}

impl FromStr for ReportStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "markdown" | "md" => Ok(ReportStyle::Markdown),
            "csv" => Ok(ReportStyle::Csv),
            "latex" | "tex" => Ok(ReportStyle::Latex),
            other => Err(format!("unknown report style `{other}` (markdown, csv or latex)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Baseline,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
    #[serde(default = "baseline_role")]
    pub role: RowRole,
    #[serde(default)]
    pub origin: String,
}

fn baseline_role() -> RowRole {
    RowRole::Baseline
}

impl TableRow {
    pub fn new(method: &str, values: Vec<Option<f64>>) -> Self {
        Self {
            method: method.to_string(),
            values,
            role: RowRole::Baseline,
            origin: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceTables(pub BTreeMap<String, ReferenceTable>);

impl ReferenceTables {
    pub fn builtin() -> Self {
        serde_json::from_str(include_str!("../data/reference_tables.json"))
            .expect("built-in reference tables parse")
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let err = |reason: String| ReportError::Read {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }

    pub fn table(&self, id: &str) -> Result<&ReferenceTable, ReportError> {
        self.0
            .get(id)
            .ok_or_else(|| ReportError::UnknownTable(id.to_string()))
    }

    pub fn baselines(&self, id: &str) -> Vec<TableRow> {
        self.0
            .get(id)
            .map(|t| {
                t.rows
                    .iter()
                    .filter(|r| r.role == RowRole::Baseline)
                    .cloned()
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Published value of column `column` in the row named `method`.
    pub fn value(&self, id: &str, method: &str, column: usize) -> Option<f64> {
        self.0
            .get(id)?
            .rows
            .iter()
            .find(|r| r.method == method)?
            .values
            .get(column)
            .copied()
            .flatten()
    }
}

/// Static rows shown above our own results.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparisons {
    pub diagnosis: Vec<TableRow>,
    pub concept: Vec<TableRow>,
    pub latency: Vec<TableRow>,
}

impl Comparisons {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_reference(tables: &ReferenceTables) -> Self {
        Self {
            diagnosis: tables.baselines("diagnosis"),
            concept: tables.baselines("concept_detection"),
            latency: tables.baselines("inference_time"),
        }
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => MISSING.to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn latex_escape(s: &str) -> String {
    s.replace('\\', "\\textbackslash{}")
        .replace('%', "\\%")
        .replace('&', "\\&")
        .replace('_', "\\_")
        .replace('#', "\\#")
}

/// One table in the requested style. Values are printed to two decimals;
/// missing values render as `–` (empty in CSV).
pub fn render_table(
    title: &str,
    first_column: &str,
    columns: &[&str],
    rows: &[TableRow],
    style: ReportStyle,
) -> String {
    let mut out = String::new();
    match style {
        ReportStyle::Markdown => {
            let _ = writeln!(out, "### {title}\n");
            let _ = writeln!(out, "| {first_column} | {} |", columns.join(" | "));
            let _ = writeln!(out, "|---|{}", "---:|".repeat(columns.len()));
            for row in rows {
                let cells: Vec<String> = row.values.iter().map(|v| fmt_value(*v)).collect();
                let _ = writeln!(out, "| {} | {} |", row.method, cells.join(" | "));
            }
        }
        ReportStyle::Csv => {
            let header: Vec<String> = std::iter::once(first_column)
                .chain(columns.iter().copied())
                .map(csv_field)
                .collect();
            let _ = writeln!(out, "{}", header.join(","));
            for row in rows {
                let mut cells = vec![csv_field(&row.method)];
                cells.extend(
                    row.values
                        .iter()
                        .map(|v| v.map(|v| format!("{v:.2}")).unwrap_or_default()),
                );
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        ReportStyle::Latex => {
            let _ = writeln!(out, "% {title}");
            let _ = writeln!(out, "\\begin{{tabular}}{{l{}}}", "c".repeat(columns.len()));
            let _ = writeln!(out, "\\toprule");
            let header: Vec<String> = columns.iter().map(|c| latex_escape(c)).collect();
            let _ = writeln!(out, "{} & {} \\\\", latex_escape(first_column), header.join(" & "));
            let _ = writeln!(out, "\\midrule");
            for row in rows {
                let cells: Vec<String> = row.values.iter().map(|v| fmt_value(*v)).collect();
                let _ = writeln!(out, "{} & {} \\\\", latex_escape(&row.method), cells.join(" & "));
            }
            let _ = writeln!(out, "\\bottomrule");
            let _ = writeln!(out, "\\end{{tabular}}");
        }
    }
    out
}

const SCORE_COLUMNS: [&str; 2] = ["BACC (%)", "F1 (%)"];

/// Diagnosis table, then concept, per-class and latency tables when the
/// report carries those numbers.
pub fn render_report(metrics: &MetricsReport, comparisons: &Comparisons, style: ReportStyle) -> String {
    let mut sections = Vec::new();

    let mut rows = comparisons.diagnosis.clone();
    rows.push(TableRow::new(
        OURS_LABEL,
        vec![Some(metrics.bacc_percent), Some(metrics.macro_f1_percent)],
    ));
    sections.push(render_table("Disease diagnosis", "Method", &SCORE_COLUMNS, &rows, style));

    if let (Some(bacc), Some(f1)) = (metrics.mean_concept_bacc, metrics.mean_concept_f1) {
        let mut rows = comparisons.concept.clone();
        rows.push(TableRow::new(OURS_LABEL, vec![Some(bacc), Some(f1)]));
        sections.push(render_table("Concept detection", "Method", &SCORE_COLUMNS, &rows, style));
    }

    if !metrics.per_concept.is_empty() {
        let rows: Vec<TableRow> = metrics
            .per_concept
            .iter()
            .map(|c| TableRow::new(&c.concept, vec![Some(c.bacc_percent), Some(c.f1_percent)]))
            .collect();
        sections.push(render_table("Per-concept detection", "Concept", &SCORE_COLUMNS, &rows, style));
    }

    if !metrics.per_class.is_empty() {
        let rows: Vec<TableRow> = metrics
            .per_class
            .iter()
            .map(|c| TableRow::new(&c.class, vec![Some(c.bacc_percent), Some(c.f1_percent)]))
            .collect();
        sections.push(render_table("Per-class diagnosis", "Disease Class", &SCORE_COLUMNS, &rows, style));
    }

    if let Some(latency) = metrics.latency {
        let mut rows = comparisons.latency.clone();
        rows.push(TableRow::new(OURS_LABEL, vec![Some(latency.mean_seconds)]));
        sections.push(render_table(
            "Average inference time",
            "Method",
            &["Average Inference Time (seconds/image)"],
            &rows,
            style,
        ));
    }

    sections.join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    NoConcept,
    NoCot,
    Lite,
    Full,
}

impl AblationRow {
    pub fn label(&self) -> &'static str {
        match self {
            AblationRow::NoConcept => "w/o Concept Perception",
            AblationRow::NoCot => "w/o CoT Reasoning",
            AblationRow::Lite => "Lite Backend",
            AblationRow::Full => "Full Model",
        }
    }
}

/// Ablation table, rows ordered: no concept, no CoT, lite backend, full.
pub fn render_ablation(results: &[(AblationRow, f64, f64)], style: ReportStyle) -> String {
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|r| r.0);
    let rows: Vec<TableRow> = sorted
        .iter()
        .map(|(row, bacc, f1)| TableRow::new(row.label(), vec![Some(*bacc), Some(*f1)]))
        .collect();
    render_table("Ablation (disease diagnosis)", "Variant", &SCORE_COLUMNS, &rows, style)
}

/// Case-by-case rationale listing: id, true label, predicted label, rationale.
pub fn render_rationales(
    records: &[PredictionRecord],
    manifest: &DatasetManifest,
    style: ReportStyle,
) -> String {
    let name = |id: &str| {
        manifest
            .class(id)
            .map(|c| c.display_name.clone())
            .unwrap_or_else(|| id.to_string())
    };
    let mut out = String::new();
    let headers = ["Case ID", "True Diagnosis", "Predicted Diagnosis", "Rationale"];
    let rows: Vec<[String; 4]> = records
        .iter()
        .map(|r| {
            let truth = manifest
                .case(&r.case_id)
                .map(|c| name(&c.true_label))
                .unwrap_or_default();
            let (pred, rationale) = match r.diagnosis.result() {
                Some(d) => (name(&d.label), d.raw_rationale.clone()),
                None => ("(failed)".to_string(), String::new()),
            };
            [r.case_id.clone(), truth, pred, rationale]
        })
        .collect();
    match style {
        ReportStyle::Markdown => {
            let _ = writeln!(out, "| {} |", headers.join(" | "));
            let _ = writeln!(out, "|---|---|---|---|");
            for row in rows {
                let cells: Vec<String> = row.iter().map(|c| c.replace('|', "\\|")).collect();
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
        }
        ReportStyle::Csv => {
            let _ = writeln!(out, "{}", headers.map(csv_field).join(","));
            for row in rows {
                let _ = writeln!(out, "{}", row.map(|c| csv_field(&c)).join(","));
            }
        }
        ReportStyle::Latex => {
            let _ = writeln!(out, "\\begin{{tabular}}{{llll}}");
            let _ = writeln!(out, "\\toprule");
            let _ = writeln!(out, "{} \\\\", headers.join(" & "));
            let _ = writeln!(out, "\\midrule");
            for row in rows {
                let cells: Vec<String> = row.iter().map(|c| latex_escape(c)).collect();
                let _ = writeln!(out, "{} \\\\", cells.join(" & "));
            }
            let _ = writeln!(out, "\\bottomrule");
            let _ = writeln!(out, "\\end{{tabular}}");
        }
    }
    out
}

/// Reads the data rows back out of a Markdown table rendered by this module.
/// Each row yields its label and numeric cells (`None` for `–`).
pub fn parse_markdown_rows(table: &str) -> Vec<(String, Vec<Option<f64>>)> {
    table
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("|---"))
        .skip(1)
        .map(|line| {
            let cells: Vec<&str> = line.trim_matches('|').split(" | ").map(str::trim).collect();
            let values = cells[1..]
                .iter()
                .map(|c| c.parse::<f64>().ok())
                .collect();
            (cells[0].to_string(), values)
        })
        .collect()
}
