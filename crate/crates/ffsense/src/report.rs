//! Deterministic rendering of analysis products: markdown and CSV
//! tables, fixed-width confusion grids, and the per-filter usability
//! verdict document.
//!
//! All numeric cells print with six fractional digits and a `.` decimal
//! point regardless of locale; identical inputs render byte-identical
//! text.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    AgeDeviationReport, AttributeTask, ClassificationReport, ConfusionMatrix,
    FilterDistortionReport, MispredictionTable, RegressionReport,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("confusion matrices disagree on class lists")]
    MismatchedClasses,
    #[error("filter sets disagree between reports: {0}")]
    FilterSetMismatch(String),
}

/// Lower edge of the "high distortion" band (the breaking threshold is
/// the upper edge). Below it a filter is considered recognition-safe.
pub const HIGH_BAND_CUT: f64 = 0.5;
/// A net age deviation beyond this many years earns a skew note.
pub const AGE_SKEW_NOTE_YEARS: f64 = 0.5;
/// An error class holding more than this share of a filter's errors
/// earns a bias note.
pub const BIAS_CONCENTRATION_SHARE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionBand {
    Ok,
    High,
    Breaking,
}

impl DistortionBand {
    pub fn label(&self) -> &'static str {
        match self {
            DistortionBand::Ok => "ok",
            DistortionBand::High => "high",
            DistortionBand::Breaking => "breaking",
        }
    }
}

/// Band assignment from the mean distance alone.
pub fn band_for(mean_d: f64, breaking_threshold: f64) -> DistortionBand {
    if mean_d > breaking_threshold {
        DistortionBand::Breaking
    } else if mean_d > HIGH_BAND_CUT {
        DistortionBand::High
    } else {
        DistortionBand::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsabilityVerdict {
    pub filter_id: String,
    pub band: DistortionBand,
    pub mean_d: f64,
    pub notes: Vec<String>,
}

/// Display-name lookup for filter ids; falls back to the raw id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterNames(pub BTreeMap<String, String>);

impl FilterNames {
    pub fn from_manifest(manifest: &crate::dataset::DatasetManifest) -> FilterNames {
        FilterNames(
            manifest
                .filters
                .iter()
                .map(|f| (f.filter_id.clone(), f.display_name.clone()))
                .collect(),
        )
    }

    pub fn name<'a>(&'a self, filter_id: &'a str) -> &'a str {
        self.0.get(filter_id).map_or(filter_id, |s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

/// Intermediate tabular form shared by the markdown and CSV writers.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

impl Table {
    fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", self.headers.join(" | "));
        let _ = writeln!(
            out,
            "|{}|",
            self.headers
                .iter()
                .map(|_| " --- ")
                .collect::<Vec<_>>()
                .join("|")
        );
        for row in &self.rows {
            let _ = writeln!(out, "| {} |", row.join(" | "));
        }
        out
    }

    fn to_csv(&self) -> String {
        let mut out = String::new();
        let escape = |cell: &str| -> String {
            if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
                format!("\"{}\"", cell.replace('"', "\"\""))
            } else {
                cell.to_string()
            }
        };
        let _ = writeln!(
            out,
            "{}",
            self.headers
                .iter()
                .map(|h| escape(h))
                .collect::<Vec<_>>()
                .join(",")
        );
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{}",
                row.iter().map(|c| escape(c)).collect::<Vec<_>>().join(",")
            );
        }
        out
    }

    fn render(&self, format: TableFormat) -> String {
        match format {
            TableFormat::Markdown => self.to_markdown(),
            TableFormat::Csv => self.to_csv(),
        }
    }
}

/// Conversion into the shared tabular form; every metrics report that
/// renders as a table implements this.
pub trait RenderTable {
    fn table(&self, names: &FilterNames) -> Table;
}

/// Renders any tabular metrics report in the requested format.
pub fn render_table<T: RenderTable>(
    report: &T,
    names: &FilterNames,
    format: TableFormat,
) -> String {
    report.table(names).render(format)
}

impl RenderTable for FilterDistortionReport {
    fn table(&self, names: &FilterNames) -> Table {
        Table {
            headers: vec![
                "Filter".into(),
                "Mean L2 distance".into(),
                "Pairs".into(),
                "Breaking".into(),
            ],
            rows: self
                .rows
                .iter()
                .map(|r| {
                    vec![
                        names.name(&r.filter_id).to_string(),
                        fmt6(r.mean_d),
                        r.n_pairs.to_string(),
                        if r.breaking { "yes" } else { "no" }.to_string(),
                    ]
                })
                .collect(),
        }
    }
}

impl RenderTable for AgeDeviationReport {
    fn table(&self, names: &FilterNames) -> Table {
        Table {
            headers: vec![
                "Filter".into(),
                "Avg age reduction (yrs)".into(),
                "Avg age increment (yrs)".into(),
                "Net deviation (yrs)".into(),
                "Underestimated".into(),
                "Overestimated".into(),
            ],
            rows: self
                .rows
                .iter()
                .map(|r| match &r.stats {
                    Some(s) => vec![
                        names.name(&r.filter_id).to_string(),
                        fmt6(s.avg_reduction),
                        fmt6(s.avg_increment),
                        fmt6(s.net_deviation),
                        s.n_underestimated.to_string(),
                        s.n_overestimated.to_string(),
                    ],
                    None => vec![
                        names.name(&r.filter_id).to_string(),
                        "n/a".into(),
                        "n/a".into(),
                        "n/a".into(),
                        "0".into(),
                        "0".into(),
                    ],
                })
                .collect(),
        }
    }
}

impl RenderTable for MispredictionTable {
    fn table(&self, names: &FilterNames) -> Table {
        let headers = match self.task {
            AttributeTask::Gender => vec![
                "Filter".to_string(),
                "Males classified as females".to_string(),
                "Females classified as males".to_string(),
            ],
            AttributeTask::Ethnicity => {
                let mut h = vec!["Filter".to_string()];
                h.extend(self.task.classes().iter().map(|c| c.to_string()));
                h
            }
        };
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![names.name(&r.filter_id).to_string()];
                row.extend(r.counts.iter().map(|(_, v)| v.to_string()));
                row
            })
            .collect();
        Table { headers, rows }
    }
}

impl RenderTable for ClassificationReport {
    fn table(&self, _names: &FilterNames) -> Table {
        let mut rows = vec![vec![
            "(all)".to_string(),
            fmt6(self.precision),
            fmt6(self.recall),
            fmt6(self.f1),
            self.total.to_string(),
        ]];
        for (class, m) in &self.per_class {
            rows.push(vec![
                class.clone(),
                fmt6(m.precision),
                fmt6(m.recall),
                fmt6(m.f1),
                m.support.to_string(),
            ]);
        }
        Table {
            headers: vec![
                format!("Class (accuracy {})", fmt6(self.accuracy)),
                "Precision".into(),
                "Recall".into(),
                "F1".into(),
                "Support".into(),
            ],
            rows,
        }
    }
}

impl RenderTable for RegressionReport {
    fn table(&self, _names: &FilterNames) -> Table {
        Table {
            headers: vec!["R2".into(), "MAE".into(), "MSE".into(), "N".into()],
            rows: vec![vec![
                fmt6(self.r2),
                fmt6(self.mae),
                fmt6(self.mse),
                self.n.to_string(),
            ]],
        }
    }
}

/// One labeled fixed-width block per filter, in input order. All
/// matrices must share a class list.
pub fn render_confusion_grid(
    matrices: &[(String, &ConfusionMatrix)],
) -> Result<String, ReportError> {
    if let Some((_, first)) = matrices.first() {
        if matrices.iter().any(|(_, m)| m.classes != first.classes) {
            return Err(ReportError::MismatchedClasses);
        }
    }
    let mut out = String::new();
    for (title, matrix) in matrices {
        let _ = writeln!(out, "== {title} ==");
        let row_labels: Vec<String> = matrix
            .classes
            .iter()
            .map(|c| format!("actual:{c}"))
            .collect();
        let col_labels: Vec<String> = matrix.classes.iter().map(|c| format!("pred:{c}")).collect();
        let label_width = row_labels.iter().map(|l| l.len()).max().unwrap_or(0);
        let cell_width = col_labels
            .iter()
            .map(|l| l.len())
            .chain(matrix.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1);

        let _ = write!(out, "{:label_width$}", "");
        for label in &col_labels {
            let _ = write!(out, "  {label:>cell_width$}");
        }
        let _ = writeln!(out);
        for (i, label) in row_labels.iter().enumerate() {
            let _ = write!(out, "{label:<label_width$}");
            for j in 0..matrix.classes.len() {
                let _ = write!(out, "  {:>cell_width$}", matrix.counts[i][j]);
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(out);
    }
    Ok(out)
}

/// Cross-references the four per-filter analyses into one verdict per
/// filter plus a rendered document.
pub fn usability_report(
    distortion: &FilterDistortionReport,
    age: &AgeDeviationReport,
    gender: &MispredictionTable,
    ethnicity: &MispredictionTable,
    names: &FilterNames,
) -> Result<(Vec<UsabilityVerdict>, String), ReportError> {
    fn ids(mut v: Vec<&str>) -> Vec<&str> {
        v.sort_unstable();
        v
    }
    let d_ids = ids(distortion
        .rows
        .iter()
        .map(|r| r.filter_id.as_str())
        .collect());
    let a_ids = ids(age.rows.iter().map(|r| r.filter_id.as_str()).collect());
    let g_ids = ids(gender.rows.iter().map(|r| r.filter_id.as_str()).collect());
    let e_ids = ids(ethnicity
        .rows
        .iter()
        .map(|r| r.filter_id.as_str())
        .collect());
    if d_ids != a_ids || d_ids != g_ids || d_ids != e_ids {
        return Err(ReportError::FilterSetMismatch(format!(
            "distortion {} / age {} / gender {} / ethnicity {} filters",
            d_ids.len(),
            a_ids.len(),
            g_ids.len(),
            e_ids.len()
        )));
    }

    let mut verdicts = Vec::with_capacity(distortion.rows.len());
    for row in &distortion.rows {
        let mut notes = Vec::new();
        if let Some(stats) = age.row(&row.filter_id).and_then(|r| r.stats.as_ref()) {
            if stats.net_deviation.abs() > AGE_SKEW_NOTE_YEARS {
                let direction = if stats.net_deviation < 0.0 {
                    "younger"
                } else {
                    "older"
                };
                notes.push(format!(
                    "age skews {direction} (net {} years)",
                    fmt6(stats.net_deviation)
                ));
            }
        }
        if let Some(g) = gender.row(&row.filter_id) {
            let total = g.total_errors();
            if total > 0 {
                for (key, count) in &g.counts {
                    if *count as f64 > BIAS_CONCENTRATION_SHARE * total as f64 {
                        notes.push(format!("gender errors trend {key} ({count} of {total})"));
                    }
                }
            }
        }
        if let Some(e) = ethnicity.row(&row.filter_id) {
            let total = e.total_errors();
            if total > 0 {
                for (class, count) in &e.counts {
                    if *count as f64 > BIAS_CONCENTRATION_SHARE * total as f64 {
                        notes.push(format!(
                            "ethnicity errors concentrate on {class} ({count} of {total})"
                        ));
                    }
                }
            }
        }
        verdicts.push(UsabilityVerdict {
            filter_id: row.filter_id.clone(),
            band: band_for(row.mean_d, distortion.threshold),
            mean_d: row.mean_d,
            notes,
        });
    }

    let mut doc = String::from("# Filter usability report\n\n");
    let table = Table {
        headers: vec![
            "Filter".into(),
            "Mean L2 distance".into(),
            "Band".into(),
            "Notes".into(),
        ],
        rows: verdicts
            .iter()
            .map(|v| {
                vec![
                    names.name(&v.filter_id).to_string(),
                    fmt6(v.mean_d),
                    v.band.label().to_string(),
                    if v.notes.is_empty() {
                        "-".to_string()
                    } else {
                        v.notes.join("; ")
                    },
                ]
            })
            .collect(),
    };
    doc.push_str(&table.to_markdown());
    let _ = write!(
        doc,
        "\nBands: ok (d <= {HIGH_BAND_CUT}), high ({HIGH_BAND_CUT} < d <= {}), breaking (d > {}).\n\
         Notes fire when |net age deviation| exceeds {AGE_SKEW_NOTE_YEARS} years or one error \
         class holds more than {:.0}% of a filter's errors. The {HIGH_BAND_CUT} band cut and \
         both note thresholds are reporting conventions of this tool.\n",
        distortion.threshold,
        distortion.threshold,
        BIAS_CONCENTRATION_SHARE * 100.0
    );
    Ok((verdicts, doc))
}
