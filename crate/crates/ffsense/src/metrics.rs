//! Evaluation formulas for the filter-impact analysis.
//!
//! Everything in this module is a pure function over immutable inputs:
//! classification and regression reports, the normalized-distribution
//! distortion distance with per-filter breaking verdicts, age deviation
//! statistics, confusion matrices, and misprediction tables. All
//! computations are exact IEEE `f64`; nothing here is stochastic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} actual vs {right} predicted")]
    LengthMismatch { left: usize, right: usize },
    #[error("vector norm below 1e-12; cannot normalize")]
    ZeroVector,
    #[error("distribution length mismatch: {left} vs {right}")]
    DistributionLength { left: usize, right: usize },
    #[error("label {label:?} not in the class list")]
    UnknownLabel { label: String },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("actual values have no variance; r2 is undefined")]
    DegenerateVariance,
    #[error("filter {filter_id:?} has no samples")]
    EmptyFilterGroup { filter_id: String },
}

// ---------------------------------------------------------------------------
// Normalized-distribution distortion distance
// ---------------------------------------------------------------------------

/// Euclidean distance between two L2-normalized probability vectors.
///
/// Bounded by 2 for arbitrary unit vectors and by sqrt(2) for
/// non-negative ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionScore(f64);

impl DistortionScore {
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Scales `v` to unit L2 norm.
///
/// Errors when the norm is at or below 1e-12: the direction of a
/// (near-)zero vector is meaningless.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if v.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(MetricsError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Distance between the L2-normalized forms of `p` and `q`.
///
/// Symmetric, zero iff the inputs are positive multiples of each other,
/// and invariant to rescaling either argument.
pub fn pair_distance(p: &[f64], q: &[f64]) -> Result<DistortionScore, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::DistributionLength {
            left: p.len(),
            right: q.len(),
        });
    }
    let np = l2_normalize(p)?;
    let nq = l2_normalize(q)?;
    let d = np
        .iter()
        .zip(&nq)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(DistortionScore(d))
}

/// One filter's aggregated distortion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDistortionRow {
    pub filter_id: String,
    pub mean_d: f64,
    pub n_pairs: usize,
    pub breaking: bool,
}

/// Per-filter mean distortion distances with breaking verdicts.
///
/// Row order follows the first appearance of each filter in the input,
/// so feeding pairs in manifest filter order keeps reports stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDistortionReport {
    pub threshold: f64,
    pub rows: Vec<FilterDistortionRow>,
}

impl FilterDistortionReport {
    pub fn row(&self, filter_id: &str) -> Option<&FilterDistortionRow> {
        self.rows.iter().find(|r| r.filter_id == filter_id)
    }

    pub fn breaking_filters(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.breaking)
            .map(|r| r.filter_id.as_str())
            .collect()
    }
}

pub const DEFAULT_BREAKING_THRESHOLD: f64 = 0.75;

/// Mean pair distance per filter; a filter is breaking when its mean
/// strictly exceeds `threshold`.
pub fn filter_distortion(
    pairs: &[(&[f64], &[f64], &str)],
    threshold: f64,
) -> Result<FilterDistortionReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (baseline, filtered, filter_id) in pairs {
        let d = pair_distance(baseline, filtered)?.value();
        let entry = acc.entry((*filter_id).to_string()).or_insert_with(|| {
            order.push((*filter_id).to_string());
            (0.0, 0)
        });
        entry.0 += d;
        entry.1 += 1;
    }
    let rows = order
        .into_iter()
        .map(|filter_id| {
            let (sum, n) = acc[&filter_id];
            let mean_d = sum / n as f64;
            FilterDistortionRow {
                filter_id,
                mean_d,
                n_pairs: n,
                breaking: mean_d > threshold,
            }
        })
        .collect();
    Ok(FilterDistortionReport { threshold, rows })
}

// ---------------------------------------------------------------------------
// Classification report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Weighted,
}

/// Precision/recall/F1 for one class.
///
/// `zero_denominator` records that a 0-convention fired: the class was
/// never predicted (precision) or never occurred (recall), and the
/// affected metric was reported as 0 instead of NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub zero_denominator: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub total: usize,
    /// Sorted by class name.
    pub per_class: Vec<(String, PerClassMetrics)>,
    /// True when any per-class metric hit the 0-convention.
    pub zero_division_flagged: bool,
}

/// Accuracy plus averaged precision/recall/F1 over the union of classes
/// seen in `actual` and `predicted` (sorted order).
///
/// Per-class conventions: precision is 0 when a class is never
/// predicted, recall is 0 when it never occurs, and F1 is 0 when
/// precision + recall is 0; each such case is flagged.
pub fn classification_report<S: AsRef<str>>(
    actual: &[S],
    predicted: &[S],
    averaging: Averaging,
) -> Result<ClassificationReport, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::EmptyInput);
    }

    let mut classes: Vec<&str> = actual
        .iter()
        .chain(predicted.iter())
        .map(|s| s.as_ref())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();

    let k = classes.len();
    let mut counts = vec![vec![0usize; k]; k];
    let mut correct = 0usize;
    for (a, p) in actual.iter().zip(predicted) {
        let (a, p) = (a.as_ref(), p.as_ref());
        counts[index[a]][index[p]] += 1;
        if a == p {
            correct += 1;
        }
    }
    let total = actual.len();

    let mut per_class = Vec::with_capacity(k);
    let mut flagged = false;
    for (i, class) in classes.iter().enumerate() {
        let tp = counts[i][i];
        let predicted_as: usize = (0..k).map(|r| counts[r][i]).sum();
        let support: usize = counts[i].iter().sum();
        let mut zero = false;
        let precision = if predicted_as == 0 {
            zero = true;
            0.0
        } else {
            tp as f64 / predicted_as as f64
        };
        let recall = if support == 0 {
            zero = true;
            0.0
        } else {
            tp as f64 / support as f64
        };
        let f1 = if precision + recall == 0.0 {
            zero = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        flagged |= zero;
        per_class.push((
            class.to_string(),
            PerClassMetrics {
                precision,
                recall,
                f1,
                support,
                zero_denominator: zero,
            },
        ));
    }

    let (precision, recall, f1) = match averaging {
        Averaging::Macro => {
            let n = k as f64;
            (
                per_class.iter().map(|(_, m)| m.precision).sum::<f64>() / n,
                per_class.iter().map(|(_, m)| m.recall).sum::<f64>() / n,
                per_class.iter().map(|(_, m)| m.f1).sum::<f64>() / n,
            )
        }
        Averaging::Weighted => {
            let weight = |m: &PerClassMetrics| m.support as f64 / total as f64;
            (
                per_class.iter().map(|(_, m)| m.precision * weight(m)).sum(),
                per_class.iter().map(|(_, m)| m.recall * weight(m)).sum(),
                per_class.iter().map(|(_, m)| m.f1 * weight(m)).sum(),
            )
        }
    };

    Ok(ClassificationReport {
        accuracy: correct as f64 / total as f64,
        precision,
        recall,
        f1,
        averaging,
        total,
        per_class,
        zero_division_flagged: flagged,
    })
}

// ---------------------------------------------------------------------------
// Regression report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub r2: f64,
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

pub fn mean_absolute_error(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    check_paired(actual, predicted)?;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).abs())
        .sum::<f64>()
        / actual.len() as f64)
}

pub fn mean_squared_error(actual: &[f64], predicted: &[f64]) -> Result<f64, MetricsError> {
    check_paired(actual, predicted)?;
    Ok(actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum::<f64>()
        / actual.len() as f64)
}

fn check_paired(actual: &[f64], predicted: &[f64]) -> Result<(), MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// R2, MAE, and MSE in one report.
///
/// Requires at least two samples and non-constant actuals (otherwise r2
/// is undefined; MAE/MSE stay available through the standalone
/// functions).
pub fn regression_report(
    actual: &[f64],
    predicted: &[f64],
) -> Result<RegressionReport, MetricsError> {
    check_paired(actual, predicted)?;
    if actual.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: actual.len(),
        });
    }
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricsError::DegenerateVariance);
    }
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    Ok(RegressionReport {
        r2: 1.0 - ss_res / ss_tot,
        mae: mean_absolute_error(actual, predicted)?,
        mse: mean_squared_error(actual, predicted)?,
        n: actual.len(),
    })
}

// ---------------------------------------------------------------------------
// Age deviation (per filter)
// ---------------------------------------------------------------------------

/// One (actual, predicted, filter) age sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeSample {
    pub actual: f64,
    pub predicted: f64,
    pub filter_id: String,
}

/// Deviation statistics over a filter's mispredicted instances.
///
/// Deviation is signed as predicted − actual, so underestimates are
/// negative. Instances predicted exactly right are excluded from all
/// three averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeDeviationStats {
    /// Mean deviation over underestimated instances (≤ 0); 0 when none.
    pub avg_reduction: f64,
    /// Mean deviation over overestimated instances (≥ 0); 0 when none.
    pub avg_increment: f64,
    /// Mean deviation over all mispredicted instances.
    pub net_deviation: f64,
    pub n_underestimated: usize,
    pub n_overestimated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeDeviationRow {
    pub filter_id: String,
    /// `None` marks a filter whose predictions were all exact, leaving
    /// the deviation undefined.
    pub stats: Option<AgeDeviationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeDeviationReport {
    pub rows: Vec<AgeDeviationRow>,
}

impl AgeDeviationReport {
    pub fn row(&self, filter_id: &str) -> Option<&AgeDeviationRow> {
        self.rows.iter().find(|r| r.filter_id == filter_id)
    }
}

/// Per-filter average age reduction, increment, and net deviation.
///
/// Row order follows first appearance of each filter in `samples`.
pub fn age_deviation(samples: &[AgeSample]) -> Result<AgeDeviationReport, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups
            .entry(s.filter_id.as_str())
            .or_insert_with(|| {
                order.push(s.filter_id.clone());
                Vec::new()
            })
            .push(s.predicted - s.actual);
    }
    let rows = order
        .iter()
        .map(|filter_id| {
            let devs = &groups[filter_id.as_str()];
            let under: Vec<f64> = devs.iter().copied().filter(|d| *d < 0.0).collect();
            let over: Vec<f64> = devs.iter().copied().filter(|d| *d > 0.0).collect();
            let (n1, n2) = (under.len(), over.len());
            let stats = if n1 + n2 == 0 {
                None
            } else {
                let sum1: f64 = under.iter().sum();
                let sum2: f64 = over.iter().sum();
                Some(AgeDeviationStats {
                    avg_reduction: if n1 == 0 { 0.0 } else { sum1 / n1 as f64 },
                    avg_increment: if n2 == 0 { 0.0 } else { sum2 / n2 as f64 },
                    net_deviation: (sum1 + sum2) / (n1 + n2) as f64,
                    n_underestimated: n1,
                    n_overestimated: n2,
                })
            };
            AgeDeviationRow {
                filter_id: filter_id.clone(),
                stats,
            }
        })
        .collect();
    Ok(AgeDeviationReport { rows })
}

// ---------------------------------------------------------------------------
// Confusion matrices and misprediction tables
// ---------------------------------------------------------------------------

/// Square count matrix; rows are actual classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Off-diagonal sum of column `j`: how often class `j` was wrongly
    /// predicted.
    pub fn wrongly_predicted_as(&self, j: usize) -> u64 {
        (0..self.classes.len())
            .filter(|&i| i != j)
            .map(|i| self.counts[i][j])
            .sum()
    }
}

/// Counts label pairs into a confusion matrix over `classes` (given
/// order). Labels outside `classes` are an error.
pub fn confusion<S: AsRef<str>>(
    actual: &[S],
    predicted: &[S],
    classes: &[S],
) -> Result<ConfusionMatrix, MetricsError> {
    if actual.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            left: actual.len(),
            right: predicted.len(),
        });
    }
    let class_names: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
    let index: BTreeMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (a, p) in actual.iter().zip(predicted) {
        let ai = *index
            .get(a.as_ref())
            .ok_or_else(|| MetricsError::UnknownLabel {
                label: a.as_ref().to_string(),
            })?;
        let pi = *index
            .get(p.as_ref())
            .ok_or_else(|| MetricsError::UnknownLabel {
                label: p.as_ref().to_string(),
            })?;
        counts[ai][pi] += 1;
    }
    Ok(ConfusionMatrix {
        classes: class_names,
        counts,
    })
}

/// Which attribute a misprediction table describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeTask {
    Gender,
    Ethnicity,
}

pub const GENDER_CLASSES: [&str; 2] = ["male", "female"];
pub const ETHNICITY_CLASSES: [&str; 4] = ["black", "east_asian", "west_asian", "white"];

impl AttributeTask {
    pub fn classes(&self) -> &'static [&'static str] {
        match self {
            AttributeTask::Gender => &GENDER_CLASSES,
            AttributeTask::Ethnicity => &ETHNICITY_CLASSES,
        }
    }
}

/// One filter's directed error counts, together with the confusion
/// matrix they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MispredictionRow {
    pub filter_id: String,
    /// Gender: `male->female` and `female->male` counts.
    /// Ethnicity: per wrongly-predicted-class counts, keyed by class.
    pub counts: Vec<(String, u64)>,
    pub confusion: ConfusionMatrix,
}

impl MispredictionRow {
    pub fn count(&self, key: &str) -> Option<u64> {
        self.counts.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn total_errors(&self) -> u64 {
        self.counts.iter().map(|(_, v)| v).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MispredictionTable {
    pub task: AttributeTask,
    pub rows: Vec<MispredictionRow>,
}

impl MispredictionTable {
    pub fn row(&self, filter_id: &str) -> Option<&MispredictionRow> {
        self.rows.iter().find(|r| r.filter_id == filter_id)
    }
}

/// Directed misprediction counts per filter, read off each filter's
/// confusion matrix so the two views cannot disagree.
pub fn misprediction_tables<S: AsRef<str>>(
    per_filter_samples: &[(String, Vec<S>, Vec<S>)],
    task: AttributeTask,
) -> Result<MispredictionTable, MetricsError> {
    let classes = task.classes();
    let mut rows = Vec::with_capacity(per_filter_samples.len());
    for (filter_id, actual, predicted) in per_filter_samples {
        if actual.is_empty() {
            return Err(MetricsError::EmptyFilterGroup {
                filter_id: filter_id.clone(),
            });
        }
        let actual: Vec<&str> = actual.iter().map(|s| s.as_ref()).collect();
        let predicted: Vec<&str> = predicted.iter().map(|s| s.as_ref()).collect();
        let matrix = confusion(&actual, &predicted, &classes.to_vec())?;
        let counts = match task {
            AttributeTask::Gender => {
                let m = matrix
                    .classes
                    .iter()
                    .position(|c| c == "male")
                    .expect("gender classes fixed");
                let f = matrix
                    .classes
                    .iter()
                    .position(|c| c == "female")
                    .expect("gender classes fixed");
                vec![
                    ("male->female".to_string(), matrix.counts[m][f]),
                    ("female->male".to_string(), matrix.counts[f][m]),
                ]
            }
            AttributeTask::Ethnicity => (0..matrix.classes.len())
                .map(|j| (matrix.classes[j].clone(), matrix.wrongly_predicted_as(j)))
                .collect(),
        };
        rows.push(MispredictionRow {
            filter_id: filter_id.clone(),
            counts,
            confusion: matrix,
        });
    }
    Ok(MispredictionTable { task, rows })
}
