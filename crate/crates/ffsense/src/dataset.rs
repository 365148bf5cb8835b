//! Dataset manifests: subjects, images, filters, and ground truth.
//!
//! A manifest is UTF-8 JSON-lines, one record per line, each tagged with
//! `"kind": "subject" | "image" | "filter" | "meta"`. Manifests are
//! immutable after load; every operation here is a pure function over
//! them and safe to call from concurrent readers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Reserved pose tag for the unfiltered front-facing image that serves
/// as the comparison baseline. All other pose tags are free-form.
pub const NEUTRAL_FRONT: &str = "neutral_front";

/// Sentinel for "no filter applied" in the on-disk image records.
pub const NO_FILTER: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn label(&self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn class_index(&self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    EastAsian,
    WestAsian,
    Black,
    White,
}

impl Ethnicity {
    pub fn label(&self) -> &'static str {
        match self {
            Ethnicity::EastAsian => "east_asian",
            Ethnicity::WestAsian => "west_asian",
            Ethnicity::Black => "black",
            Ethnicity::White => "white",
        }
    }

    /// Index into the fixed ethnicity-head class order.
    pub fn class_index(&self) -> usize {
        match self {
            Ethnicity::EastAsian => 0,
            Ethnicity::WestAsian => 1,
            Ethnicity::Black => 2,
            Ethnicity::White => 3,
        }
    }

    pub const CLASS_ORDER: [Ethnicity; 4] = [
        Ethnicity::EastAsian,
        Ethnicity::WestAsian,
        Ethnicity::Black,
        Ethnicity::White,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceApp {
    FaceApp,
    B612,
    Snapchat,
    #[serde(rename = "other")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCategory {
    Beautification,
    Occlusion,
    Distortion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: u32,
    pub gender: Gender,
    pub ethnicity: Ethnicity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub subject_id: String,
    pub pose: String,
    /// `None` for unfiltered images (`"none"` on disk).
    pub filter_id: Option<String>,
    pub uri: String,
}

impl ImageRecord {
    pub fn is_filtered(&self) -> bool {
        self.filter_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub filter_id: String,
    pub display_name: String,
    pub source_app: SourceApp,
    pub category: FilterCategory,
}

/// Catalog of subjects, images, and filters plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectRecord>,
    pub images: Vec<ImageRecord>,
    pub filters: Vec<FilterSpec>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Parse {
        line: usize,
        message: String,
    },
    DuplicateId {
        kind: &'static str,
        id: String,
        line: usize,
    },
    DanglingSubject {
        image_id: String,
        subject_id: String,
    },
    DanglingFilter {
        image_id: String,
        filter_id: String,
    },
    FilteredImageBadPose {
        image_id: String,
        pose: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Parse { line, message } => {
                write!(f, "line {line}: malformed record: {message}")
            }
            Violation::DuplicateId { kind, id, line } => {
                write!(f, "line {line}: duplicate {kind} id \"{id}\"")
            }
            Violation::DanglingSubject {
                image_id,
                subject_id,
            } => write!(
                f,
                "image \"{image_id}\" references unknown subject \"{subject_id}\""
            ),
            Violation::DanglingFilter {
                image_id,
                filter_id,
            } => write!(
                f,
                "image \"{image_id}\" references unknown filter \"{filter_id}\""
            ),
            Violation::FilteredImageBadPose { image_id, pose } => write!(
                f,
                "filtered image \"{image_id}\" has pose \"{pose}\"; filtered images must be {NEUTRAL_FRONT}"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid manifest:\n{}", format_violations(.violations))]
    Invalid { violations: Vec<Violation> },
    #[error("train_fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error(
        "subject \"{subject_id}\" has {count} image(s); stratified splitting needs at least 2"
    )]
    SubjectTooSmall { subject_id: String, count: usize },
    #[error("cannot split fewer than 2 images")]
    TooFewImages,
    #[error("subject \"{subject_id}\" has no unfiltered {NEUTRAL_FRONT} baseline image")]
    MissingBaseline { subject_id: String },
    #[error("subject \"{subject_id}\" has {count} unfiltered {NEUTRAL_FRONT} images; expected exactly 1")]
    MultipleBaselines { subject_id: String, count: usize },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

// On-disk shape of an image record: the filter sentinel is a string.
#[derive(Serialize, Deserialize)]
struct ImageWire {
    image_id: String,
    subject_id: String,
    pose: String,
    filter_id: String,
    uri: String,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct SubjectWire {
    #[serde(flatten)]
    record: SubjectRecord,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct FilterWire {
    #[serde(flatten)]
    record: FilterSpec,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Subject(SubjectWire),
    Image(ImageWire),
    Filter(FilterWire),
    Meta(BTreeMap<String, Value>),
}

fn value_to_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl DatasetManifest {
    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn filter(&self, id: &str) -> Option<&FilterSpec> {
        self.filters.iter().find(|f| f.filter_id == id)
    }

    pub fn images_of_subject<'a>(
        &'a self,
        subject_id: &'a str,
    ) -> impl Iterator<Item = &'a ImageRecord> {
        self.images
            .iter()
            .filter(move |i| i.subject_id == subject_id)
    }

    /// Number of identity classes a recognizer trained on this manifest
    /// must have.
    pub fn identity_class_count(&self) -> usize {
        self.subjects.len()
    }

    /// Subject ids in sorted order; this is the canonical identity
    /// class order used by the recognizer head.
    pub fn identity_classes(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.subjects.iter().map(|s| s.subject_id.clone()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn summary(&self) -> String {
        format!(
            "{} subjects, {} images, {} filters",
            self.subjects.len(),
            self.images.len(),
            self.filters.len()
        )
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut manifest = DatasetManifest::default();
        let mut violations = Vec::new();
        let mut subject_ids = BTreeSet::new();
        let mut image_ids = BTreeSet::new();
        let mut filter_ids = BTreeSet::new();

        for (idx, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = match serde_json::from_str(&line) {
                Ok(p) => p,
                Err(e) => {
                    violations.push(Violation::Parse {
                        line: line_no,
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            match parsed {
                ManifestLine::Subject(wire) => {
                    if !subject_ids.insert(wire.record.subject_id.clone()) {
                        violations.push(Violation::DuplicateId {
                            kind: "subject",
                            id: wire.record.subject_id.clone(),
                            line: line_no,
                        });
                        continue;
                    }
                    stash_extra(
                        &mut manifest.metadata,
                        "subject",
                        &wire.record.subject_id,
                        wire.extra,
                    );
                    manifest.subjects.push(wire.record);
                }
                ManifestLine::Image(wire) => {
                    if !image_ids.insert(wire.image_id.clone()) {
                        violations.push(Violation::DuplicateId {
                            kind: "image",
                            id: wire.image_id.clone(),
                            line: line_no,
                        });
                        continue;
                    }
                    stash_extra(&mut manifest.metadata, "image", &wire.image_id, wire.extra);
                    manifest.images.push(ImageRecord {
                        image_id: wire.image_id,
                        subject_id: wire.subject_id,
                        pose: wire.pose,
                        filter_id: (wire.filter_id != NO_FILTER).then_some(wire.filter_id),
                        uri: wire.uri,
                    });
                }
                ManifestLine::Filter(wire) => {
                    if !filter_ids.insert(wire.record.filter_id.clone()) {
                        violations.push(Violation::DuplicateId {
                            kind: "filter",
                            id: wire.record.filter_id.clone(),
                            line: line_no,
                        });
                        continue;
                    }
                    stash_extra(
                        &mut manifest.metadata,
                        "filter",
                        &wire.record.filter_id,
                        wire.extra,
                    );
                    manifest.filters.push(wire.record);
                }
                ManifestLine::Meta(map) => {
                    for (k, v) in map {
                        manifest.metadata.insert(k, value_to_string(&v));
                    }
                }
            }
        }

        // Referential checks run over whatever parsed cleanly so one bad
        // line does not mask unrelated problems.
        for image in &manifest.images {
            if !subject_ids.contains(&image.subject_id) {
                violations.push(Violation::DanglingSubject {
                    image_id: image.image_id.clone(),
                    subject_id: image.subject_id.clone(),
                });
            }
            if let Some(filter_id) = &image.filter_id {
                if !filter_ids.contains(filter_id) {
                    violations.push(Violation::DanglingFilter {
                        image_id: image.image_id.clone(),
                        filter_id: filter_id.clone(),
                    });
                }
                if image.pose != NEUTRAL_FRONT {
                    violations.push(Violation::FilteredImageBadPose {
                        image_id: image.image_id.clone(),
                        pose: image.pose.clone(),
                    });
                }
            }
        }

        if violations.is_empty() {
            Ok(manifest)
        } else {
            Err(DatasetError::Invalid { violations })
        }
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.subjects {
            let line = ManifestLine::Subject(SubjectWire {
                record: s.clone(),
                extra: BTreeMap::new(),
            });
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        for f in &self.filters {
            let line = ManifestLine::Filter(FilterWire {
                record: f.clone(),
                extra: BTreeMap::new(),
            });
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        for i in &self.images {
            let line = ManifestLine::Image(ImageWire {
                image_id: i.image_id.clone(),
                subject_id: i.subject_id.clone(),
                pose: i.pose.clone(),
                filter_id: i.filter_id.clone().unwrap_or_else(|| NO_FILTER.to_string()),
                uri: i.uri.clone(),
                extra: BTreeMap::new(),
            });
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        if !self.metadata.is_empty() {
            let map: BTreeMap<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            writeln!(w, "{}", serde_json::to_string(&ManifestLine::Meta(map))?)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.to_writer(&mut out).expect("in-memory write");
        String::from_utf8(out).expect("JSON is UTF-8")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut file = fs::File::create(path)?;
        self.to_writer(&mut file)?;
        Ok(())
    }
}

fn stash_extra(
    metadata: &mut BTreeMap<String, String>,
    kind: &str,
    id: &str,
    extra: BTreeMap<String, Value>,
) {
    for (k, v) in extra {
        metadata.insert(format!("{kind}.{id}.{k}"), value_to_string(&v));
    }
}

/// Loads and fully validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = fs::File::open(path)?;
    DatasetManifest::from_reader(file)
}

// ---------------------------------------------------------------------------
// Train/test splitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratify_by_subject: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            stratify_by_subject: true,
        }
    }
}

/// A disjoint, exhaustive partition of a manifest's image ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fraction: f64,
}

impl Split {
    pub fn load(path: &Path) -> Result<Split, DatasetError> {
        let file = fs::File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| DatasetError::Invalid {
            violations: vec![Violation::Parse {
                line: 0,
                message: format!("split file: {e}"),
            }],
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self).map_err(std::io::Error::from)?;
        Ok(())
    }
}

/// Deterministic train/test partition.
///
/// Stratified mode splits each subject's images independently so every
/// subject lands in both halves; per-subject train counts are
/// `round(train_fraction * n)` clamped to keep both shares nonempty.
/// Identical `(manifest, spec)` inputs always produce identical splits.
pub fn split_train_test(
    manifest: &DatasetManifest,
    spec: &SplitSpec,
) -> Result<Split, DatasetError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(spec.train_fraction));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();

    if spec.stratify_by_subject {
        let mut subject_ids: Vec<&str> = manifest
            .subjects
            .iter()
            .map(|s| s.subject_id.as_str())
            .collect();
        subject_ids.sort_unstable();
        for subject_id in subject_ids {
            let mut ids: Vec<&str> = manifest
                .images_of_subject(subject_id)
                .map(|i| i.image_id.as_str())
                .collect();
            if ids.len() < 2 {
                return Err(DatasetError::SubjectTooSmall {
                    subject_id: subject_id.to_string(),
                    count: ids.len(),
                });
            }
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            let n_train = subset_size(spec.train_fraction, ids.len());
            train.extend(ids[..n_train].iter().map(|s| s.to_string()));
            test.extend(ids[n_train..].iter().map(|s| s.to_string()));
        }
    } else {
        let mut ids: Vec<&str> = manifest
            .images
            .iter()
            .map(|i| i.image_id.as_str())
            .collect();
        if ids.len() < 2 {
            return Err(DatasetError::TooFewImages);
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n_train = subset_size(spec.train_fraction, ids.len());
        train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        test.extend(ids[n_train..].iter().map(|s| s.to_string()));
    }

    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        train,
        test,
        seed: spec.seed,
        fraction: spec.train_fraction,
    })
}

fn subset_size(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64).round() as usize;
    raw.clamp(1, n - 1)
}

// ---------------------------------------------------------------------------
// Baseline/filtered pairing
// ---------------------------------------------------------------------------

/// A baseline image matched with one filtered derivative of the same
/// subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePair {
    pub baseline_image_id: String,
    pub filtered_image_id: String,
    pub filter_id: String,
}

/// One pair per (subject, filter) with an existing filtered image; the
/// baseline is the subject's unique unfiltered `neutral_front` image.
///
/// Output is ordered by subject id, then by each subject's filtered
/// images in manifest order.
pub fn pair_baseline_filtered(
    manifest: &DatasetManifest,
) -> Result<Vec<BaselinePair>, DatasetError> {
    let mut subject_ids: Vec<&str> = manifest
        .subjects
        .iter()
        .map(|s| s.subject_id.as_str())
        .collect();
    subject_ids.sort_unstable();

    let mut pairs = Vec::new();
    for subject_id in subject_ids {
        let baselines: Vec<&ImageRecord> = manifest
            .images_of_subject(subject_id)
            .filter(|i| !i.is_filtered() && i.pose == NEUTRAL_FRONT)
            .collect();
        let baseline = match baselines.len() {
            0 => {
                return Err(DatasetError::MissingBaseline {
                    subject_id: subject_id.to_string(),
                })
            }
            1 => baselines[0],
            n => {
                return Err(DatasetError::MultipleBaselines {
                    subject_id: subject_id.to_string(),
                    count: n,
                })
            }
        };
        for image in manifest.images_of_subject(subject_id) {
            if let Some(filter_id) = &image.filter_id {
                pairs.push(BaselinePair {
                    baseline_image_id: baseline.image_id.clone(),
                    filtered_image_id: image.image_id.clone(),
                    filter_id: filter_id.clone(),
                });
            }
        }
    }
    Ok(pairs)
}
