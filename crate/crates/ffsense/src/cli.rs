//! The `ffsense` command pipeline:
//! validate -> split -> train -> predict -> analyze -> report.
//!
//! Commands are single-process and idempotent for fixed inputs and
//! seeds. Exit codes are a stable contract: 0 success, 1 domain error
//! (bad data, violated invariants), 2 I/O error (unreadable or
//! unwritable paths). Errors are reported on stderr, never panicked
//! across the boundary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    load_manifest, pair_baseline_filtered, split_train_test, DatasetError, DatasetManifest, Split,
    SplitSpec, NO_FILTER,
};
use crate::metrics::{
    age_deviation, classification_report, filter_distortion, misprediction_tables,
    regression_report, AgeSample, AttributeTask, Averaging, ClassificationReport,
    FilterDistortionReport, MispredictionTable, RegressionReport, GENDER_CLASSES,
};
use crate::nets::{
    load_checkpoint, save_checkpoint, HeadKind, IdentityDistribution, InferenceEngine, InputSpec,
};
use crate::report::{
    render_confusion_grid, render_table, usability_report, FilterNames, RenderTable, TableFormat,
};
use crate::train::{
    load_images, precompute_features, train_attribute_finetune, train_attribute_head,
    train_identity, AttributeLabels, ConfigFile, LossKind, TrainConfig, TrainError,
};

/// One prediction-dump line: everything downstream analysis needs to
/// know about one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDumpRecord {
    pub image_id: String,
    pub subject_id: String,
    /// Filter id or `"none"` for unfiltered images.
    pub filter_id: String,
    pub identity_probs: Vec<f64>,
    /// Argmax class label; ties break toward the lowest class index.
    pub predicted_identity: String,
    pub age_pred: f64,
    /// male, female.
    pub gender_probs: Vec<f64>,
    /// east_asian, west_asian, black, white.
    pub ethnicity_probs: Vec<f64>,
}

/// Failed per-image prediction, recorded in place in the dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionErrorRecord {
    pub image_id: String,
    pub error: String,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad data or violated invariants: exit 1.
    Domain(String),
    /// Unreadable/unwritable paths: exit 2.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Domain(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Domain(m) | CliError::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<crate::nets::NetError> for CliError {
    fn from(e: crate::nets::NetError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<crate::nets::checkpoint::CheckpointError> for CliError {
    fn from(e: crate::nets::checkpoint::CheckpointError) -> Self {
        match e {
            crate::nets::checkpoint::CheckpointError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Domain(other.to_string()),
        }
    }
}

impl From<crate::metrics::MetricsError> for CliError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<crate::report::ReportError> for CliError {
    fn from(e: crate::report::ReportError) -> Self {
        CliError::Domain(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ffsense",
    about = "Filter-resistant face recognition and filter-impact analysis pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Check a manifest against every structural invariant.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Produce a reproducible train/test split file.
    Split(SplitArgs),
    /// Train the recognizer and the three attribute heads.
    Train(TrainArgs),
    /// Run all models over images, producing a JSONL prediction dump.
    Predict(PredictArgs),
    /// Compute every metric report from a prediction dump.
    Analyze(AnalyzeArgs),
    /// Render analysis JSON into markdown/CSV/text report files.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output split JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Split each subject's images separately so every identity
    /// appears in both halves.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub stratify: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Flat key=value training config.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, reports, and feature cache.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Directory holding identity.ckpt, age.ckpt, gender.ckpt,
    /// ethnicity.ckpt.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split file selecting images (see --subset).
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which images of --split to predict: test, train, all, or
    /// test+baselines (test plus the baseline images its filtered
    /// records compare against).
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Explicit newline-separated image-id list (overrides --split).
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Prediction dump (JSONL).
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for metric report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Breaking-distortion threshold.
    #[arg(long, default_value_t = crate::metrics::DEFAULT_BREAKING_THRESHOLD)]
    pub threshold: f64,
    /// When given, global identity/attribute reports cover only dump
    /// records in this split's test list (per-filter analyses always
    /// use every baseline/filtered pair in the dump).
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory produced by `ffsense analyze`.
    #[arg(long)]
    pub analysis: PathBuf,
    /// Output directory for rendered reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Restrict table rendering to one format (markdown or csv);
    /// default renders both.
    #[arg(long)]
    pub format: Option<String>,
}

/// Runs a parsed command, printing diagnostics; returns the process
/// exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Validate { manifest } => cmd_validate(&manifest),
        Command::Split(args) => cmd_split(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// validate / split
// ---------------------------------------------------------------------------

fn cmd_validate(manifest_path: &Path) -> Result<i32, CliError> {
    match load_manifest(manifest_path) {
        Ok(manifest) => {
            println!("OK: {}", manifest.summary());
            Ok(0)
        }
        Err(DatasetError::Io(e)) => Err(CliError::Io(e.to_string())),
        Err(DatasetError::Invalid { violations }) => {
            for v in &violations {
                eprintln!("violation: {v}");
            }
            eprintln!("{} violation(s) found", violations.len());
            Ok(1)
        }
        Err(other) => Err(CliError::Domain(other.to_string())),
    }
}

fn cmd_split(args: &SplitArgs) -> Result<i32, CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let spec = SplitSpec {
        train_fraction: args.fraction,
        seed: args.seed,
        stratify_by_subject: args.stratify,
    };
    let split = split_train_test(&manifest, &spec)?;
    split.save(&args.out)?;
    println!(
        "split: {} train / {} test images (seed {}, fraction {})",
        split.train.len(),
        split.test.len(),
        split.seed,
        split.fraction
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn feature_cache_dir(out_dir: &Path) -> PathBuf {
    std::env::var_os("FFSENSE_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out_dir.join("feature_cache"))
}

fn cmd_train(args: &TrainArgs) -> Result<i32, CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let split = Split::load(&args.split)?;
    let config = ConfigFile::load(&args.config)?;
    let base_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&args.out)?;

    let spec = config.arch.identity_spec(manifest.identity_class_count())?;
    let fingerprint = config.fingerprint();

    // Identity network trains end-to-end with cross-entropy; the
    // config's loss key selects the age head's regression loss.
    let identity_cfg = TrainConfig {
        loss: LossKind::CrossEntropy,
        ..config.train.clone()
    };
    let warm_start = config
        .init_from
        .as_ref()
        .map(|path| load_checkpoint(Path::new(path)))
        .transpose()?;
    let (identity_ckpt, identity_report) = train_identity(
        &manifest,
        &split,
        &spec,
        &identity_cfg,
        &base_dir,
        fingerprint.clone(),
        warm_start.as_ref(),
    )?;
    save_checkpoint(&identity_ckpt, &args.out.join("identity.ckpt"))?;
    identity_report.save(&args.out.join("identity_train_report.json"))?;
    println!(
        "identity: train accuracy {:.4}, test accuracy {}",
        identity_report.final_train_metric,
        identity_report
            .final_test_metric
            .map_or("n/a".to_string(), |m| format!("{m:.4}")),
    );

    let age_cfg = TrainConfig {
        loss: match config.train.loss {
            LossKind::Mae => LossKind::Mae,
            _ => LossKind::Mse,
        },
        ..config.train.clone()
    };
    let class_cfg = identity_cfg.clone();
    let hidden = config.arch.attr_hidden_or_default();

    let head_specs = [
        ("age", HeadKind::AgeRegression, &age_cfg),
        ("gender", HeadKind::GenderSoftmax, &class_cfg),
        ("ethnicity", HeadKind::EthnicitySoftmax, &class_cfg),
    ];

    if config.train.freeze_extractor {
        let cache = feature_cache_dir(&args.out);
        let train_features = precompute_features(
            &identity_ckpt,
            &manifest,
            &split.train,
            &base_dir,
            Some(&cache),
        )?;
        let test_features = precompute_features(
            &identity_ckpt,
            &manifest,
            &split.test,
            &base_dir,
            Some(&cache),
        )?;
        for (name, kind, cfg) in head_specs {
            let labels = AttributeLabels::from_manifest(&manifest, &split.train, &kind)?;
            let eval_labels = AttributeLabels::from_manifest(&manifest, &split.test, &kind)?;
            let (ckpt, report) = train_attribute_head(
                &train_features,
                &labels,
                hidden.clone(),
                cfg,
                Some((&test_features, &eval_labels)),
                fingerprint.clone(),
            )?;
            save_checkpoint(&ckpt, &args.out.join(format!("{name}.ckpt")))?;
            report.save(&args.out.join(format!("{name}_train_report.json")))?;
            println!(
                "{name}: train {} {:.4}",
                report.metric_name, report.final_train_metric
            );
        }
    } else {
        for (name, kind, cfg) in head_specs {
            let labels = AttributeLabels::from_manifest(&manifest, &split.train, &kind)?;
            let (ckpt, report) = train_attribute_finetune(
                &identity_ckpt,
                &manifest,
                &labels,
                hidden.clone(),
                cfg,
                &base_dir,
                fingerprint.clone(),
            )?;
            save_checkpoint(&ckpt, &args.out.join(format!("{name}.ckpt")))?;
            report.save(&args.out.join(format!("{name}_train_report.json")))?;
            println!(
                "{name} (fine-tuned): train {} {:.4}",
                report.metric_name, report.final_train_metric
            );
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct HeadRunner {
    engine: InferenceEngine,
    takes_images: bool,
}

impl HeadRunner {
    fn load(path: &Path) -> Result<HeadRunner, CliError> {
        let ckpt = load_checkpoint(path)?;
        let takes_images = matches!(ckpt.spec.input, InputSpec::Image { .. });
        Ok(HeadRunner {
            engine: InferenceEngine::compile(&ckpt)?,
            takes_images,
        })
    }
}

fn target_ids(args: &PredictArgs, manifest: &DatasetManifest) -> Result<Vec<String>, CliError> {
    if let Some(ids_path) = &args.ids {
        let text = fs::read_to_string(ids_path)?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect());
    }
    let split_path = args
        .split
        .as_ref()
        .ok_or_else(|| CliError::Domain("predict needs either --ids or --split".to_string()))?;
    let split = Split::load(split_path)?;
    let mut ids = match args.subset.as_str() {
        "test" => split.test,
        "train" => split.train,
        "all" => {
            let mut ids = split.train;
            ids.extend(split.test);
            ids.sort_unstable();
            ids
        }
        "test+baselines" => split.test,
        other => {
            return Err(CliError::Domain(format!(
                "unknown --subset {other:?}; expected test, train, all, or test+baselines"
            )))
        }
    };
    if args.subset == "test+baselines" {
        // append each filtered record's baseline when it is not already
        // included
        let pairs = pair_baseline_filtered(manifest)?;
        let have: std::collections::BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        let mut extra: Vec<String> = pairs
            .iter()
            .filter(|p| have.contains(p.filtered_image_id.as_str()))
            .map(|p| p.baseline_image_id.clone())
            .filter(|b| !have.contains(b.as_str()))
            .collect();
        extra.sort_unstable();
        extra.dedup();
        ids.extend(extra);
    }
    Ok(ids)
}

fn cmd_predict(args: &PredictArgs) -> Result<i32, CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let base_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let identity_ckpt = load_checkpoint(&args.checkpoints.join("identity.ckpt"))?;
    let identity = InferenceEngine::compile(&identity_ckpt)?;
    let age = HeadRunner::load(&args.checkpoints.join("age.ckpt"))?;
    let gender = HeadRunner::load(&args.checkpoints.join("gender.ckpt"))?;
    let ethnicity = HeadRunner::load(&args.checkpoints.join("ethnicity.ckpt"))?;
    let labels = identity_ckpt.labels.clone();

    let ids = target_ids(args, &manifest)?;
    let mut out = fs::File::create(&args.out)?;
    if ids.is_empty() {
        return Ok(0);
    }

    let process_one = |id: &String| -> Result<PredictionDumpRecord, PredictionErrorRecord> {
        let fail = |msg: String| PredictionErrorRecord {
            image_id: id.clone(),
            error: msg,
        };
        let record = manifest
            .image(id)
            .ok_or_else(|| fail("not in manifest".to_string()))?;
        let (h, w, _) = identity_ckpt
            .spec
            .input_image_shape()
            .ok_or_else(|| fail("identity checkpoint takes features".to_string()))?;
        let images = load_images(&manifest, &base_dir, std::slice::from_ref(id), (h, w))
            .map_err(|e| fail(e.to_string()))?;
        let image = &images[id];

        let dist = identity
            .predict_identity(image)
            .map_err(|e| fail(e.to_string()))?;
        let argmax = dist.argmax();
        let predicted_identity = labels
            .get(argmax)
            .cloned()
            .ok_or_else(|| fail("identity checkpoint has no class labels".to_string()))?;

        let features = identity
            .extract_features(image)
            .map_err(|e| fail(e.to_string()))?;
        let head_output = |runner: &HeadRunner| -> Result<Vec<f64>, PredictionErrorRecord> {
            if runner.takes_images {
                let (hh, hw, _) = runner
                    .engine
                    .spec
                    .input_image_shape()
                    .expect("image head has an image input");
                let resized = image.resize(hh, hw);
                runner
                    .engine
                    .logits(&resized)
                    .map_err(|e| fail(e.to_string()))
            } else {
                runner
                    .engine
                    .run_on_features(&features)
                    .map_err(|e| fail(e.to_string()))
            }
        };

        let age_raw = head_output(&age)?[0];
        let gender_logits = head_output(&gender)?;
        let ethnicity_logits = head_output(&ethnicity)?;
        Ok(PredictionDumpRecord {
            image_id: id.clone(),
            subject_id: record.subject_id.clone(),
            filter_id: record
                .filter_id
                .clone()
                .unwrap_or_else(|| NO_FILTER.to_string()),
            identity_probs: dist.probs().to_vec(),
            predicted_identity,
            age_pred: age_raw.clamp(crate::nets::AGE_CLAMP.0, crate::nets::AGE_CLAMP.1),
            gender_probs: crate::nets::softmax_f64(&gender_logits),
            ethnicity_probs: crate::nets::softmax_f64(&ethnicity_logits),
        })
    };

    let results: Vec<Result<PredictionDumpRecord, PredictionErrorRecord>> =
        ids.par_iter().map(process_one).collect();

    let mut failures = 0usize;
    for result in &results {
        match result {
            Ok(record) => writeln!(
                out,
                "{}",
                serde_json::to_string(record).map_err(std::io::Error::from)?
            )?,
            Err(err) => {
                failures += 1;
                writeln!(
                    out,
                    "{}",
                    serde_json::to_string(err).map_err(std::io::Error::from)?
                )?
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} image(s) failed; error records written in place");
        return Ok(1);
    }
    println!("predicted {} images", results.len());
    Ok(0)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

/// File names written by `analyze` and consumed by `report`.
pub const ANALYSIS_FILES: [&str; 9] = [
    "identity_classification.json",
    "gender_classification.json",
    "ethnicity_classification.json",
    "age_regression.json",
    "distortion.json",
    "age_deviation.json",
    "gender_mispredictions.json",
    "ethnicity_mispredictions.json",
    "filters.json",
];

#[derive(Serialize, Deserialize)]
struct FilterNameEntry {
    filter_id: String,
    display_name: String,
}

fn read_dump(path: &Path) -> Result<Vec<PredictionDumpRecord>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(err) = serde_json::from_str::<PredictionErrorRecord>(line) {
            return Err(CliError::Domain(format!(
                "dump contains an error record for image \"{}\": {}",
                err.image_id, err.error
            )));
        }
        let record: PredictionDumpRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Domain(format!("dump line {}: {e}", idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32, CliError> {
    let manifest = load_manifest(&args.manifest)?;
    let records = read_dump(&args.dump)?;
    if records.is_empty() {
        return Err(CliError::Domain("prediction dump is empty".to_string()));
    }
    fs::create_dir_all(&args.out)?;

    let class_labels = manifest.identity_classes();
    let by_image: BTreeMap<&str, &PredictionDumpRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();

    // Structural validation of every record.
    for record in &records {
        let image = manifest.image(&record.image_id).ok_or_else(|| {
            CliError::Domain(format!(
                "dump image \"{}\" is not in the manifest",
                record.image_id
            ))
        })?;
        if image.subject_id != record.subject_id {
            return Err(CliError::Domain(format!(
                "dump image \"{}\" claims subject \"{}\", manifest says \"{}\"",
                record.image_id, record.subject_id, image.subject_id
            )));
        }
        let manifest_filter = image.filter_id.as_deref().unwrap_or(NO_FILTER);
        if record.filter_id != manifest_filter {
            return Err(CliError::Domain(format!(
                "dump image \"{}\" claims filter \"{}\", manifest says \"{manifest_filter}\"",
                record.image_id, record.filter_id
            )));
        }
        let dist = IdentityDistribution::new(record.identity_probs.clone())
            .map_err(|e| CliError::Domain(format!("dump image \"{}\": {e}", record.image_id)))?;
        if dist.len() != class_labels.len() {
            return Err(CliError::Domain(format!(
                "dump image \"{}\": identity vector has {} entries, manifest has {} subjects",
                record.image_id,
                dist.len(),
                class_labels.len()
            )));
        }
        let expected = &class_labels[dist.argmax()];
        if &record.predicted_identity != expected {
            return Err(CliError::Domain(format!(
                "dump image \"{}\": predicted_identity \"{}\" is not the argmax class \"{expected}\"",
                record.image_id, record.predicted_identity
            )));
        }
    }

    // Scope for the global reports: the test split when provided.
    let scope: Vec<&PredictionDumpRecord> = match &args.split {
        Some(split_path) => {
            let split = Split::load(split_path)?;
            let test: std::collections::BTreeSet<&str> =
                split.test.iter().map(|s| s.as_str()).collect();
            records
                .iter()
                .filter(|r| test.contains(r.image_id.as_str()))
                .collect()
        }
        None => records.iter().collect(),
    };
    if scope.is_empty() {
        return Err(CliError::Domain(
            "no dump records fall inside the requested split scope".to_string(),
        ));
    }

    let subject_of =
        |r: &PredictionDumpRecord| manifest.subject(&r.subject_id).expect("validated above");

    // Global classification / regression reports.
    let identity_actual: Vec<&str> = scope.iter().map(|r| r.subject_id.as_str()).collect();
    let identity_predicted: Vec<&str> = scope
        .iter()
        .map(|r| r.predicted_identity.as_str())
        .collect();
    let identity_report =
        classification_report(&identity_actual, &identity_predicted, Averaging::Macro)?;

    let gender_actual: Vec<&str> = scope.iter().map(|r| subject_of(r).gender.label()).collect();
    let gender_predicted: Vec<&str> = scope
        .iter()
        .map(|r| GENDER_CLASSES[argmax(&r.gender_probs)])
        .collect();
    let gender_report = classification_report(&gender_actual, &gender_predicted, Averaging::Macro)?;

    let ethnicity_actual: Vec<&str> = scope
        .iter()
        .map(|r| subject_of(r).ethnicity.label())
        .collect();
    let ethnicity_predicted: Vec<&str> = scope
        .iter()
        .map(|r| crate::dataset::Ethnicity::CLASS_ORDER[argmax(&r.ethnicity_probs)].label())
        .collect();
    let ethnicity_report =
        classification_report(&ethnicity_actual, &ethnicity_predicted, Averaging::Macro)?;

    let ages_actual: Vec<f64> = scope.iter().map(|r| subject_of(r).age as f64).collect();
    let ages_predicted: Vec<f64> = scope.iter().map(|r| r.age_pred).collect();
    let age_report = regression_report(&ages_actual, &ages_predicted)?;

    // Per-filter analyses over every baseline/filtered pair in the dump.
    let filter_order: Vec<&str> = manifest
        .filters
        .iter()
        .map(|f| f.filter_id.as_str())
        .filter(|fid| records.iter().any(|r| &r.filter_id == fid))
        .collect();

    let pairs = pair_baseline_filtered(&manifest)?;
    let mut distortion_pairs: Vec<(&[f64], &[f64], &str)> = Vec::new();
    for fid in &filter_order {
        for pair in pairs.iter().filter(|p| p.filter_id == *fid) {
            let Some(filtered) = by_image.get(pair.filtered_image_id.as_str()) else {
                continue;
            };
            let baseline = by_image.get(pair.baseline_image_id.as_str()).ok_or_else(|| {
                CliError::Domain(format!(
                    "dump is missing the baseline image for subject \"{}\" (needed by filtered image \"{}\")",
                    filtered.subject_id, pair.filtered_image_id
                ))
            })?;
            distortion_pairs.push((
                baseline.identity_probs.as_slice(),
                filtered.identity_probs.as_slice(),
                pair.filter_id.as_str(),
            ));
        }
    }
    if distortion_pairs.is_empty() {
        return Err(CliError::Domain(
            "dump contains no baseline/filtered pairs to analyze".to_string(),
        ));
    }
    let distortion = filter_distortion(&distortion_pairs, args.threshold)?;

    let filtered_records = |fid: &str| -> Vec<&PredictionDumpRecord> {
        records.iter().filter(|r| r.filter_id == fid).collect()
    };

    let mut age_samples = Vec::new();
    for fid in &filter_order {
        for r in filtered_records(fid) {
            age_samples.push(AgeSample {
                actual: subject_of(r).age as f64,
                predicted: r.age_pred,
                filter_id: r.filter_id.clone(),
            });
        }
    }
    let age_dev = age_deviation(&age_samples)?;

    let mut gender_per_filter = Vec::new();
    let mut ethnicity_per_filter = Vec::new();
    for fid in &filter_order {
        let rows = filtered_records(fid);
        let actual_g: Vec<String> = rows
            .iter()
            .map(|r| subject_of(r).gender.label().to_string())
            .collect();
        let pred_g: Vec<String> = rows
            .iter()
            .map(|r| GENDER_CLASSES[argmax(&r.gender_probs)].to_string())
            .collect();
        gender_per_filter.push((fid.to_string(), actual_g, pred_g));

        let actual_e: Vec<String> = rows
            .iter()
            .map(|r| subject_of(r).ethnicity.label().to_string())
            .collect();
        let pred_e: Vec<String> = rows
            .iter()
            .map(|r| {
                crate::dataset::Ethnicity::CLASS_ORDER[argmax(&r.ethnicity_probs)]
                    .label()
                    .to_string()
            })
            .collect();
        ethnicity_per_filter.push((fid.to_string(), actual_e, pred_e));
    }
    let gender_table = misprediction_tables(&gender_per_filter, AttributeTask::Gender)?;
    let ethnicity_table = misprediction_tables(&ethnicity_per_filter, AttributeTask::Ethnicity)?;

    let filter_names: Vec<FilterNameEntry> = filter_order
        .iter()
        .map(|fid| FilterNameEntry {
            filter_id: fid.to_string(),
            display_name: manifest
                .filter(fid)
                .map_or(fid.to_string(), |f| f.display_name.clone()),
        })
        .collect();

    write_json(
        &args.out.join("identity_classification.json"),
        &identity_report,
    )?;
    write_json(&args.out.join("gender_classification.json"), &gender_report)?;
    write_json(
        &args.out.join("ethnicity_classification.json"),
        &ethnicity_report,
    )?;
    write_json(&args.out.join("age_regression.json"), &age_report)?;
    write_json(&args.out.join("distortion.json"), &distortion)?;
    write_json(&args.out.join("age_deviation.json"), &age_dev)?;
    write_json(&args.out.join("gender_mispredictions.json"), &gender_table)?;
    write_json(
        &args.out.join("ethnicity_mispredictions.json"),
        &ethnicity_table,
    )?;
    write_json(&args.out.join("filters.json"), &filter_names)?;

    println!(
        "analyzed {} records ({} pairs); breaking filters: {:?}",
        records.len(),
        distortion_pairs.len(),
        distortion.breaking_filters()
    );
    Ok(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(std::io::Error::from)?;
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Fixed names of the rendered report files.
pub const REPORT_FILES: [&str; 11] = [
    "distortion.md",
    "distortion.csv",
    "age_deviation.md",
    "age_deviation.csv",
    "gender_mispredictions.md",
    "gender_mispredictions.csv",
    "ethnicity_mispredictions.md",
    "ethnicity_mispredictions.csv",
    "confusion_gender.txt",
    "confusion_ethnicity.txt",
    "usability.md",
];

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn cmd_report(args: &ReportArgs) -> Result<i32, CliError> {
    let missing: Vec<&str> = ANALYSIS_FILES
        .iter()
        .filter(|name| !args.analysis.join(name).exists())
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Domain(format!(
            "analysis directory is missing: {}",
            missing.join(", ")
        )));
    }

    let formats: Vec<TableFormat> = match args.format.as_deref() {
        None => vec![TableFormat::Markdown, TableFormat::Csv],
        Some("markdown") => vec![TableFormat::Markdown],
        Some("csv") => vec![TableFormat::Csv],
        Some(other) => {
            return Err(CliError::Domain(format!(
                "unknown --format {other:?}; expected markdown or csv"
            )))
        }
    };

    let distortion: FilterDistortionReport = read_json(&args.analysis.join("distortion.json"))?;
    let age_dev: crate::metrics::AgeDeviationReport =
        read_json(&args.analysis.join("age_deviation.json"))?;
    let gender: MispredictionTable = read_json(&args.analysis.join("gender_mispredictions.json"))?;
    let ethnicity: MispredictionTable =
        read_json(&args.analysis.join("ethnicity_mispredictions.json"))?;
    let _identity: ClassificationReport =
        read_json(&args.analysis.join("identity_classification.json"))?;
    let _age: RegressionReport = read_json(&args.analysis.join("age_regression.json"))?;
    let name_entries: Vec<FilterNameEntry> = read_json(&args.analysis.join("filters.json"))?;
    let names = FilterNames(
        name_entries
            .into_iter()
            .map(|e| (e.filter_id, e.display_name))
            .collect(),
    );

    fs::create_dir_all(&args.out)?;
    let write_tables = |base: &str, report: &dyn RenderTable| -> Result<(), CliError> {
        for format in &formats {
            let (ext, text) = match format {
                TableFormat::Markdown => ("md", render_dyn(report, &names, TableFormat::Markdown)),
                TableFormat::Csv => ("csv", render_dyn(report, &names, TableFormat::Csv)),
            };
            fs::write(args.out.join(format!("{base}.{ext}")), text)?;
        }
        Ok(())
    };
    write_tables("distortion", &distortion)?;
    write_tables("age_deviation", &age_dev)?;
    write_tables("gender_mispredictions", &gender)?;
    write_tables("ethnicity_mispredictions", &ethnicity)?;

    let gender_grid: Vec<(String, &crate::metrics::ConfusionMatrix)> = gender
        .rows
        .iter()
        .map(|r| (names.name(&r.filter_id).to_string(), &r.confusion))
        .collect();
    fs::write(
        args.out.join("confusion_gender.txt"),
        render_confusion_grid(&gender_grid)?,
    )?;
    let ethnicity_grid: Vec<(String, &crate::metrics::ConfusionMatrix)> = ethnicity
        .rows
        .iter()
        .map(|r| (names.name(&r.filter_id).to_string(), &r.confusion))
        .collect();
    fs::write(
        args.out.join("confusion_ethnicity.txt"),
        render_confusion_grid(&ethnicity_grid)?,
    )?;

    let (_verdicts, usability_doc) =
        usability_report(&distortion, &age_dev, &gender, &ethnicity, &names)?;
    fs::write(args.out.join("usability.md"), usability_doc)?;

    println!("wrote reports to {}", args.out.display());
    Ok(0)
}

fn render_dyn(report: &dyn RenderTable, names: &FilterNames, format: TableFormat) -> String {
    // render_table is generic; this thin shim keeps the dyn call site tidy
    struct Shim<'a>(&'a dyn RenderTable);
    impl RenderTable for Shim<'_> {
        fn table(&self, names: &FilterNames) -> crate::report::Table {
            self.0.table(names)
        }
    }
    render_table(&Shim(report), names, format)
}
