//! Acceptance suite: every release criterion, run in order, one
//! PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture`.
//! The criteria cover metric-oracle equivalence, the normalized-
//! distance unit suite, reproduction of the published per-filter
//! tables from shipped fixtures, full-size model shape/normalization,
//! gradient checking, overfit smoke training, and two-run bitwise
//! pipeline closure. The extended real-dataset targets (identity
//! accuracy >= 0.85, age MAE <= 2.5, gender >= 0.95, ethnicity >= 0.80)
//! need the real image corpus and GPU-scale training and are reported
//! as SKIP.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ffsense::cli::PredictionDumpRecord;
use ffsense::dataset::{load_manifest, Split};
use ffsense::metrics::{
    age_deviation, classification_report, confusion, l2_normalize, misprediction_tables,
    pair_distance, regression_report, AgeSample, AttributeTask, Averaging,
};
use ffsense::nets::checkpoint::TrainingFingerprint;
use ffsense::nets::graph::Network;
use ffsense::nets::layers::{cross_entropy_loss, Mode};
use ffsense::nets::{
    build_facefilternet, build_tiny_recognizer, Checkpoint, ImageTensor, InferenceEngine,
};
use ffsense::synthetic::{write_synthetic_dataset, SynthSpec, FILTER_TARGETS};
use ffsense::train::{train_identity, LossKind, OptimizerKind, TrainConfig};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

type CriterionResult = Result<String, String>;

#[test]
fn acceptance() {
    let criteria: Vec<(&str, fn() -> CriterionResult)> = vec![
        ("1 metric oracle equivalence", criterion_1_metric_oracles),
        (
            "2 normalized-distance unit suite",
            criterion_2_distance_suite,
        ),
        (
            "3 distortion table reproduction",
            criterion_3_distortion_table,
        ),
        ("4 age deviation table reproduction", criterion_4_age_table),
        (
            "5 misprediction tables reproduction",
            criterion_5_misprediction_tables,
        ),
        ("6 model shape and normalization", criterion_6_model_shape),
        ("7 gradient check", criterion_7_gradient_check),
        ("8 overfit smoke training", criterion_8_overfit),
        ("9 pipeline closure", criterion_9_pipeline_closure),
    ];

    let mut failed = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        match run() {
            Ok(detail) => {
                println!(
                    "PASS criterion {name} [{:.1}s] {detail}",
                    start.elapsed().as_secs_f64()
                );
            }
            Err(reason) => {
                println!(
                    "FAIL criterion {name} [{:.1}s] {reason}",
                    start.elapsed().as_secs_f64()
                );
                failed.push(name);
            }
        }
    }
    println!(
        "SKIP criterion 10 extended real-dataset targets: needs the real face corpus and \
         full-scale training; not part of the desk-scale gate"
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b} (tol {tol})"))
    }
}

fn rel_close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    let scale = a.abs().max(b.abs()).max(1.0);
    if (a - b).abs() <= tol * scale {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b} (rel tol {tol})"))
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: metric operations match brute-force oracles
// ---------------------------------------------------------------------------

mod oracle {
    //! Deliberately naive re-implementations, kept structurally apart
    //! from the library code they check.
    use std::collections::BTreeMap;

    pub struct ClassStats {
        pub precision: f64,
        pub recall: f64,
        pub f1: f64,
        pub support: usize,
    }

    pub fn classification(
        actual: &[&str],
        predicted: &[&str],
        weighted: bool,
    ) -> (f64, f64, f64, f64, BTreeMap<String, ClassStats>) {
        let correct = actual.iter().zip(predicted).filter(|(a, p)| a == p).count();
        let accuracy = correct as f64 / actual.len() as f64;

        let mut classes: Vec<&str> = actual.iter().chain(predicted.iter()).copied().collect();
        classes.sort_unstable();
        classes.dedup();

        let mut per_class = BTreeMap::new();
        let mut sums = (0.0, 0.0, 0.0);
        for class in &classes {
            let tp = actual
                .iter()
                .zip(predicted.iter())
                .filter(|&(a, p)| a == class && p == class)
                .count() as f64;
            let predicted_as = predicted.iter().filter(|p| p == &class).count() as f64;
            let support = actual.iter().filter(|a| a == &class).count();
            let precision = if predicted_as == 0.0 {
                0.0
            } else {
                tp / predicted_as
            };
            let recall = if support == 0 {
                0.0
            } else {
                tp / support as f64
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            let weight = if weighted {
                support as f64 / actual.len() as f64
            } else {
                1.0 / classes.len() as f64
            };
            sums.0 += precision * weight;
            sums.1 += recall * weight;
            sums.2 += f1 * weight;
            per_class.insert(
                class.to_string(),
                ClassStats {
                    precision,
                    recall,
                    f1,
                    support,
                },
            );
        }
        (accuracy, sums.0, sums.1, sums.2, per_class)
    }

    pub fn regression(actual: &[f64], predicted: &[f64]) -> (f64, f64, f64) {
        let n = actual.len() as f64;
        let mean: f64 = actual.iter().sum::<f64>() / n;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for (a, p) in actual.iter().zip(predicted) {
            ss_res += (a - p) * (a - p);
            ss_tot += (a - mean) * (a - mean);
            abs_sum += (a - p).abs();
            sq_sum += (a - p) * (a - p);
        }
        (1.0 - ss_res / ss_tot, abs_sum / n, sq_sum / n)
    }

    pub fn confusion(actual: &[&str], predicted: &[&str], classes: &[&str]) -> Vec<Vec<u64>> {
        let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
        for (a, p) in actual.iter().zip(predicted) {
            let i = classes.iter().position(|c| c == a).unwrap();
            let j = classes.iter().position(|c| c == p).unwrap();
            counts[i][j] += 1;
        }
        counts
    }

    /// Directed error counts straight from the label pairs, no
    /// confusion matrix in sight.
    pub fn directed_errors(actual: &[&str], predicted: &[&str], from: &str, to: &str) -> u64 {
        actual
            .iter()
            .zip(predicted.iter())
            .filter(|&(a, p)| *a == from && *p == to)
            .count() as u64
    }

    pub fn wrongly_predicted_as(actual: &[&str], predicted: &[&str], class: &str) -> u64 {
        actual
            .iter()
            .zip(predicted.iter())
            .filter(|&(a, p)| *p == class && *a != class)
            .count() as u64
    }
}

fn criterion_1_metric_oracles() -> CriterionResult {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(1001);
    let pool = ["ant", "bee", "cat", "dog", "eel"];

    for trial in 0..500 {
        let n = rng.random_range(1..30usize);
        let k = rng.random_range(2..=pool.len());
        let actual: Vec<&str> = (0..n).map(|_| pool[rng.random_range(0..k)]).collect();
        let predicted: Vec<&str> = (0..n).map(|_| pool[rng.random_range(0..k)]).collect();
        let weighted = trial % 2 == 1;
        let averaging = if weighted {
            Averaging::Weighted
        } else {
            Averaging::Macro
        };

        let got = classification_report(&actual, &predicted, averaging)
            .map_err(|e| format!("classification_report: {e}"))?;
        let (acc, precision, recall, f1, per_class) =
            oracle::classification(&actual, &predicted, weighted);
        rel_close(got.accuracy, acc, 1e-9, "accuracy")?;
        rel_close(got.precision, precision, 1e-9, "precision")?;
        rel_close(got.recall, recall, 1e-9, "recall")?;
        rel_close(got.f1, f1, 1e-9, "f1")?;
        check(
            got.per_class.len() == per_class.len(),
            "class count mismatch",
        )?;
        for (class, m) in &got.per_class {
            let o = &per_class[class];
            rel_close(m.precision, o.precision, 1e-9, "per-class precision")?;
            rel_close(m.recall, o.recall, 1e-9, "per-class recall")?;
            rel_close(m.f1, o.f1, 1e-9, "per-class f1")?;
            check(m.support == o.support, "support mismatch")?;
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(1002);
    for _ in 0..500 {
        let n = rng.random_range(2..30usize);
        let mut actual: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..80.0)).collect();
        actual[0] += 1.0; // guarantee variance
        let predicted: Vec<f64> = actual
            .iter()
            .map(|a| a + rng.random_range(-10.0..10.0))
            .collect();
        let got = regression_report(&actual, &predicted)
            .map_err(|e| format!("regression_report: {e}"))?;
        let (r2, mae, mse) = oracle::regression(&actual, &predicted);
        rel_close(got.r2, r2, 1e-9, "r2")?;
        rel_close(got.mae, mae, 1e-9, "mae")?;
        rel_close(got.mse, mse, 1e-9, "mse")?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(1003);
    for _ in 0..500 {
        let n = rng.random_range(1..40usize);
        let k = rng.random_range(2..=pool.len());
        let classes: Vec<&str> = pool[..k].to_vec();
        let actual: Vec<&str> = (0..n).map(|_| classes[rng.random_range(0..k)]).collect();
        let predicted: Vec<&str> = (0..n).map(|_| classes[rng.random_range(0..k)]).collect();
        let got =
            confusion(&actual, &predicted, &classes).map_err(|e| format!("confusion: {e}"))?;
        check(
            got.counts == oracle::confusion(&actual, &predicted, &classes),
            "confusion counts mismatch",
        )?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(1004);
    for trial in 0..500 {
        let task = if trial % 2 == 0 {
            AttributeTask::Gender
        } else {
            AttributeTask::Ethnicity
        };
        let classes = task.classes();
        let n_filters = rng.random_range(1..4usize);
        let mut per_filter = Vec::new();
        for f in 0..n_filters {
            let n = rng.random_range(1..30usize);
            let actual: Vec<String> = (0..n)
                .map(|_| classes[rng.random_range(0..classes.len())].to_string())
                .collect();
            let predicted: Vec<String> = (0..n)
                .map(|_| classes[rng.random_range(0..classes.len())].to_string())
                .collect();
            per_filter.push((format!("f{f}"), actual, predicted));
        }
        let table = misprediction_tables(&per_filter, task)
            .map_err(|e| format!("misprediction_tables: {e}"))?;
        for (fid, actual, predicted) in &per_filter {
            let row = table.row(fid).ok_or("missing filter row")?;
            let actual: Vec<&str> = actual.iter().map(|s| s.as_str()).collect();
            let predicted: Vec<&str> = predicted.iter().map(|s| s.as_str()).collect();
            match task {
                AttributeTask::Gender => {
                    check(
                        row.count("male->female").unwrap()
                            == oracle::directed_errors(&actual, &predicted, "male", "female"),
                        "male->female mismatch",
                    )?;
                    check(
                        row.count("female->male").unwrap()
                            == oracle::directed_errors(&actual, &predicted, "female", "male"),
                        "female->male mismatch",
                    )?;
                }
                AttributeTask::Ethnicity => {
                    for class in classes {
                        check(
                            row.count(class).unwrap()
                                == oracle::wrongly_predicted_as(&actual, &predicted, class),
                            format!("ethnicity count mismatch for {class}"),
                        )?;
                    }
                }
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 10.0, format!("took {elapsed:.1}s, budget 10s"))?;
    Ok("4 ops x 500 random inputs vs brute-force oracles".into())
}

// ---------------------------------------------------------------------------
// Criterion 2: normalization and distance unit suite
// ---------------------------------------------------------------------------

fn criterion_2_distance_suite() -> CriterionResult {
    let n = l2_normalize(&[3.0, 4.0]).map_err(|e| e.to_string())?;
    close(n[0], 0.6, 1e-15, "l2_normalize [3,4] x")?;
    close(n[1], 0.8, 1e-15, "l2_normalize [3,4] y")?;

    let p = vec![0.2, 0.3, 0.5];
    check(
        pair_distance(&p, &p).map_err(|e| e.to_string())?.value() == 0.0,
        "identical distributions must be at distance 0",
    )?;

    let e1 = vec![1.0, 0.0, 0.0];
    let e2 = vec![0.0, 0.0, 1.0];
    close(
        pair_distance(&e1, &e2).map_err(|e| e.to_string())?.value(),
        2f64.sqrt(),
        1e-12,
        "disjoint one-hots",
    )?;

    let mut rng = ChaCha12Rng::seed_from_u64(2001);
    for _ in 0..1000 {
        let len = rng.random_range(2..10usize);
        let p: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..1.0)).collect();
        let q: Vec<f64> = (0..len).map(|_| rng.random_range(1e-3..1.0)).collect();
        let alpha: f64 = rng.random_range(0.1..10.0);
        let beta: f64 = rng.random_range(0.1..10.0);
        let base = pair_distance(&p, &q).map_err(|e| e.to_string())?.value();
        let scaled = pair_distance(
            &p.iter().map(|x| x * alpha).collect::<Vec<_>>(),
            &q.iter().map(|x| x * beta).collect::<Vec<_>>(),
        )
        .map_err(|e| e.to_string())?
        .value();
        close(base, scaled, 1e-9, "scale invariance")?;
    }
    Ok("unit values exact; scale invariance over 1000 random pairs".into())
}

// ---------------------------------------------------------------------------
// Criteria 3-5: published-table reproduction from shipped fixtures
// ---------------------------------------------------------------------------

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run_ffsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffsense"))
        .args(args)
        .output()
        .expect("spawn ffsense")
}

fn read_dump_records(path: &Path) -> Result<Vec<PredictionDumpRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<PredictionDumpRecord>(l).map_err(|e| e.to_string()))
        .collect()
}

fn criterion_3_distortion_table() -> CriterionResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("analysis");
    let output = run_ffsense(&[
        "analyze",
        "--dump",
        fixture("predictions.jsonl").to_str().unwrap(),
        "--manifest",
        fixture("manifest.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    check(
        output.status.success(),
        format!(
            "analyze failed: {}",
            String::from_utf8_lossy(&output.stderr)
        ),
    )?;

    let distortion: ffsense::metrics::FilterDistortionReport = serde_json::from_str(
        &fs::read_to_string(out.join("distortion.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    for target in FILTER_TARGETS.iter() {
        let row = distortion
            .row(target.filter_id)
            .ok_or_else(|| format!("missing filter {}", target.filter_id))?;
        close(
            row.mean_d,
            target.mean_distance,
            1e-6,
            &format!("mean distance for {}", target.filter_id),
        )?;
    }
    check(
        distortion.breaking_filters() == vec!["hipster_look_snapchat"],
        format!("breaking set was {:?}", distortion.breaking_filters()),
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 5.0, format!("took {elapsed:.1}s, budget 5s"))?;
    Ok("10 per-filter means within 1e-6; exactly one breaking filter at 0.75".into())
}

fn criterion_4_age_table() -> CriterionResult {
    let start = Instant::now();
    let manifest = load_manifest(&fixture("manifest.jsonl")).map_err(|e| e.to_string())?;
    let records = read_dump_records(&fixture("predictions.jsonl"))?;
    let samples: Vec<AgeSample> = records
        .iter()
        .filter(|r| r.filter_id != "none")
        .map(|r| AgeSample {
            actual: manifest.subject(&r.subject_id).unwrap().age as f64,
            predicted: r.age_pred,
            filter_id: r.filter_id.clone(),
        })
        .collect();
    let report = age_deviation(&samples).map_err(|e| e.to_string())?;

    for target in FILTER_TARGETS.iter() {
        let stats = report
            .row(target.filter_id)
            .and_then(|r| r.stats.as_ref())
            .ok_or_else(|| format!("missing stats for {}", target.filter_id))?;
        close(
            stats.avg_reduction,
            target.age_reduction,
            1e-5,
            "avg reduction",
        )?;
        close(
            stats.avg_increment,
            target.age_increment,
            1e-5,
            "avg increment",
        )?;
        close(stats.net_deviation, target.age_net, 1e-5, "net deviation")?;
        // mass balance: n1*red + n2*inc = N*net
        let n1 = stats.n_underestimated as f64;
        let n2 = stats.n_overestimated as f64;
        close(
            n1 * stats.avg_reduction + n2 * stats.avg_increment,
            (n1 + n2) * stats.net_deviation,
            1e-9,
            "mass balance",
        )?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 5.0, format!("took {elapsed:.1}s, budget 5s"))?;
    Ok("all 10 rows within 1e-5 with mass balance at 1e-9".into())
}

fn criterion_5_misprediction_tables() -> CriterionResult {
    let start = Instant::now();
    let manifest = load_manifest(&fixture("manifest.jsonl")).map_err(|e| e.to_string())?;
    let records = read_dump_records(&fixture("predictions.jsonl"))?;

    let argmax = |v: &[f64]| -> usize {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    };

    let mut gender_per_filter = Vec::new();
    let mut ethnicity_per_filter = Vec::new();
    for target in FILTER_TARGETS.iter() {
        let rows: Vec<&PredictionDumpRecord> = records
            .iter()
            .filter(|r| r.filter_id == target.filter_id)
            .collect();
        gender_per_filter.push((
            target.filter_id.to_string(),
            rows.iter()
                .map(|r| {
                    manifest
                        .subject(&r.subject_id)
                        .unwrap()
                        .gender
                        .label()
                        .to_string()
                })
                .collect::<Vec<_>>(),
            rows.iter()
                .map(|r| ffsense::metrics::GENDER_CLASSES[argmax(&r.gender_probs)].to_string())
                .collect::<Vec<_>>(),
        ));
        ethnicity_per_filter.push((
            target.filter_id.to_string(),
            rows.iter()
                .map(|r| {
                    manifest
                        .subject(&r.subject_id)
                        .unwrap()
                        .ethnicity
                        .label()
                        .to_string()
                })
                .collect::<Vec<_>>(),
            rows.iter()
                .map(|r| {
                    ffsense::dataset::Ethnicity::CLASS_ORDER[argmax(&r.ethnicity_probs)]
                        .label()
                        .to_string()
                })
                .collect::<Vec<_>>(),
        ));
    }
    let gender = misprediction_tables(&gender_per_filter, AttributeTask::Gender)
        .map_err(|e| e.to_string())?;
    let ethnicity = misprediction_tables(&ethnicity_per_filter, AttributeTask::Ethnicity)
        .map_err(|e| e.to_string())?;

    for target in FILTER_TARGETS.iter() {
        let row = gender.row(target.filter_id).ok_or("missing gender row")?;
        check(
            row.count("male->female") == Some(target.male_as_female),
            format!(
                "{}: male->female {:?} vs {}",
                target.filter_id,
                row.count("male->female"),
                target.male_as_female
            ),
        )?;
        check(
            row.count("female->male") == Some(target.female_as_male),
            format!("{}: female->male mismatch", target.filter_id),
        )?;
        // equal to the emitted confusion off-diagonals
        let m = &row.confusion;
        let mi = m.classes.iter().position(|c| c == "male").unwrap();
        let fi = m.classes.iter().position(|c| c == "female").unwrap();
        check(
            m.counts[mi][fi] == target.male_as_female && m.counts[fi][mi] == target.female_as_male,
            "gender counts disagree with confusion off-diagonals",
        )?;

        let row = ethnicity
            .row(target.filter_id)
            .ok_or("missing ethnicity row")?;
        for (idx, class) in ["black", "east_asian", "west_asian", "white"]
            .iter()
            .enumerate()
        {
            check(
                row.count(class) == Some(target.ethnicity_errors[idx]),
                format!("{}: ethnicity {class} mismatch", target.filter_id),
            )?;
            let j = row
                .confusion
                .classes
                .iter()
                .position(|c| c == class)
                .unwrap();
            check(
                row.confusion.wrongly_predicted_as(j) == target.ethnicity_errors[idx],
                format!(
                    "{}: {class} disagrees with confusion marginal",
                    target.filter_id
                ),
            )?;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 5.0, format!("took {elapsed:.1}s, budget 5s"))?;
    Ok("every directed count exact and equal to confusion marginals".into())
}

// ---------------------------------------------------------------------------
// Criterion 6: full-size model shape and softmax normalization
// ---------------------------------------------------------------------------

fn criterion_6_model_shape() -> CriterionResult {
    let start = Instant::now();
    let spec = build_facefilternet(102).map_err(|e| e.to_string())?;
    check(spec.feature_dim == 2048, "feature_dim must be 2048")?;
    check(
        spec.head.kind.output_width() == 102,
        "head width must be 102",
    )?;
    check(
        spec.input_image_shape() == Some((256, 256, 3)),
        "input must be 256x256x3",
    )?;

    let mut net = Network::init(&spec, 61).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint::from_network(&mut net, TrainingFingerprint::default(), vec![]);
    let engine = InferenceEngine::compile(&ckpt).map_err(|e| e.to_string())?;

    let total = 1000usize;
    let chunk_size = 50usize;
    let mut done = 0usize;
    while done < total {
        let n = chunk_size.min(total - done);
        let images: Vec<ImageTensor> = (done..done + n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha12Rng::seed_from_u64(62_000 + i as u64);
                let data: Vec<f32> = (0..256 * 256 * 3)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect();
                ImageTensor::new(256, 256, 3, data).expect("in-range pixels")
            })
            .collect();
        let outputs = engine
            .predict_identity_batch(&images)
            .map_err(|e| e.to_string())?;
        for dist in &outputs {
            check(dist.len() == 102, "output length must be 102")?;
            let sum: f64 = dist.probs().iter().sum();
            check((sum - 1.0).abs() <= 1e-5, format!("softmax sum {sum}"))?;
            check(
                dist.probs().iter().all(|p| *p >= 0.0),
                "negative probability",
            )?;
        }
        done += n;
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 120.0, format!("took {elapsed:.1}s, budget 120s"))?;
    Ok(format!("1000 random 256x256x3 forwards in {elapsed:.0}s"))
}

// ---------------------------------------------------------------------------
// Criterion 7: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

fn criterion_7_gradient_check() -> CriterionResult {
    let start = Instant::now();
    let spec = build_tiny_recognizer(3, 8, 16).map_err(|e| e.to_string())?;
    let mut net = Network::init(&spec, 71).map_err(|e| e.to_string())?;

    let mut rng = ChaCha12Rng::seed_from_u64(72);
    let x = Array4::from_shape_fn((4, 3, 8, 8), |_| rng.random_range(0.0..1.0));
    let labels = vec![0usize, 1, 2, 0];

    let probe_loss = |net: &mut Network| -> f64 {
        let logits = net.forward_images(&x, Mode::Probe);
        cross_entropy_loss(&logits, &labels, None).0
    };

    // analytic gradients
    let logits = net.forward_images(&x, Mode::Probe);
    let (_, grad) = cross_entropy_loss(&logits, &labels, None);
    net.zero_grads();
    net.backward_images(&grad);
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: Vec<(String, usize)> = Vec::new();
    net.for_each_param(&mut |p| {
        analytic.insert(p.name.clone(), p.grad.iter().copied().collect());
        shapes.push((p.name.clone(), p.value.len()));
    });

    // sample weights spread across every parameter tensor
    let mut samples: Vec<(String, usize)> = Vec::new();
    let per_tensor = (120 / shapes.len()).max(2);
    for (name, len) in &shapes {
        let step = (len / per_tensor).max(1);
        for idx in (0..*len).step_by(step).take(per_tensor) {
            if analytic[name][idx].abs() > 1e-10 {
                samples.push((name.clone(), idx));
            }
        }
    }
    check(
        samples.len() >= 50,
        format!("only {} usable weight samples", samples.len()),
    )?;

    let mut worst = 0.0f64;
    for (name, idx) in &samples {
        let mut original = 0.0;
        net.for_each_param(&mut |p| {
            if &p.name == name {
                original = p.value.as_slice().unwrap()[*idx];
            }
        });
        // h = 1e-6 sits in the sweet spot: small enough that the
        // perturbation stays on one side of every rectifier kink,
        // large enough that f64 rounding noise stays orders below the
        // tolerance.
        let h = 1e-6 * original.abs().max(1.0);

        let set = |net: &mut Network, value: f64| {
            net.for_each_param(&mut |p| {
                if &p.name == name {
                    p.value.as_slice_mut().unwrap()[*idx] = value;
                }
            });
        };
        set(&mut net, original + h);
        let loss_plus = probe_loss(&mut net);
        set(&mut net, original - h);
        let loss_minus = probe_loss(&mut net);
        set(&mut net, original);

        let numeric = (loss_plus - loss_minus) / (2.0 * h);
        let a = analytic[name][*idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
        check(
            rel < 1e-3,
            format!("{name}[{idx}]: analytic {a} vs numeric {numeric} (rel {rel:.2e})"),
        )?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 120.0, format!("took {elapsed:.1}s, budget 120s"))?;
    Ok(format!(
        "{} sampled weights, worst relative error {worst:.2e}",
        samples.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: overfit smoke training
// ---------------------------------------------------------------------------

fn overfit_run(
    data_dir: &Path,
    manifest: &ffsense::dataset::DatasetManifest,
) -> Result<ffsense::train::TrainReport, String> {
    let spec = {
        use ffsense::nets::{
            BackboneSpec, BridgeSpec, HeadKind, HeadSpec, InputSpec, NetworkSpec, StageSpec,
        };
        NetworkSpec {
            input: InputSpec::Image {
                height: 32,
                width: 32,
                channels: 3,
            },
            backbone: Some(BackboneSpec {
                stem_channels: 8,
                stem_kernel: 3,
                stem_stride: 1,
                stem_pool: false,
                stages: vec![
                    StageSpec {
                        width: 4,
                        blocks: 1,
                        stride: 2,
                    },
                    StageSpec {
                        width: 8,
                        blocks: 1,
                        stride: 2,
                    },
                ],
            }),
            bridge: Some(BridgeSpec {
                blocks: 1,
                branch_channels: 8,
                residual_scale: 0.1,
            }),
            feature_dim: 32,
            head: HeadSpec {
                kind: HeadKind::IdentitySoftmax { num_identities: 8 },
                hidden: vec![],
            },
        }
    };
    let all_ids: Vec<String> = manifest.images.iter().map(|i| i.image_id.clone()).collect();
    let split = Split {
        train: all_ids,
        test: vec![],
        seed: 5,
        fraction: 1.0,
    };
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 8,
        learning_rate: 0.01,
        optimizer: OptimizerKind::AdaptiveMoment,
        loss: LossKind::CrossEntropy,
        seed: 5,
        ..TrainConfig::default()
    };
    let (_, report) = train_identity(
        manifest,
        &split,
        &spec,
        &cfg,
        data_dir,
        TrainingFingerprint::default(),
        None,
    )
    .map_err(|e| e.to_string())?;
    Ok(report)
}

fn criterion_8_overfit() -> CriterionResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = write_synthetic_dataset(
        dir.path(),
        &SynthSpec {
            subjects: 8,
            poses: 8,
            filters: 0,
            edge: 32,
        },
    )
    .map_err(|e| e.to_string())?;
    check(manifest.images.len() == 64, "expected the 64-image dataset")?;

    let report_a = overfit_run(dir.path(), &manifest)?;
    check(
        report_a.epochs.len() == 30,
        format!("trajectory length {}", report_a.epochs.len()),
    )?;
    check(
        report_a.final_train_metric >= 0.99,
        format!("train accuracy {}", report_a.final_train_metric),
    )?;
    let first_loss = report_a.epochs.first().unwrap().train_loss;
    let last_loss = report_a.epochs.last().unwrap().train_loss;
    check(
        last_loss < first_loss,
        format!("loss did not decrease: {first_loss} -> {last_loss}"),
    )?;

    let report_b = overfit_run(dir.path(), &manifest)?;
    close(
        report_a.final_train_metric,
        report_b.final_train_metric,
        1e-4,
        "same-seed reruns",
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 600.0, format!("took {elapsed:.1}s, budget 600s"))?;
    Ok(format!(
        "train accuracy {:.3} within 30 epochs, deterministic rerun, {elapsed:.0}s",
        report_a.final_train_metric
    ))
}

// ---------------------------------------------------------------------------
// Criterion 9: two-run pipeline closure
// ---------------------------------------------------------------------------

const PIPELINE_CONFIG: &str = "\
epochs = 6
batch_size = 8
learning_rate = 0.01
optimizer = adaptive_moment
loss = mse
seed = 5
arch_input_edge = 32
arch_stem_channels = 8
arch_stem_kernel = 3
arch_stem_stride = 1
arch_stem_pool = false
arch_stage_widths = 4,8
arch_stage_blocks = 1,1
arch_stage_strides = 2,2
arch_bridge_blocks = 1
arch_bridge_channels = 8
arch_feature_dim = 32
attr_hidden = 16
";

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().to_string(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

fn pipeline_run(root: &Path, data: &Path) -> Result<(PathBuf, PathBuf, PathBuf), String> {
    let manifest = data.join("manifest.jsonl");
    let split = root.join("split.json");
    let models = root.join("models");
    let dump = root.join("dump.jsonl");
    let analysis = root.join("analysis");
    let reports = root.join("reports");
    let config = root.join("train.cfg");
    fs::write(&config, PIPELINE_CONFIG).map_err(|e| e.to_string())?;

    let steps: Vec<Vec<&str>> = vec![
        vec!["validate", "--manifest", manifest.to_str().unwrap()],
        vec![
            "split",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            split.to_str().unwrap(),
            "--seed",
            "3",
        ],
        vec![
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--split",
            split.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            models.to_str().unwrap(),
        ],
        vec![
            "predict",
            "--checkpoints",
            models.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--split",
            split.to_str().unwrap(),
            "--subset",
            "test+baselines",
            "--out",
            dump.to_str().unwrap(),
        ],
        vec![
            "analyze",
            "--dump",
            dump.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--split",
            split.to_str().unwrap(),
            "--out",
            analysis.to_str().unwrap(),
        ],
        vec![
            "report",
            "--analysis",
            analysis.to_str().unwrap(),
            "--out",
            reports.to_str().unwrap(),
        ],
    ];
    for step in steps {
        let output = run_ffsense(&step);
        if !output.status.success() {
            return Err(format!(
                "step {:?} exited {:?}: {}",
                step[0],
                output.status.code(),
                String::from_utf8_lossy(&output.stderr)
            ));
        }
    }
    Ok((models, analysis, reports))
}

fn criterion_9_pipeline_closure() -> CriterionResult {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    write_synthetic_dataset(
        &data,
        &SynthSpec {
            subjects: 8,
            poses: 8,
            filters: 2,
            edge: 32,
        },
    )
    .map_err(|e| e.to_string())?;

    let run_a = dir.path().join("run_a");
    let run_b = dir.path().join("run_b");
    fs::create_dir_all(&run_a).map_err(|e| e.to_string())?;
    fs::create_dir_all(&run_b).map_err(|e| e.to_string())?;
    let (models_a, analysis_a, reports_a) = pipeline_run(&run_a, &data)?;
    let (models_b, analysis_b, reports_b) = pipeline_run(&run_b, &data)?;

    check(
        dir_snapshot(&reports_a) == dir_snapshot(&reports_b),
        "rendered reports differ between identical runs",
    )?;
    check(
        dir_snapshot(&analysis_a) == dir_snapshot(&analysis_b),
        "analysis JSON differs between identical runs",
    )?;

    // same-seed reruns land on the same training metrics
    let load_report = |models: &Path| -> Result<ffsense::train::TrainReport, String> {
        serde_json::from_str(
            &fs::read_to_string(models.join("identity_train_report.json"))
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())
    };
    let (trained_a, trained_b) = (load_report(&models_a)?, load_report(&models_b)?);
    close(
        trained_a.final_train_metric,
        trained_b.final_train_metric,
        1e-4,
        "train metric across same-seed runs",
    )?;

    // composability: analyze's identity accuracy over the test scope
    // equals the trainer's reported final test accuracy exactly
    let train_report: ffsense::train::TrainReport = serde_json::from_str(
        &fs::read_to_string(models_a.join("identity_train_report.json"))
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let identity: ffsense::metrics::ClassificationReport = serde_json::from_str(
        &fs::read_to_string(analysis_a.join("identity_classification.json"))
            .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let expected = train_report
        .final_test_metric
        .ok_or("trainer reported no test metric")?;
    check(
        identity.accuracy == expected,
        format!(
            "analyze accuracy {} != trainer test accuracy {expected}",
            identity.accuracy
        ),
    )?;

    let elapsed = start.elapsed().as_secs_f64();
    Ok(format!(
        "two identical runs, byte-identical analysis and reports, accuracy closure exact, {elapsed:.0}s"
    ))
}

// ---------------------------------------------------------------------------
// Full-size sanity that sits outside the numbered criteria: a fresh
// random recognizer should be near-uniform over 102 classes.
// ---------------------------------------------------------------------------

#[test]
#[ignore = "heavy; run explicitly alongside the acceptance gate"]
fn random_init_identity_distribution_is_near_uniform() {
    let spec = build_facefilternet(102).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for seed in 0..20 {
        let mut net = Network::init(&spec, seed).unwrap();
        let ckpt = Checkpoint::from_network(&mut net, TrainingFingerprint::default(), vec![]);
        let engine = InferenceEngine::compile(&ckpt).unwrap();
        let data: Vec<f32> = (0..256 * 256 * 3)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let img = ImageTensor::new(256, 256, 3, data).unwrap();
        let dist = engine.predict_identity(&img).unwrap();
        let max = dist.probs().iter().cloned().fold(0.0f64, f64::max);
        assert!(max < 0.2, "seed {seed}: max probability {max}");
    }
}
