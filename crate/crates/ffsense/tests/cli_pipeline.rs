//! End-to-end tests of the `ffsense` binary: exit codes, diagnostics,
//! determinism of emitted files, and the shipped-fixture workflow.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ffsense::cli::{ANALYSIS_FILES, REPORT_FILES};
use ffsense::synthetic::{write_reference_fixtures, write_synthetic_dataset, SynthSpec};

fn ffsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffsense"))
        .args(args)
        .output()
        .expect("spawn ffsense")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

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

#[test]
fn shipped_fixtures_match_generator_output() {
    let dir = tempfile::tempdir().unwrap();
    write_reference_fixtures(dir.path()).unwrap();
    for name in ["manifest.jsonl", "predictions.jsonl"] {
        let generated = fs::read(dir.path().join(name)).unwrap();
        let shipped = fs::read(fixture(name)).unwrap();
        assert_eq!(generated, shipped, "{name} drifted from its generator");
    }
}

#[test]
fn validate_accepts_reference_manifest() {
    let output = ffsense(&[
        "validate",
        "--manifest",
        fixture("manifest.jsonl").to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(
        stdout(&output).contains("OK: 102 subjects, 2040 images"),
        "{}",
        stdout(&output)
    );
}

#[test]
fn validate_reports_every_violation_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.jsonl");
    let mut text = fs::read_to_string(fixture("manifest.jsonl")).unwrap();
    text.push_str("{\"kind\":\"image\",\"image_id\":\"ghost1\",\"subject_id\":\"s999\",\"pose\":\"neutral_front\",\"filter_id\":\"none\",\"uri\":\"x.png\"}\n");
    text.push_str("{\"kind\":\"image\",\"image_id\":\"ghost2\",\"subject_id\":\"s998\",\"pose\":\"neutral_front\",\"filter_id\":\"none\",\"uri\":\"x.png\"}\n");
    fs::write(&path, text).unwrap();
    let output = ffsense(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let err = stderr(&output);
    assert!(err.contains("s999"), "{err}");
    assert!(err.contains("s998"), "{err}");
}

#[test]
fn validate_unreadable_path_exits_two() {
    let output = ffsense(&["validate", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn split_is_deterministic_and_has_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a.json");
    let out_b = dir.path().join("b.json");
    for out in [&out_a, &out_b] {
        let output = ffsense(&[
            "split",
            "--manifest",
            fixture("manifest.jsonl").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
        assert!(
            stdout(&output).contains("1632 train / 408 test"),
            "{}",
            stdout(&output)
        );
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());
}

#[test]
fn analyze_reference_dump_flags_only_hipster_look() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("analysis_a");
    let out_b = dir.path().join("analysis_b");
    for out in [&out_a, &out_b] {
        let output = ffsense(&[
            "analyze",
            "--dump",
            fixture("predictions.jsonl").to_str().unwrap(),
            "--manifest",
            fixture("manifest.jsonl").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
        for name in ANALYSIS_FILES {
            assert!(out.join(name).exists(), "missing {name}");
        }
    }
    assert_eq!(dir_snapshot(&out_a), dir_snapshot(&out_b));

    let distortion: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_a.join("distortion.json")).unwrap()).unwrap();
    let breaking: Vec<&str> = distortion["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["breaking"].as_bool().unwrap())
        .map(|r| r["filter_id"].as_str().unwrap())
        .collect();
    assert_eq!(breaking, vec!["hipster_look_snapchat"]);
}

#[test]
fn analyze_missing_baseline_names_subject() {
    let dir = tempfile::tempdir().unwrap();
    // drop subject s001's baseline record from the dump
    let dump_text = fs::read_to_string(fixture("predictions.jsonl")).unwrap();
    let reduced: String = dump_text
        .lines()
        .filter(|l| !l.contains("\"image_id\":\"s001_neutral_front\""))
        .map(|l| format!("{l}\n"))
        .collect();
    let dump = dir.path().join("reduced.jsonl");
    fs::write(&dump, reduced).unwrap();
    let output = ffsense(&[
        "analyze",
        "--dump",
        dump.to_str().unwrap(),
        "--manifest",
        fixture("manifest.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("analysis").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("s001"), "{}", stderr(&output));
}

#[test]
fn report_renders_fixed_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let analysis = dir.path().join("analysis");
    let output = ffsense(&[
        "analyze",
        "--dump",
        fixture("predictions.jsonl").to_str().unwrap(),
        "--manifest",
        fixture("manifest.jsonl").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));

    let report_a = dir.path().join("report_a");
    let report_b = dir.path().join("report_b");
    for out in [&report_a, &report_b] {
        let output = ffsense(&[
            "report",
            "--analysis",
            analysis.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
        for name in REPORT_FILES {
            assert!(out.join(name).exists(), "missing {name}");
        }
    }
    assert_eq!(dir_snapshot(&report_a), dir_snapshot(&report_b));

    let distortion_md = fs::read_to_string(report_a.join("distortion.md")).unwrap();
    assert!(
        distortion_md.contains("Hipster Look Filter Snapchat | 1.179643"),
        "{distortion_md}"
    );
    let usability = fs::read_to_string(report_a.join("usability.md")).unwrap();
    let hipster_verdict = usability
        .lines()
        .find(|l| l.contains("Hipster Look Filter Snapchat"))
        .unwrap();
    assert!(hipster_verdict.contains("breaking"), "{hipster_verdict}");
    assert!(hipster_verdict.contains("younger"), "{hipster_verdict}");
    assert!(
        hipster_verdict.contains("white (29 of 32)"),
        "{hipster_verdict}"
    );
    let sparkling_verdict = usability
        .lines()
        .find(|l| l.contains("Sparkling Cartoon Filter Snapchat"))
        .unwrap();
    assert!(sparkling_verdict.contains("| high |"), "{sparkling_verdict}");
}

#[test]
fn report_on_partial_analysis_lists_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let analysis = dir.path().join("analysis");
    fs::create_dir_all(&analysis).unwrap();
    fs::write(analysis.join("distortion.json"), "{}").unwrap();
    let output = ffsense(&[
        "report",
        "--analysis",
        analysis.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let err = stderr(&output);
    assert!(err.contains("age_deviation.json"), "{err}");
    assert!(err.contains("filters.json"), "{err}");
}

// -- tests below train a tiny model first ----------------------------------

const TINY_CONFIG: &str = "\
epochs = 2
batch_size = 8
learning_rate = 0.01
optimizer = adaptive_moment
loss = mse
seed = 5
arch_input_edge = 16
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

struct TrainedPipeline {
    _dir: tempfile::TempDir,
    data: PathBuf,
    split: PathBuf,
    checkpoints: PathBuf,
}

fn train_tiny_pipeline() -> TrainedPipeline {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(
        &data,
        &SynthSpec {
            subjects: 4,
            poses: 4,
            filters: 2,
            edge: 16,
        },
    )
    .unwrap();
    let config = dir.path().join("train.cfg");
    fs::write(&config, TINY_CONFIG).unwrap();
    let split = dir.path().join("split.json");
    let manifest = data.join("manifest.jsonl");

    let output = ffsense(&[
        "split",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        split.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));

    let checkpoints = dir.path().join("models");
    let output = ffsense(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--split",
        split.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        checkpoints.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    TrainedPipeline {
        data,
        split,
        checkpoints,
        _dir: dir,
    }
}

#[test]
fn predict_empty_id_list_writes_empty_file_and_succeeds() {
    let pipeline = train_tiny_pipeline();
    let ids = pipeline.data.join("ids.txt");
    fs::write(&ids, "").unwrap();
    let out = pipeline.data.join("empty.jsonl");
    let output = ffsense(&[
        "predict",
        "--checkpoints",
        pipeline.checkpoints.to_str().unwrap(),
        "--manifest",
        pipeline.data.join("manifest.jsonl").to_str().unwrap(),
        "--ids",
        ids.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn predict_corrupt_image_writes_error_record_and_exits_one() {
    let pipeline = train_tiny_pipeline();
    // corrupt one payload
    fs::write(
        pipeline.data.join("images/s001_neutral_front.png"),
        b"not a png",
    )
    .unwrap();
    let ids = pipeline.data.join("ids.txt");
    fs::write(&ids, "s001_neutral_front\ns002_neutral_front\n").unwrap();
    let out = pipeline.data.join("dump.jsonl");
    let output = ffsense(&[
        "predict",
        "--checkpoints",
        pipeline.checkpoints.to_str().unwrap(),
        "--manifest",
        pipeline.data.join("manifest.jsonl").to_str().unwrap(),
        "--ids",
        ids.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    // input order preserved: corrupt record first, then the good one
    assert!(lines[0].contains("\"error\""), "{}", lines[0]);
    assert!(lines[0].contains("s001_neutral_front"));
    assert!(lines[1].contains("\"identity_probs\""));
}

#[test]
fn predict_test_subset_line_count_matches_split() {
    let pipeline = train_tiny_pipeline();
    let split: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&pipeline.split).unwrap()).unwrap();
    let test_count = split["test"].as_array().unwrap().len();

    let out = pipeline.data.join("dump.jsonl");
    let output = ffsense(&[
        "predict",
        "--checkpoints",
        pipeline.checkpoints.to_str().unwrap(),
        "--manifest",
        pipeline.data.join("manifest.jsonl").to_str().unwrap(),
        "--split",
        pipeline.split.to_str().unwrap(),
        "--subset",
        "test",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert_eq!(
        fs::read_to_string(&out).unwrap().lines().count(),
        test_count
    );
}

#[test]
fn analyze_rejects_non_argmax_predicted_identity() {
    let dir = tempfile::tempdir().unwrap();
    let dump_text = fs::read_to_string(fixture("predictions.jsonl")).unwrap();
    // first record is s001's baseline predicting s001; claim s002 instead
    let tampered = dump_text.replacen(
        "\"predicted_identity\":\"s001\"",
        "\"predicted_identity\":\"s002\"",
        1,
    );
    assert_ne!(tampered, dump_text);
    let dump = dir.path().join("tampered.jsonl");
    fs::write(&dump, tampered).unwrap();
    let output = ffsense(&[
        "analyze",
        "--dump",
        dump.to_str().unwrap(),
        "--manifest",
        fixture("manifest.jsonl").to_str().unwrap(),
        "--out",
        dir.path().join("analysis").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("argmax"), "{}", stderr(&output));
}

#[test]
fn cache_dir_env_var_relocates_feature_cache() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(
        &data,
        &SynthSpec {
            subjects: 2,
            poses: 2,
            filters: 0,
            edge: 8,
        },
    )
    .unwrap();
    let split = dir.path().join("split.json");
    let output = ffsense(&[
        "split",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        split.to_str().unwrap(),
    ]);
    assert!(output.status.success());

    let config = dir.path().join("train.cfg");
    fs::write(&config, TINY_CONFIG).unwrap();
    let cache = dir.path().join("relocated_cache");
    let output = Command::new(env!("CARGO_BIN_EXE_ffsense"))
        .args([
            "train",
            "--manifest",
            data.join("manifest.jsonl").to_str().unwrap(),
            "--split",
            split.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join("models").to_str().unwrap(),
        ])
        .env("FFSENSE_CACHE_DIR", &cache)
        .output()
        .expect("spawn ffsense");
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(cache.exists(), "feature cache was not relocated");
    assert!(!dir.path().join("models/feature_cache").exists());
}

#[test]
fn train_missing_config_key_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(
        &data,
        &SynthSpec {
            subjects: 2,
            poses: 2,
            filters: 0,
            edge: 8,
        },
    )
    .unwrap();
    let split = dir.path().join("split.json");
    let output = ffsense(&[
        "split",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        split.to_str().unwrap(),
    ]);
    assert!(output.status.success());

    let config = dir.path().join("bad.cfg");
    fs::write(&config, "epochs = 2\nbatch_size = 4\nseed = 1\n").unwrap();
    let output = ffsense(&[
        "train",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--split",
        split.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("models").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(
        stderr(&output).contains("learning_rate"),
        "{}",
        stderr(&output)
    );
}
