//! Generators for synthetic datasets and canned prediction dumps.
//!
//! Two families of fixtures come from here:
//!
//! - A small solid-pattern image dataset (PNGs plus manifest) whose
//!   identities a tiny recognizer can memorize in seconds; the training
//!   smoke tests and the end-to-end pipeline tests run on it.
//! - A full-scale reference manifest (102 subjects, 10 poses, the 10
//!   reference filters, 2040 images) and a matching prediction dump
//!   constructed so the per-filter analysis lands on exact published
//!   target values (distortion means, age deviation triples, gender and
//!   ethnicity misprediction counts).
//!
//! Everything here is deterministic: same inputs, same bytes.

use std::fs;
use std::path::Path;

use crate::cli::PredictionDumpRecord;
use crate::dataset::{
    DatasetManifest, Ethnicity, FilterCategory, FilterSpec, Gender, ImageRecord, SourceApp,
    SubjectRecord, NEUTRAL_FRONT, NO_FILTER,
};

/// Everything the per-filter analysis tables assert about one filter.
pub struct FilterTarget {
    pub filter_id: &'static str,
    pub display_name: &'static str,
    pub source_app: SourceApp,
    pub category: FilterCategory,
    /// Target mean normalized-distribution distance.
    pub mean_distance: f64,
    /// Target (avg reduction, avg increment, net deviation) in years.
    pub age_reduction: f64,
    pub age_increment: f64,
    pub age_net: f64,
    /// Directed gender error counts.
    pub male_as_female: u64,
    pub female_as_male: u64,
    /// Wrongly-predicted-class counts in (black, east_asian,
    /// west_asian, white) order.
    pub ethnicity_errors: [u64; 4],
}

/// The ten reference filters with their published analysis targets.
pub const FILTER_TARGETS: [FilterTarget; 10] = [
    FilterTarget {
        filter_id: "haircut_faceapp",
        display_name: "Haircut Filter FaceApp",
        source_app: SourceApp::FaceApp,
        category: FilterCategory::Beautification,
        mean_distance: 0.458548,
        age_reduction: -2.062500,
        age_increment: 1.478261,
        age_net: -0.292120,
        male_as_female: 1,
        female_as_male: 0,
        ethnicity_errors: [0, 3, 6, 6],
    },
    FilterTarget {
        filter_id: "child_faceapp",
        display_name: "Child Filter FaceApp",
        source_app: SourceApp::FaceApp,
        category: FilterCategory::Distortion,
        mean_distance: 0.507977,
        age_reduction: -3.371795,
        age_increment: 1.888889,
        age_net: -0.741453,
        male_as_female: 4,
        female_as_male: 0,
        ethnicity_errors: [0, 10, 8, 3],
    },
    FilterTarget {
        filter_id: "gender_reverse_faceapp",
        display_name: "Gender Reverse Filter FaceApp",
        source_app: SourceApp::FaceApp,
        category: FilterCategory::Distortion,
        mean_distance: 0.580298,
        age_reduction: -3.492754,
        age_increment: 2.000000,
        age_net: -0.746377,
        male_as_female: 1,
        female_as_male: 3,
        ethnicity_errors: [0, 0, 2, 5],
    },
    FilterTarget {
        filter_id: "hipster_beard_faceapp",
        display_name: "Hipster Beard Style Filter FaceApp",
        source_app: SourceApp::FaceApp,
        category: FilterCategory::Occlusion,
        mean_distance: 0.332914,
        age_reduction: -2.530303,
        age_increment: 1.812500,
        age_net: -0.358902,
        male_as_female: 0,
        female_as_male: 0,
        ethnicity_errors: [0, 8, 6, 5],
    },
    FilterTarget {
        filter_id: "hair_color_blonde_faceapp",
        display_name: "Hair Color Blonde Filter FaceApp",
        source_app: SourceApp::FaceApp,
        category: FilterCategory::Beautification,
        mean_distance: 0.222967,
        age_reduction: -2.369863,
        age_increment: 1.636364,
        age_net: -0.366750,
        male_as_female: 1,
        female_as_male: 0,
        ethnicity_errors: [0, 3, 3, 6],
    },
    FilterTarget {
        filter_id: "puppy_b612",
        display_name: "Puppy Filter B612",
        source_app: SourceApp::B612,
        category: FilterCategory::Occlusion,
        mean_distance: 0.494714,
        age_reduction: -3.200000,
        age_increment: 1.800000,
        age_net: -0.700000,
        male_as_female: 1,
        female_as_male: 1,
        ethnicity_errors: [0, 15, 7, 2],
    },
    FilterTarget {
        filter_id: "so_sad_b612",
        display_name: "So Sad Filter B612",
        source_app: SourceApp::B612,
        category: FilterCategory::Distortion,
        mean_distance: 0.191711,
        age_reduction: -2.142857,
        age_increment: 1.733333,
        age_net: -0.204762,
        male_as_female: 0,
        female_as_male: 0,
        ethnicity_errors: [0, 6, 7, 1],
    },
    FilterTarget {
        filter_id: "hipster_look_snapchat",
        display_name: "Hipster Look Filter Snapchat",
        source_app: SourceApp::Snapchat,
        category: FilterCategory::Occlusion,
        mean_distance: 1.179643,
        age_reduction: -5.774194,
        age_increment: 2.166667,
        age_net: -1.803763,
        male_as_female: 5,
        female_as_male: 2,
        ethnicity_errors: [0, 3, 0, 29],
    },
    FilterTarget {
        filter_id: "sparkling_cartoon_snapchat",
        display_name: "Sparkling Cartoon Filter Snapchat",
        source_app: SourceApp::Snapchat,
        category: FilterCategory::Distortion,
        mean_distance: 0.615396,
        age_reduction: -3.208333,
        age_increment: 3.153846,
        age_net: -0.027244,
        male_as_female: 1,
        female_as_male: 0,
        ethnicity_errors: [0, 5, 2, 7],
    },
    FilterTarget {
        filter_id: "body_mellow_glow_snapchat",
        display_name: "Body Mellow Glow Filter Snapchat",
        source_app: SourceApp::Snapchat,
        category: FilterCategory::Beautification,
        mean_distance: 0.427381,
        age_reduction: -2.716049,
        age_increment: 1.200000,
        age_net: -0.758025,
        male_as_female: 1,
        female_as_male: 0,
        ethnicity_errors: [0, 3, 4, 6],
    },
];

/// Table column order for ethnicity error counts.
pub const ETHNICITY_ERROR_ORDER: [Ethnicity; 4] = [
    Ethnicity::Black,
    Ethnicity::EastAsian,
    Ethnicity::WestAsian,
    Ethnicity::White,
];

pub const REFERENCE_SUBJECTS: usize = 102;

const POSES: [&str; 10] = [
    NEUTRAL_FRONT,
    "neutral_left",
    "neutral_right",
    "smiling_front",
    "smiling_left",
    "smiling_right",
    "surprised_front",
    "eyes_closed",
    "head_up",
    "head_down",
];

fn subject_id(index: usize) -> String {
    format!("s{:03}", index + 1)
}

fn subject_age(index: usize) -> u32 {
    20 + ((index * 7) % 50) as u32
}

fn subject_gender(index: usize) -> Gender {
    if index % 2 == 0 {
        Gender::Male
    } else {
        Gender::Female
    }
}

fn subject_ethnicity(index: usize) -> Ethnicity {
    Ethnicity::CLASS_ORDER[index % 4]
}

/// The reference manifest: 102 subjects x 10 poses plus the 10 filters
/// applied to each subject's neutral-front image (2040 images).
pub fn reference_manifest() -> DatasetManifest {
    let mut manifest = DatasetManifest::default();
    for filter in FILTER_TARGETS.iter() {
        manifest.filters.push(FilterSpec {
            filter_id: filter.filter_id.to_string(),
            display_name: filter.display_name.to_string(),
            source_app: filter.source_app,
            category: filter.category,
        });
    }
    for i in 0..REFERENCE_SUBJECTS {
        let sid = subject_id(i);
        manifest.subjects.push(SubjectRecord {
            subject_id: sid.clone(),
            age: subject_age(i),
            gender: subject_gender(i),
            ethnicity: subject_ethnicity(i),
        });
        for pose in POSES {
            manifest.images.push(ImageRecord {
                image_id: format!("{sid}_{pose}"),
                subject_id: sid.clone(),
                pose: pose.to_string(),
                filter_id: None,
                uri: format!("images/{sid}_{pose}.png"),
            });
        }
        for filter in FILTER_TARGETS.iter() {
            manifest.images.push(ImageRecord {
                image_id: format!("{sid}_{}", filter.filter_id),
                subject_id: sid.clone(),
                pose: NEUTRAL_FRONT.to_string(),
                filter_id: Some(filter.filter_id.to_string()),
                uri: format!("images/{sid}_{}.png", filter.filter_id),
            });
        }
    }
    manifest.metadata.insert(
        "source".to_string(),
        "synthetic reference fixture".to_string(),
    );
    manifest
}

fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

fn gender_probs(gender: Gender, correct: bool) -> Vec<f64> {
    let male_prob = match (gender, correct) {
        (Gender::Male, true) | (Gender::Female, false) => 0.9,
        _ => 0.1,
    };
    vec![male_prob, 1.0 - male_prob]
}

fn ethnicity_probs(predicted: Ethnicity) -> Vec<f64> {
    let mut v = vec![0.1; 4];
    v[predicted.class_index()] = 0.7;
    v
}

/// A filtered image's identity distribution with distance exactly `d`
/// from the subject's one-hot baseline: probability mass stays on the
/// subject's class plus one neighbor class, with the two weights chosen
/// so the normalized vectors are `d` apart.
fn distorted_distribution(subject: usize, classes: usize, d: f64) -> Vec<f64> {
    let u = 1.0 - d * d / 2.0;
    let v = (1.0 - u * u).sqrt();
    let mut probs = vec![0.0; classes];
    let neighbor = (subject + 1) % classes;
    probs[subject] = u / (u + v);
    probs[neighbor] = v / (u + v);
    probs
}

/// Builds the prediction dump whose analysis reproduces the published
/// per-filter tables: 102 baseline records plus 1020 filtered records.
pub fn reference_dump(manifest: &DatasetManifest) -> Vec<PredictionDumpRecord> {
    let classes = manifest.identity_class_count();
    let class_labels = manifest.identity_classes();
    let mut records = Vec::with_capacity(classes * (1 + FILTER_TARGETS.len()));

    // Baselines: every prediction spot on.
    for i in 0..classes {
        let sid = subject_id(i);
        records.push(PredictionDumpRecord {
            image_id: format!("{sid}_{NEUTRAL_FRONT}"),
            subject_id: sid.clone(),
            filter_id: NO_FILTER.to_string(),
            identity_probs: one_hot(i, classes),
            predicted_identity: class_labels[i].clone(),
            age_pred: subject_age(i) as f64,
            gender_probs: gender_probs(subject_gender(i), true),
            ethnicity_probs: ethnicity_probs(subject_ethnicity(i)),
        });
    }

    for target in FILTER_TARGETS.iter() {
        // Age: two underestimates and two overestimates whose means hit
        // the published reduction/increment exactly; everyone else spot
        // on. The published net deviation follows because each table
        // row satisfies net = (reduction + increment) / 2.
        let mut age_deviation = vec![0.0f64; classes];
        age_deviation[0] = target.age_reduction - 0.25;
        age_deviation[1] = target.age_reduction + 0.25;
        age_deviation[2] = target.age_increment + 0.125;
        age_deviation[3] = target.age_increment - 0.125;

        // Gender: the first male_as_female males and female_as_male
        // females get flipped predictions.
        let mut males_to_flip = target.male_as_female;
        let mut females_to_flip = target.female_as_male;
        let mut gender_correct = vec![true; classes];
        for (i, correct) in gender_correct.iter_mut().enumerate() {
            match subject_gender(i) {
                Gender::Male if males_to_flip > 0 => {
                    males_to_flip -= 1;
                    *correct = false;
                }
                Gender::Female if females_to_flip > 0 => {
                    females_to_flip -= 1;
                    *correct = false;
                }
                _ => {}
            }
            if males_to_flip == 0 && females_to_flip == 0 {
                break;
            }
        }

        // Ethnicity: per wrongly-predicted class, pick that many
        // subjects whose true class differs and has not been used yet.
        let mut predicted_ethnicity: Vec<Ethnicity> = (0..classes).map(subject_ethnicity).collect();
        let mut used = vec![false; classes];
        for (class, count) in ETHNICITY_ERROR_ORDER.iter().zip(target.ethnicity_errors) {
            let mut remaining = count;
            for i in 0..classes {
                if remaining == 0 {
                    break;
                }
                if !used[i] && subject_ethnicity(i) != *class {
                    used[i] = true;
                    predicted_ethnicity[i] = *class;
                    remaining -= 1;
                }
            }
            assert_eq!(remaining, 0, "not enough subjects for ethnicity errors");
        }

        for i in 0..classes {
            let sid = subject_id(i);
            let identity_probs = distorted_distribution(i, classes, target.mean_distance);
            let argmax = identity_probs
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    a.partial_cmp(b).unwrap().then(ib.cmp(ia)) // ties break to the lower index
                })
                .map(|(idx, _)| idx)
                .unwrap();
            records.push(PredictionDumpRecord {
                image_id: format!("{sid}_{}", target.filter_id),
                subject_id: sid.clone(),
                filter_id: target.filter_id.to_string(),
                identity_probs,
                predicted_identity: class_labels[argmax].clone(),
                age_pred: subject_age(i) as f64 + age_deviation[i],
                gender_probs: gender_probs(subject_gender(i), gender_correct[i]),
                ethnicity_probs: ethnicity_probs(predicted_ethnicity[i]),
            });
        }
    }
    records
}

/// Writes the reference manifest and dump to `dir` as
/// `manifest.jsonl` and `predictions.jsonl`.
pub fn write_reference_fixtures(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = reference_manifest();
    manifest
        .save(&dir.join("manifest.jsonl"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let dump = reference_dump(&manifest);
    let mut out = String::new();
    for record in &dump {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(dir.join("predictions.jsonl"), out)
}

// ---------------------------------------------------------------------------
// Trainable synthetic image dataset
// ---------------------------------------------------------------------------

/// Shape of a generated solid-pattern dataset.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub subjects: usize,
    /// Image copies per subject (distinct pose tags, identical pixels).
    pub poses: usize,
    /// How many of the reference filters to apply to each subject's
    /// baseline (0..=10).
    pub filters: usize,
    pub edge: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subjects: 8,
            poses: 8,
            filters: 2,
            edge: 32,
        }
    }
}

fn subject_color(index: usize, subjects: usize) -> [u8; 3] {
    // equally spaced hues at full saturation; trivially separable
    let hue = index as f64 / subjects as f64 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [
        (r * 200.0) as u8 + 30,
        (g * 200.0) as u8 + 30,
        (b * 200.0) as u8 + 30,
    ]
}

fn filter_shift(filter_index: usize) -> [i16; 3] {
    match filter_index % 10 {
        0 => [40, -20, 10],
        1 => [-30, 25, -15],
        2 => [15, 15, -40],
        3 => [-20, -20, 35],
        4 => [50, 0, -10],
        5 => [-45, 10, 20],
        6 => [10, -35, 25],
        7 => [60, 40, -30],
        8 => [-25, 45, 15],
        _ => [20, -15, -25],
    }
}

/// Writes PNGs and a manifest for a small memorizable dataset:
/// `subjects x poses` identical solid-pattern images per identity plus
/// `filters` color-shifted variants of each baseline.
pub fn write_synthetic_dataset(dir: &Path, spec: &SynthSpec) -> std::io::Result<DatasetManifest> {
    assert!(spec.poses >= 1, "need at least the neutral_front pose");
    assert!(spec.filters <= FILTER_TARGETS.len());
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let mut manifest = DatasetManifest::default();
    for target in FILTER_TARGETS.iter().take(spec.filters) {
        manifest.filters.push(FilterSpec {
            filter_id: target.filter_id.to_string(),
            display_name: target.display_name.to_string(),
            source_app: target.source_app,
            category: target.category,
        });
    }

    let edge = spec.edge as u32;
    for i in 0..spec.subjects {
        let sid = subject_id(i);
        manifest.subjects.push(SubjectRecord {
            subject_id: sid.clone(),
            age: subject_age(i),
            gender: subject_gender(i),
            ethnicity: subject_ethnicity(i),
        });

        let color = subject_color(i, spec.subjects);
        let base = image::RgbImage::from_fn(edge, edge, |x, y| {
            // solid color with a thin diagonal stripe so conv layers
            // see some structure
            if (x + y) % 8 == 0 {
                image::Rgb([color[0] / 2, color[1] / 2, color[2] / 2])
            } else {
                image::Rgb(color)
            }
        });

        for pose in POSES.iter().take(spec.poses) {
            let image_id = format!("{sid}_{pose}");
            let file = format!("images/{image_id}.png");
            base.save(images_dir.join(format!("{image_id}.png")))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            manifest.images.push(ImageRecord {
                image_id,
                subject_id: sid.clone(),
                pose: pose.to_string(),
                filter_id: None,
                uri: file,
            });
        }

        for (fi, target) in FILTER_TARGETS.iter().take(spec.filters).enumerate() {
            let shift = filter_shift(fi);
            let filtered = image::RgbImage::from_fn(edge, edge, |x, y| {
                let px = base.get_pixel(x, y);
                image::Rgb([
                    (px[0] as i16 + shift[0]).clamp(0, 255) as u8,
                    (px[1] as i16 + shift[1]).clamp(0, 255) as u8,
                    (px[2] as i16 + shift[2]).clamp(0, 255) as u8,
                ])
            });
            let image_id = format!("{sid}_{}", target.filter_id);
            let file = format!("images/{image_id}.png");
            filtered
                .save(images_dir.join(format!("{image_id}.png")))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            manifest.images.push(ImageRecord {
                image_id,
                subject_id: sid.clone(),
                pose: NEUTRAL_FRONT.to_string(),
                filter_id: Some(target.filter_id.to_string()),
                uri: file,
            });
        }
    }

    manifest
        .save(&dir.join("manifest.jsonl"))
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(manifest)
}
