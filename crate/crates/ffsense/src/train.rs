//! Training: the identity recognizer end-to-end, and attribute heads
//! on frozen extracted features.
//!
//! A training run owns its network exclusively and is single-threaded,
//! so a fixed seed reproduces the run bit for bit. Batch order is a
//! pure function of the seed. Per-epoch evaluation goes through the
//! same inference engine the prediction pipeline uses, which is what
//! makes downstream analysis accuracies agree exactly with the
//! trajectory reported here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetManifest, Ethnicity, Gender, Split};
use crate::nets::checkpoint::TrainingFingerprint;
use crate::nets::graph::Network;
use crate::nets::layers::{cross_entropy_loss, mae_loss, mse_loss, Mode};
use crate::nets::{
    BackboneSpec, BridgeSpec, Checkpoint, FeatureVector, HeadKind, HeadSpec, ImageTensor,
    InferenceEngine, InputSpec, NetError, NetworkSpec, StageSpec,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: missing required key \"{0}\"")]
    MissingKey(String),
    #[error("training config: bad value for \"{key}\": {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("epochs must be >= 1")]
    ZeroEpochs,
    #[error("train split is empty")]
    EmptySplit,
    #[error("spec head has {spec} identity classes, manifest has {manifest}")]
    ClassCountMismatch { spec: usize, manifest: usize },
    #[error("{head} head cannot train with {loss} loss")]
    LossMismatch { head: String, loss: String },
    #[error("image \"{image_id}\" is not in the manifest")]
    UnknownImage { image_id: String },
    #[error("cannot load image \"{image_id}\" from {uri:?}: {reason}")]
    ImagePayload {
        image_id: String,
        uri: String,
        reason: String,
    },
    #[error("no feature vector for image \"{image_id}\"")]
    MissingFeature { image_id: String },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::nets::checkpoint::CheckpointError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    Mae,
}

impl LossKind {
    fn name(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: LossKind,
    pub seed: u64,
    pub freeze_extractor: bool,
    /// Inverse-frequency loss weighting for imbalanced classes.
    pub class_weighting: bool,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdaptiveMoment,
            loss: LossKind::CrossEntropy,
            seed: 0,
            freeze_extractor: true,
            class_weighting: false,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::ZeroEpochs);
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadValue {
                key: "batch_size".into(),
                value: "0".into(),
                reason: "must be positive".into(),
            });
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadValue {
                key: "learning_rate".into(),
                value: self.learning_rate.to_string(),
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Architecture overrides from the training config file; anything not
/// set falls back to the canonical full-size recognizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArchConfig {
    pub input_edge: Option<usize>,
    pub stem_channels: Option<usize>,
    pub stem_kernel: Option<usize>,
    pub stem_stride: Option<usize>,
    pub stem_pool: Option<bool>,
    pub stage_widths: Option<Vec<usize>>,
    pub stage_blocks: Option<Vec<usize>>,
    pub stage_strides: Option<Vec<usize>>,
    pub bridge_blocks: Option<usize>,
    pub bridge_channels: Option<usize>,
    pub bridge_scale: Option<f64>,
    pub feature_dim: Option<usize>,
    pub head_hidden: Option<Vec<usize>>,
    pub attr_hidden: Option<Vec<usize>>,
}

impl ArchConfig {
    /// Recognizer spec with these overrides applied.
    pub fn identity_spec(&self, num_identities: usize) -> Result<NetworkSpec, NetError> {
        let base = crate::nets::build_facefilternet(num_identities.max(2))?;
        let base_backbone = base.backbone.expect("canonical spec has a backbone");
        let base_bridge = base.bridge.expect("canonical spec has a bridge");
        let edge = self.input_edge.unwrap_or(crate::nets::CANONICAL_INPUT);

        let widths = self
            .stage_widths
            .clone()
            .unwrap_or_else(|| base_backbone.stages.iter().map(|s| s.width).collect());
        let blocks = self
            .stage_blocks
            .clone()
            .unwrap_or_else(|| base_backbone.stages.iter().map(|s| s.blocks).collect());
        let strides = self
            .stage_strides
            .clone()
            .unwrap_or_else(|| base_backbone.stages.iter().map(|s| s.stride).collect());
        if widths.len() != blocks.len() || widths.len() != strides.len() {
            return Err(NetError::InvalidSpec(
                "stage_widths, stage_blocks, stage_strides must have equal lengths".into(),
            ));
        }
        let stages = widths
            .iter()
            .zip(&blocks)
            .zip(&strides)
            .map(|((w, b), s)| StageSpec {
                width: *w,
                blocks: *b,
                stride: *s,
            })
            .collect();

        let spec = NetworkSpec {
            input: InputSpec::Image {
                height: edge,
                width: edge,
                channels: 3,
            },
            backbone: Some(BackboneSpec {
                stem_channels: self.stem_channels.unwrap_or(base_backbone.stem_channels),
                stem_kernel: self.stem_kernel.unwrap_or(base_backbone.stem_kernel),
                stem_stride: self.stem_stride.unwrap_or(base_backbone.stem_stride),
                stem_pool: self.stem_pool.unwrap_or(base_backbone.stem_pool),
                stages,
            }),
            bridge: Some(BridgeSpec {
                blocks: self.bridge_blocks.unwrap_or(base_bridge.blocks),
                branch_channels: self.bridge_channels.unwrap_or(base_bridge.branch_channels),
                residual_scale: self.bridge_scale.unwrap_or(base_bridge.residual_scale),
            }),
            feature_dim: self
                .feature_dim
                .unwrap_or(crate::nets::CANONICAL_FEATURE_DIM),
            head: HeadSpec {
                kind: HeadKind::IdentitySoftmax { num_identities },
                hidden: self.head_hidden.clone().unwrap_or_default(),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn attr_hidden_or_default(&self) -> Vec<usize> {
        self.attr_hidden
            .clone()
            .unwrap_or_else(|| vec![crate::nets::DEFAULT_ATTR_HIDDEN])
    }
}

/// Parsed `key = value` training config file (`#` starts a comment).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    /// Warm-start checkpoint path: its trunk tensors seed the fresh
    /// network before training (shapes must match; extra tensors are
    /// ignored).
    pub init_from: Option<String>,
    /// Canonicalized text used for the training fingerprint.
    pub canonical: String,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, TrainError> {
        let text = fs::read_to_string(path)?;
        ConfigFile::parse(&text)
    }

    pub fn parse(text: &str) -> Result<ConfigFile, TrainError> {
        let mut map = BTreeMap::new();
        for raw_line in text.lines() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| TrainError::BadValue {
                key: line.to_string(),
                value: String::new(),
                reason: "expected key = value".into(),
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }

        let required = |key: &str| -> Result<String, TrainError> {
            map.get(key)
                .cloned()
                .ok_or_else(|| TrainError::MissingKey(key.to_string()))
        };
        let parse_num = |key: &str, value: &str| -> Result<f64, TrainError> {
            value.parse::<f64>().map_err(|_| TrainError::BadValue {
                key: key.into(),
                value: value.into(),
                reason: "not a number".into(),
            })
        };

        let epochs = parse_num("epochs", &required("epochs")?)? as usize;
        let batch_size = parse_num("batch_size", &required("batch_size")?)? as usize;
        let learning_rate = parse_num("learning_rate", &required("learning_rate")?)?;
        let optimizer = match required("optimizer")?.as_str() {
            "sgd_momentum" => OptimizerKind::SgdMomentum,
            "adaptive_moment" | "adam" => OptimizerKind::AdaptiveMoment,
            other => {
                return Err(TrainError::BadValue {
                    key: "optimizer".into(),
                    value: other.into(),
                    reason: "expected sgd_momentum or adaptive_moment".into(),
                })
            }
        };
        let loss = match required("loss")?.as_str() {
            "cross_entropy" => LossKind::CrossEntropy,
            "mse" => LossKind::Mse,
            "mae" => LossKind::Mae,
            other => {
                return Err(TrainError::BadValue {
                    key: "loss".into(),
                    value: other.into(),
                    reason: "expected cross_entropy, mse, or mae".into(),
                })
            }
        };
        let seed = parse_num("seed", &required("seed")?)? as u64;

        let parse_bool = |key: &str| -> Result<Option<bool>, TrainError> {
            map.get(key)
                .map(|v| match v.as_str() {
                    "true" | "1" => Ok(true),
                    "false" | "0" => Ok(false),
                    other => Err(TrainError::BadValue {
                        key: key.into(),
                        value: other.into(),
                        reason: "expected true or false".into(),
                    }),
                })
                .transpose()
        };
        let parse_usize = |key: &str| -> Result<Option<usize>, TrainError> {
            map.get(key)
                .map(|v| {
                    v.parse::<usize>().map_err(|_| TrainError::BadValue {
                        key: key.into(),
                        value: v.clone(),
                        reason: "not an integer".into(),
                    })
                })
                .transpose()
        };
        let parse_list = |key: &str| -> Result<Option<Vec<usize>>, TrainError> {
            map.get(key)
                .map(|v| {
                    if v.is_empty() {
                        return Ok(Vec::new());
                    }
                    v.split(',')
                        .map(|part| {
                            part.trim()
                                .parse::<usize>()
                                .map_err(|_| TrainError::BadValue {
                                    key: key.into(),
                                    value: v.clone(),
                                    reason: "expected comma-separated integers".into(),
                                })
                        })
                        .collect()
                })
                .transpose()
        };

        let train = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            optimizer,
            loss,
            seed,
            freeze_extractor: parse_bool("freeze_extractor")?.unwrap_or(true),
            class_weighting: parse_bool("class_weighting")?.unwrap_or(false),
            momentum: map
                .get("momentum")
                .map(|v| parse_num("momentum", v))
                .transpose()?
                .unwrap_or(0.9),
        };
        train.validate()?;

        let arch = ArchConfig {
            input_edge: parse_usize("arch_input_edge")?,
            stem_channels: parse_usize("arch_stem_channels")?,
            stem_kernel: parse_usize("arch_stem_kernel")?,
            stem_stride: parse_usize("arch_stem_stride")?,
            stem_pool: parse_bool("arch_stem_pool")?,
            stage_widths: parse_list("arch_stage_widths")?,
            stage_blocks: parse_list("arch_stage_blocks")?,
            stage_strides: parse_list("arch_stage_strides")?,
            bridge_blocks: parse_usize("arch_bridge_blocks")?,
            bridge_channels: parse_usize("arch_bridge_channels")?,
            bridge_scale: map
                .get("arch_bridge_scale")
                .map(|v| parse_num("arch_bridge_scale", v))
                .transpose()?,
            feature_dim: parse_usize("arch_feature_dim")?,
            head_hidden: parse_list("head_hidden")?,
            attr_hidden: parse_list("attr_hidden")?,
        };

        let canonical = map
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(ConfigFile {
            train,
            arch,
            init_from: map.get("init_from").cloned(),
            canonical,
        })
    }

    pub fn fingerprint(&self) -> TrainingFingerprint {
        let digest = Sha256::digest(self.canonical.as_bytes());
        TrainingFingerprint {
            seed: self.train.seed,
            config_hash: digest.iter().map(|b| format!("{b:02x}")).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum OptState {
    Sgd {
        velocity: Vec<ArrayD<f64>>,
    },
    Adam {
        m: Vec<ArrayD<f64>>,
        v: Vec<ArrayD<f64>>,
        t: usize,
    },
}

pub struct Optimizer {
    lr: f64,
    momentum: f64,
    state: OptState,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Optimizer {
        Optimizer {
            lr,
            momentum,
            state: match kind {
                OptimizerKind::SgdMomentum => OptState::Sgd {
                    velocity: Vec::new(),
                },
                OptimizerKind::AdaptiveMoment => OptState::Adam {
                    m: Vec::new(),
                    v: Vec::new(),
                    t: 0,
                },
            },
        }
    }

    /// Applies accumulated gradients; parameter visit order must stay
    /// stable across steps.
    pub fn step(&mut self, net: &mut Network) {
        let lr = self.lr;
        let momentum = self.momentum;
        match &mut self.state {
            OptState::Sgd { velocity } => {
                let mut idx = 0;
                net.for_each_param(&mut |p| {
                    if velocity.len() <= idx {
                        velocity.push(ArrayD::zeros(p.value.raw_dim()));
                    }
                    let v = &mut velocity[idx];
                    ndarray::Zip::from(v.view_mut())
                        .and(&p.grad)
                        .for_each(|v, g| *v = momentum * *v - lr * g);
                    p.value += &*v;
                    idx += 1;
                });
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let t_now = *t as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t_now);
                let bias2 = 1.0 - ADAM_BETA2.powi(t_now);
                let mut idx = 0;
                net.for_each_param(&mut |p| {
                    if m.len() <= idx {
                        m.push(ArrayD::zeros(p.value.raw_dim()));
                        v.push(ArrayD::zeros(p.value.raw_dim()));
                    }
                    let (m_i, v_i) = (&mut m[idx], &mut v[idx]);
                    ndarray::Zip::from(m_i.view_mut())
                        .and(&p.grad)
                        .for_each(|m, g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
                    ndarray::Zip::from(v_i.view_mut())
                        .and(&p.grad)
                        .for_each(|v, g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
                    ndarray::Zip::from(&mut p.value)
                        .and(&*m_i)
                        .and(&*v_i)
                        .for_each(|w, m, v| {
                            *w -= lr * (m / bias1) / ((v / bias2).sqrt() + ADAM_EPS);
                        });
                    idx += 1;
                });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Image loading
// ---------------------------------------------------------------------------

/// Loads manifest images by id, decoded and bilinearly resized to the
/// target shape, values scaled to [0,1].
pub fn load_images(
    manifest: &DatasetManifest,
    base_dir: &Path,
    ids: &[String],
    target_hw: (usize, usize),
) -> Result<BTreeMap<String, ImageTensor>, TrainError> {
    let mut out = BTreeMap::new();
    for id in ids {
        let record = manifest.image(id).ok_or_else(|| TrainError::UnknownImage {
            image_id: id.clone(),
        })?;
        let path = base_dir.join(&record.uri);
        let decoded = image::open(&path).map_err(|e| TrainError::ImagePayload {
            image_id: id.clone(),
            uri: record.uri.clone(),
            reason: e.to_string(),
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data: Vec<f32> = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        let tensor = ImageTensor::new(h as usize, w as usize, 3, data).map_err(|e| {
            TrainError::ImagePayload {
                image_id: id.clone(),
                uri: record.uri.clone(),
                reason: e.to_string(),
            }
        })?;
        out.insert(id.clone(), tensor.resize(target_hw.0, target_hw.1));
    }
    Ok(out)
}

fn images_to_batch(images: &[&ImageTensor]) -> Array4<f64> {
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (b, img) in images.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[b, ch, y, x]] = img.get(y, x, ch) as f64;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub test_metric: Option<f64>,
}

/// Loss/metric trajectory of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// "accuracy" for classifiers, "mae" for the age head.
    pub metric_name: String,
    pub epochs: Vec<EpochStats>,
    pub final_train_metric: f64,
    pub final_test_metric: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self).map_err(std::io::Error::from)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Identity training
// ---------------------------------------------------------------------------

/// Trains the recognizer end-to-end on the train split and evaluates
/// both splits through the inference engine after every epoch.
pub fn train_identity(
    manifest: &DatasetManifest,
    split: &Split,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    base_dir: &Path,
    fingerprint: TrainingFingerprint,
    warm_start: Option<&Checkpoint>,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if cfg.loss != LossKind::CrossEntropy {
        return Err(TrainError::LossMismatch {
            head: "identity_softmax".into(),
            loss: cfg.loss.name().into(),
        });
    }
    let labels = manifest.identity_classes();
    match spec.head.kind {
        HeadKind::IdentitySoftmax { num_identities } if num_identities == labels.len() => {}
        HeadKind::IdentitySoftmax { num_identities } => {
            return Err(TrainError::ClassCountMismatch {
                spec: num_identities,
                manifest: labels.len(),
            })
        }
        _ => {
            return Err(TrainError::LossMismatch {
                head: spec.head.kind.name().into(),
                loss: cfg.loss.name().into(),
            })
        }
    }

    let start = Instant::now();
    let (h, w, _) = spec
        .input_image_shape()
        .expect("identity spec takes images");
    let class_of: BTreeMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut all_ids = split.train.clone();
    all_ids.extend(split.test.iter().cloned());
    let images = load_images(manifest, base_dir, &all_ids, (h, w))?;
    let label_of = |id: &str| -> usize {
        let subject = &manifest
            .image(id)
            .expect("loaded image is in manifest")
            .subject_id;
        class_of[subject.as_str()]
    };

    let class_weights = cfg.class_weighting.then(|| {
        let mut counts = vec![0usize; labels.len()];
        for id in &split.train {
            counts[label_of(id)] += 1;
        }
        inverse_frequency_weights(&counts)
    });

    let mut net = Network::init(spec, cfg.seed)?;
    if let Some(start) = warm_start {
        net.import_matching(&start.tensors);
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<&str> = split.train.iter().map(|s| s.as_str()).collect();
    order.sort_unstable();

    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tensors: Vec<&ImageTensor> = chunk.iter().map(|id| &images[*id]).collect();
            let x = images_to_batch(&tensors);
            let y: Vec<usize> = chunk.iter().map(|id| label_of(id)).collect();
            let logits = net.forward_images(&x, Mode::Train);
            let (loss, grad) = cross_entropy_loss(&logits, &y, class_weights.as_deref());
            net.zero_grads();
            net.backward_images(&grad);
            optimizer.step(&mut net);
            loss_sum += loss;
            batches += 1;
        }

        let ckpt = Checkpoint::from_network(&mut net, fingerprint.clone(), labels.clone());
        let engine = InferenceEngine::compile(&ckpt)?;
        let train_metric = identity_accuracy(&engine, &images, &split.train, &label_of)?;
        let test_metric = if split.test.is_empty() {
            None
        } else {
            Some(identity_accuracy(&engine, &images, &split.test, &label_of)?)
        };
        epoch_stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_metric,
            test_metric,
        });
    }

    let checkpoint = Checkpoint::from_network(&mut net, fingerprint, labels);
    let last = epoch_stats.last().expect("epochs >= 1");
    let report = TrainReport {
        metric_name: "accuracy".into(),
        final_train_metric: last.train_metric,
        final_test_metric: last.test_metric,
        epochs: epoch_stats,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}

fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .map(|c| {
            if *c == 0 {
                0.0
            } else {
                total as f64 / (k * *c as f64)
            }
        })
        .collect()
}

fn identity_accuracy(
    engine: &InferenceEngine,
    images: &BTreeMap<String, ImageTensor>,
    ids: &[String],
    label_of: &dyn Fn(&str) -> usize,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut scratch = crate::nets::infer::Scratch::new();
    for id in ids {
        let dist = engine.predict_identity_with(&images[id], &mut scratch)?;
        if dist.argmax() == label_of(id) {
            correct += 1;
        }
    }
    Ok(correct as f64 / ids.len() as f64)
}

// ---------------------------------------------------------------------------
// Feature extraction and caching
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CacheIndex {
    checkpoint: String,
    feature_dim: usize,
    entries: BTreeMap<String, String>,
}

fn feature_file_name(image_id: &str) -> String {
    let digest = Sha256::digest(image_id.as_bytes());
    let short: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{short}.fvec")
}

/// Extracts (or loads from cache) one feature vector per image id.
///
/// The cache directory is keyed by the checkpoint's content hash, so a
/// retrained model never collides with stale vectors; repeated calls
/// return byte-identical vectors read back from disk.
pub fn precompute_features(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    ids: &[String],
    base_dir: &Path,
    cache_dir: Option<&Path>,
) -> Result<BTreeMap<String, FeatureVector>, TrainError> {
    let engine = InferenceEngine::compile(checkpoint)?;
    let (h, w, _) = checkpoint
        .spec
        .input_image_shape()
        .ok_or_else(|| NetError::InvalidSpec("feature extractor must take images".into()))?;

    let cache_root = match cache_dir {
        Some(dir) => {
            let hash = checkpoint.content_hash()?;
            let root = dir.join(&hash[..16]);
            fs::create_dir_all(&root)?;
            Some(root)
        }
        None => None,
    };

    let mut out = BTreeMap::new();
    let mut entries = BTreeMap::new();
    let mut scratch = crate::nets::infer::Scratch::new();
    for id in ids {
        let file = cache_root
            .as_ref()
            .map(|root| root.join(feature_file_name(id)));
        if let Some(path) = &file {
            if path.exists() {
                let bytes = fs::read(path)?;
                if bytes.len() % 8 != 0 {
                    return Err(TrainError::Cache(format!(
                        "feature file for \"{id}\" has odd length {}",
                        bytes.len()
                    )));
                }
                let values: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                entries.insert(id.clone(), feature_file_name(id));
                out.insert(id.clone(), FeatureVector::new(values)?);
                continue;
            }
        }
        let images = load_images(manifest, base_dir, std::slice::from_ref(id), (h, w))?;
        let features = engine.extract_features_with(&images[id], &mut scratch)?;
        if let Some(path) = &file {
            let mut bytes = Vec::with_capacity(features.len() * 8);
            for v in features.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(path, bytes)?;
            entries.insert(id.clone(), feature_file_name(id));
        }
        out.insert(id.clone(), features);
    }

    if let Some(root) = &cache_root {
        let index_path = root.join("index.json");
        let mut merged = entries;
        if index_path.exists() {
            if let Ok(prev) = serde_json::from_slice::<CacheIndex>(&fs::read(&index_path)?) {
                for (k, v) in prev.entries {
                    merged.entry(k).or_insert(v);
                }
            }
        }
        let index = CacheIndex {
            checkpoint: checkpoint.content_hash()?,
            feature_dim: checkpoint.spec.feature_dim,
            entries: merged,
        };
        fs::write(
            &index_path,
            serde_json::to_vec_pretty(&index).map_err(std::io::Error::from)?,
        )?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attribute heads
// ---------------------------------------------------------------------------

/// Ground-truth labels for one attribute task, keyed by image id.
#[derive(Debug, Clone, PartialEq)]
pub enum AttributeLabels {
    Age(Vec<(String, f64)>),
    Gender(Vec<(String, Gender)>),
    Ethnicity(Vec<(String, Ethnicity)>),
}

impl AttributeLabels {
    pub fn kind(&self) -> HeadKind {
        match self {
            AttributeLabels::Age(_) => HeadKind::AgeRegression,
            AttributeLabels::Gender(_) => HeadKind::GenderSoftmax,
            AttributeLabels::Ethnicity(_) => HeadKind::EthnicitySoftmax,
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            AttributeLabels::Age(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
            AttributeLabels::Gender(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
            AttributeLabels::Ethnicity(v) => v.iter().map(|(id, _)| id.as_str()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AttributeLabels::Age(v) => v.len(),
            AttributeLabels::Gender(v) => v.len(),
            AttributeLabels::Ethnicity(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels for `ids` pulled from each image's subject record.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        ids: &[String],
        kind: &HeadKind,
    ) -> Result<AttributeLabels, TrainError> {
        let subject_of = |id: &String| -> Result<&crate::dataset::SubjectRecord, TrainError> {
            let image = manifest.image(id).ok_or_else(|| TrainError::UnknownImage {
                image_id: id.clone(),
            })?;
            manifest
                .subject(&image.subject_id)
                .ok_or_else(|| TrainError::UnknownImage {
                    image_id: image.subject_id.clone(),
                })
        };
        Ok(match kind {
            HeadKind::AgeRegression => AttributeLabels::Age(
                ids.iter()
                    .map(|id| Ok((id.clone(), subject_of(id)?.age as f64)))
                    .collect::<Result<_, TrainError>>()?,
            ),
            HeadKind::GenderSoftmax => AttributeLabels::Gender(
                ids.iter()
                    .map(|id| Ok((id.clone(), subject_of(id)?.gender)))
                    .collect::<Result<_, TrainError>>()?,
            ),
            HeadKind::EthnicitySoftmax => AttributeLabels::Ethnicity(
                ids.iter()
                    .map(|id| Ok((id.clone(), subject_of(id)?.ethnicity)))
                    .collect::<Result<_, TrainError>>()?,
            ),
            HeadKind::IdentitySoftmax { .. } => {
                return Err(TrainError::LossMismatch {
                    head: "identity_softmax".into(),
                    loss: "attribute labels".into(),
                })
            }
        })
    }

    fn class_indices(&self) -> Option<Vec<usize>> {
        match self {
            AttributeLabels::Age(_) => None,
            AttributeLabels::Gender(v) => Some(v.iter().map(|(_, g)| g.class_index()).collect()),
            AttributeLabels::Ethnicity(v) => Some(v.iter().map(|(_, e)| e.class_index()).collect()),
        }
    }

    fn ages(&self) -> Option<Vec<f64>> {
        match self {
            AttributeLabels::Age(v) => Some(v.iter().map(|(_, a)| *a).collect()),
            _ => None,
        }
    }
}

fn feature_matrix(
    features: &BTreeMap<String, FeatureVector>,
    ids: &[&str],
) -> Result<Array2<f64>, TrainError> {
    let first = features
        .get(ids[0])
        .ok_or_else(|| TrainError::MissingFeature {
            image_id: ids[0].to_string(),
        })?;
    let dim = first.len();
    let mut out = Array2::zeros((ids.len(), dim));
    for (row, id) in ids.iter().enumerate() {
        let f = features
            .get(*id)
            .ok_or_else(|| TrainError::MissingFeature {
                image_id: id.to_string(),
            })?;
        for (col, v) in f.values().iter().enumerate() {
            out[[row, col]] = *v;
        }
    }
    Ok(out)
}

/// Trains one attribute head on frozen features. The extractor is
/// never touched: only its outputs are consumed.
pub fn train_attribute_head(
    features: &BTreeMap<String, FeatureVector>,
    labels: &AttributeLabels,
    hidden: Vec<usize>,
    cfg: &TrainConfig,
    eval: Option<(&BTreeMap<String, FeatureVector>, &AttributeLabels)>,
    fingerprint: TrainingFingerprint,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let kind = labels.kind();
    match (&kind, cfg.loss) {
        (HeadKind::AgeRegression, LossKind::Mse | LossKind::Mae) => {}
        (HeadKind::GenderSoftmax | HeadKind::EthnicitySoftmax, LossKind::CrossEntropy) => {}
        _ => {
            return Err(TrainError::LossMismatch {
                head: kind.name().into(),
                loss: cfg.loss.name().into(),
            })
        }
    }

    let start = Instant::now();
    let ids = labels.ids();
    let x_all = feature_matrix(features, &ids)?;
    let feature_dim = x_all.ncols();
    let spec = NetworkSpec::attribute_head(kind.clone(), feature_dim, hidden);
    let mut net = Network::init(&spec, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let class_targets = labels.class_indices();
    let age_targets = labels.ages();
    let class_weights = match (&class_targets, cfg.class_weighting) {
        (Some(targets), true) => {
            let mut counts = vec![0usize; kind.output_width()];
            for t in targets {
                counts[*t] += 1;
            }
            Some(inverse_frequency_weights(&counts))
        }
        _ => None,
    };

    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), feature_dim));
            for (row, idx) in chunk.iter().enumerate() {
                x.row_mut(row).assign(&x_all.row(*idx));
            }
            let out = net.forward_features(&x);
            let (loss, grad) = match (&class_targets, &age_targets, cfg.loss) {
                (Some(targets), _, LossKind::CrossEntropy) => {
                    let y: Vec<usize> = chunk.iter().map(|i| targets[*i]).collect();
                    cross_entropy_loss(&out, &y, class_weights.as_deref())
                }
                (_, Some(ages), LossKind::Mse) => {
                    let y: Vec<f64> = chunk.iter().map(|i| ages[*i]).collect();
                    mse_loss(&out, &y)
                }
                (_, Some(ages), LossKind::Mae) => {
                    let y: Vec<f64> = chunk.iter().map(|i| ages[*i]).collect();
                    mae_loss(&out, &y)
                }
                _ => unreachable!("loss/head combination validated above"),
            };
            net.zero_grads();
            net.backward_features(&grad);
            optimizer.step(&mut net);
            loss_sum += loss;
            batches += 1;
        }

        let train_metric = attribute_metric(&mut net, &x_all, labels)?;
        let test_metric = match eval {
            Some((eval_features, eval_labels)) => {
                let eval_ids = eval_labels.ids();
                let x_eval = feature_matrix(eval_features, &eval_ids)?;
                Some(attribute_metric(&mut net, &x_eval, eval_labels)?)
            }
            None => None,
        };
        epoch_stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_metric,
            test_metric,
        });
    }

    let checkpoint = Checkpoint::from_network(&mut net, fingerprint, vec![]);
    let last = epoch_stats.last().expect("epochs >= 1");
    let report = TrainReport {
        metric_name: if kind.is_classification() {
            "accuracy"
        } else {
            "mae"
        }
        .into(),
        final_train_metric: last.train_metric,
        final_test_metric: last.test_metric,
        epochs: epoch_stats,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}

fn attribute_metric(
    net: &mut Network,
    x: &Array2<f64>,
    labels: &AttributeLabels,
) -> Result<f64, TrainError> {
    let out = net.forward_features(x);
    Ok(match labels {
        AttributeLabels::Age(pairs) => {
            let mut total = 0.0;
            for (row, (_, age)) in pairs.iter().enumerate() {
                let pred = out[[row, 0]].clamp(crate::nets::AGE_CLAMP.0, crate::nets::AGE_CLAMP.1);
                total += (pred - age).abs();
            }
            total / pairs.len() as f64
        }
        AttributeLabels::Gender(_) | AttributeLabels::Ethnicity(_) => {
            let targets = labels.class_indices().expect("classification labels");
            let mut correct = 0usize;
            for (row, target) in targets.iter().enumerate() {
                let mut best = 0;
                for col in 0..out.ncols() {
                    if out[[row, col]] > out[[row, best]] {
                        best = col;
                    }
                }
                if best == *target {
                    correct += 1;
                }
            }
            correct as f64 / targets.len() as f64
        }
    })
}

/// Joint fine-tuning of a copy of the extractor with a fresh attribute
/// head (the `freeze_extractor = false` path). Returns a standalone
/// image-to-attribute network.
pub fn train_attribute_finetune(
    extractor: &Checkpoint,
    manifest: &DatasetManifest,
    labels: &AttributeLabels,
    hidden: Vec<usize>,
    cfg: &TrainConfig,
    base_dir: &Path,
    fingerprint: TrainingFingerprint,
) -> Result<(Checkpoint, TrainReport), TrainError> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let kind = labels.kind();
    match (&kind, cfg.loss) {
        (HeadKind::AgeRegression, LossKind::Mse | LossKind::Mae) => {}
        (HeadKind::GenderSoftmax | HeadKind::EthnicitySoftmax, LossKind::CrossEntropy) => {}
        _ => {
            return Err(TrainError::LossMismatch {
                head: kind.name().into(),
                loss: cfg.loss.name().into(),
            })
        }
    }

    let start = Instant::now();
    let mut spec = extractor.spec.clone();
    spec.head = HeadSpec {
        kind: kind.clone(),
        hidden,
    };
    spec.validate()?;
    let (h, w, _) = spec.input_image_shape().expect("extractor takes images");

    let ids: Vec<String> = labels.ids().iter().map(|s| s.to_string()).collect();
    let images = load_images(manifest, base_dir, &ids, (h, w))?;

    let mut net = Network::init(&spec, cfg.seed)?;
    net.import_matching(&extractor.tensors); // trunk from the checkpoint, fresh head
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let class_targets = labels.class_indices();
    let age_targets = labels.ages();
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let tensors: Vec<&ImageTensor> = chunk.iter().map(|i| &images[&ids[*i]]).collect();
            let x = images_to_batch(&tensors);
            let out = net.forward_images(&x, Mode::Train);
            let (loss, grad) = match (&class_targets, &age_targets, cfg.loss) {
                (Some(targets), _, LossKind::CrossEntropy) => {
                    let y: Vec<usize> = chunk.iter().map(|i| targets[*i]).collect();
                    cross_entropy_loss(&out, &y, None)
                }
                (_, Some(ages), LossKind::Mse) => {
                    let y: Vec<f64> = chunk.iter().map(|i| ages[*i]).collect();
                    mse_loss(&out, &y)
                }
                (_, Some(ages), LossKind::Mae) => {
                    let y: Vec<f64> = chunk.iter().map(|i| ages[*i]).collect();
                    mae_loss(&out, &y)
                }
                _ => unreachable!("loss/head combination validated above"),
            };
            net.zero_grads();
            net.backward_images(&grad);
            optimizer.step(&mut net);
            loss_sum += loss;
            batches += 1;
        }
        epoch_stats.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_metric: f64::NAN,
            test_metric: None,
        });
    }

    // Final train metric via the engine path.
    let checkpoint = Checkpoint::from_network(&mut net, fingerprint, vec![]);
    let engine = InferenceEngine::compile(&checkpoint)?;
    let mut scratch = crate::nets::infer::Scratch::new();
    let final_train_metric = match labels {
        AttributeLabels::Age(pairs) => {
            let mut total = 0.0;
            for (id, age) in pairs {
                let out = engine.logits_with(&images[id], &mut scratch)?;
                let pred = out[0].clamp(crate::nets::AGE_CLAMP.0, crate::nets::AGE_CLAMP.1);
                total += (pred - age).abs();
            }
            total / pairs.len() as f64
        }
        _ => {
            let targets = labels.class_indices().expect("classification labels");
            let mut correct = 0usize;
            for (idx, id) in ids.iter().enumerate() {
                let out = engine.logits_with(&images[id], &mut scratch)?;
                let mut best = 0;
                for (col, v) in out.iter().enumerate() {
                    if *v > out[best] {
                        best = col;
                    }
                }
                if best == targets[idx] {
                    correct += 1;
                }
            }
            correct as f64 / ids.len() as f64
        }
    };
    for stats in &mut epoch_stats {
        if stats.train_metric.is_nan() {
            stats.train_metric = final_train_metric;
        }
    }

    let report = TrainReport {
        metric_name: if kind.is_classification() {
            "accuracy"
        } else {
            "mae"
        }
        .into(),
        final_train_metric,
        final_test_metric: None,
        epochs: epoch_stats,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((checkpoint, report))
}
