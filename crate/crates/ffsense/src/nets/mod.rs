//! Declarative network construction, inference, and checkpointing.
//!
//! A [`NetworkSpec`] fully describes an architecture: a residual CNN
//! backbone, an inception-style residual bridge block, a pooled feature
//! vector, and one task head. The same spec drives two executions: the
//! f64 training graph in [`graph`] and the optimized f32 inference
//! engine in [`infer`]. [`Checkpoint`] binds a spec to trained weights
//! and round-trips through an integrity-hashed container file.

pub mod checkpoint;
pub mod graph;
pub mod infer;
pub mod layers;
pub mod winograd;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingFingerprint};
pub use infer::InferenceEngine;

/// Grows a scratch buffer to at least `len` without ever shrinking, so
/// steady-state reuse never re-zeroes memory.
pub(crate) fn ensure_len(buf: &mut Vec<f32>, len: usize) {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("need at least 2 identity classes, got {0}")]
    TooFewClasses(usize),
    #[error(
        "expected image input {expected_h}x{expected_w}x{expected_c}, got {got_h}x{got_w}x{got_c}"
    )]
    BadImageShape {
        expected_h: usize,
        expected_w: usize,
        expected_c: usize,
        got_h: usize,
        got_w: usize,
        got_c: usize,
    },
    #[error("image values must lie in [0,1] and be finite")]
    BadImageValues,
    #[error("operation needs a {expected} head, checkpoint has {got}")]
    WrongHead { expected: String, got: String },
    #[error("head input width {head} does not match feature dim {features}")]
    HeadDimensionMismatch { head: usize, features: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("probability vector invalid: {0}")]
    BadDistribution(String),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

/// What the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputSpec {
    /// H x W x 3 image in [0,1].
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    /// A precomputed feature vector (attribute heads).
    Features { dim: usize },
}

/// One residual stage: `blocks` bottleneck blocks at `width` internal
/// channels (output channels are `4 * width`); the first block applies
/// `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Residual CNN trunk: stem convolution, optional stem max-pool, then
/// bottleneck stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stages: Vec<StageSpec>,
}

impl BackboneSpec {
    /// Channel count leaving the final stage.
    pub fn out_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem_channels, |s| s.width * 4)
    }
}

/// Inception-style residual bridge inserted after the backbone's final
/// stage: a 1x1 branch plus a 1x1 -> 1x7 -> 7x1 branch, concatenated,
/// projected back with a 1x1 convolution, and residual-added with
/// `residual_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub blocks: usize,
    pub branch_channels: usize,
    pub residual_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    IdentitySoftmax { num_identities: usize },
    AgeRegression,
    GenderSoftmax,
    EthnicitySoftmax,
}

impl HeadKind {
    pub fn output_width(&self) -> usize {
        match self {
            HeadKind::IdentitySoftmax { num_identities } => *num_identities,
            HeadKind::AgeRegression => 1,
            HeadKind::GenderSoftmax => 2,
            HeadKind::EthnicitySoftmax => 4,
        }
    }

    pub fn is_classification(&self) -> bool {
        !matches!(self, HeadKind::AgeRegression)
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::IdentitySoftmax { .. } => "identity_softmax",
            HeadKind::AgeRegression => "age_regression",
            HeadKind::GenderSoftmax => "gender_softmax",
            HeadKind::EthnicitySoftmax => "ethnicity_softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Widths of dense hidden layers between the features and the
    /// output layer.
    pub hidden: Vec<usize>,
}

/// Complete declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub backbone: Option<BackboneSpec>,
    pub bridge: Option<BridgeSpec>,
    pub feature_dim: usize,
    pub head: HeadSpec,
}

/// Canonical recognizer input edge (pixels).
pub const CANONICAL_INPUT: usize = 256;
/// Canonical pooled feature width.
pub const CANONICAL_FEATURE_DIM: usize = 2048;
pub const DEFAULT_BRIDGE_SCALE: f64 = 0.1;
pub const DEFAULT_BRIDGE_CHANNELS: usize = 128;
/// Default hidden width for attribute heads.
pub const DEFAULT_ATTR_HIDDEN: usize = 256;

impl NetworkSpec {
    /// Validates internal consistency (widths, stage shapes, head).
    pub fn validate(&self) -> Result<(), NetError> {
        match self.input {
            InputSpec::Image {
                height,
                width,
                channels,
            } => {
                if height == 0 || width == 0 || channels == 0 {
                    return Err(NetError::InvalidSpec("zero image dimension".into()));
                }
                let backbone = self.backbone.as_ref().ok_or_else(|| {
                    NetError::InvalidSpec("image input requires a backbone".into())
                })?;
                if backbone.stages.is_empty() {
                    return Err(NetError::InvalidSpec(
                        "backbone needs at least one stage".into(),
                    ));
                }
                if backbone.stem_kernel == 0 || backbone.stem_stride == 0 {
                    return Err(NetError::InvalidSpec("zero stem kernel or stride".into()));
                }
            }
            InputSpec::Features { dim } => {
                if dim == 0 {
                    return Err(NetError::InvalidSpec("zero feature input".into()));
                }
                if self.backbone.is_some() || self.bridge.is_some() {
                    return Err(NetError::InvalidSpec(
                        "feature input cannot carry a backbone or bridge".into(),
                    ));
                }
                if dim != self.feature_dim {
                    return Err(NetError::InvalidSpec(format!(
                        "feature input dim {dim} != feature_dim {}",
                        self.feature_dim
                    )));
                }
            }
        }
        if self.feature_dim == 0 {
            return Err(NetError::InvalidSpec("zero feature_dim".into()));
        }
        if let HeadKind::IdentitySoftmax { num_identities } = self.head.kind {
            if num_identities < 2 {
                return Err(NetError::TooFewClasses(num_identities));
            }
        }
        Ok(())
    }

    /// Spec for an attribute head operating on extracted features.
    pub fn attribute_head(kind: HeadKind, feature_dim: usize, hidden: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            input: InputSpec::Features { dim: feature_dim },
            backbone: None,
            bridge: None,
            feature_dim,
            head: HeadSpec { kind, hidden },
        }
    }

    pub fn input_image_shape(&self) -> Option<(usize, usize, usize)> {
        match self.input {
            InputSpec::Image {
                height,
                width,
                channels,
            } => Some((height, width, channels)),
            InputSpec::Features { .. } => None,
        }
    }
}

/// The canonical recognizer: a 50-layer bottleneck residual backbone
/// (3/4/6/3 blocks at widths 64/128/256/512), one inception-residual
/// bridge block, a 2048-wide pooled feature vector, and a softmax head
/// over `num_identities` classes.
pub fn build_facefilternet(num_identities: usize) -> Result<NetworkSpec, NetError> {
    if num_identities < 2 {
        return Err(NetError::TooFewClasses(num_identities));
    }
    let spec = NetworkSpec {
        input: InputSpec::Image {
            height: CANONICAL_INPUT,
            width: CANONICAL_INPUT,
            channels: 3,
        },
        backbone: Some(BackboneSpec {
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stages: vec![
                StageSpec {
                    width: 64,
                    blocks: 3,
                    stride: 1,
                },
                StageSpec {
                    width: 128,
                    blocks: 4,
                    stride: 2,
                },
                StageSpec {
                    width: 256,
                    blocks: 6,
                    stride: 2,
                },
                StageSpec {
                    width: 512,
                    blocks: 3,
                    stride: 2,
                },
            ],
        }),
        bridge: Some(BridgeSpec {
            blocks: 1,
            branch_channels: DEFAULT_BRIDGE_CHANNELS,
            residual_scale: DEFAULT_BRIDGE_SCALE,
        }),
        feature_dim: CANONICAL_FEATURE_DIM,
        head: HeadSpec {
            kind: HeadKind::IdentitySoftmax { num_identities },
            hidden: vec![],
        },
    };
    spec.validate()?;
    Ok(spec)
}

/// A small recognizer spec for tests and synthetic-data smoke training.
pub fn build_tiny_recognizer(
    num_identities: usize,
    input_edge: usize,
    feature_dim: usize,
) -> Result<NetworkSpec, NetError> {
    if num_identities < 2 {
        return Err(NetError::TooFewClasses(num_identities));
    }
    let spec = NetworkSpec {
        input: InputSpec::Image {
            height: input_edge,
            width: input_edge,
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
            residual_scale: DEFAULT_BRIDGE_SCALE,
        }),
        feature_dim,
        head: HeadSpec {
            kind: HeadKind::IdentitySoftmax { num_identities },
            hidden: vec![],
        },
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Inference value types
// ---------------------------------------------------------------------------

/// Softmax probability vector over enrolled identity classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityDistribution(Vec<f64>);

impl IdentityDistribution {
    /// Validates non-negativity and normalization (sum within 1e-5 of 1).
    pub fn new(probs: Vec<f64>) -> Result<Self, NetError> {
        if probs.is_empty() {
            return Err(NetError::BadDistribution("empty vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(NetError::BadDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(NetError::BadDistribution(format!(
                "sum {sum} not within 1e-5 of 1"
            )));
        }
        Ok(IdentityDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties break toward the lowest
    /// class index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.0.iter().enumerate() {
            if *p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Pooled trunk activations (the shared face representation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NetError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NetError::BadDistribution("non-finite feature entry".into()));
        }
        Ok(FeatureVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Combined attribute estimate for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    /// Years, clamped to [0, 120].
    pub age: f64,
    /// male, female.
    pub gender_probs: Vec<f64>,
    /// east_asian, west_asian, black, white.
    pub ethnicity_probs: Vec<f64>,
}

pub const AGE_CLAMP: (f64, f64) = (0.0, 120.0);

/// H x W x C image with values in [0,1], laid out row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, NetError> {
        if data.len() != height * width * channels {
            return Err(NetError::BadImageValues);
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(NetError::BadImageValues);
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Checks the image against a spec's declared input shape.
    pub fn check_shape(&self, spec: &NetworkSpec) -> Result<(), NetError> {
        let (h, w, c) = spec
            .input_image_shape()
            .ok_or_else(|| NetError::InvalidSpec("spec takes features, not images".into()))?;
        if (self.height, self.width, self.channels) != (h, w, c) {
            return Err(NetError::BadImageShape {
                expected_h: h,
                expected_w: w,
                expected_c: c,
                got_h: self.height,
                got_w: self.width,
                got_c: self.channels,
            });
        }
        Ok(())
    }

    /// Bilinear resize (align-corners=false convention).
    pub fn resize(&self, out_h: usize, out_w: usize) -> ImageTensor {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let mut data = vec![0f32; out_h * out_w * self.channels];
        let scale_y = self.height as f32 / out_h as f32;
        let scale_x = self.width as f32 / out_w as f32;
        for oy in 0..out_h {
            let sy = ((oy as f32 + 0.5) * scale_y - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = sy - y0 as f32;
            for ox in 0..out_w {
                let sx = ((ox as f32 + 0.5) * scale_x - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = sx - x0 as f32;
                for c in 0..self.channels {
                    let v00 = self.get(y0, x0, c);
                    let v01 = self.get(y0, x1, c);
                    let v10 = self.get(y1, x0, c);
                    let v11 = self.get(y1, x1, c);
                    let top = v00 + (v01 - v00) * fx;
                    let bottom = v10 + (v11 - v10) * fx;
                    data[(oy * out_w + ox) * self.channels + c] = top + (bottom - top) * fy;
                }
            }
        }
        ImageTensor {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        }
    }

    /// CHW-ordered copy for the inference engine.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = vec![0f32; self.data.len()];
        let hw = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[c * hw + y * self.width + x] = self.get(y, x, c);
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Checkpoint-level operations
// ---------------------------------------------------------------------------

/// Runs the identity head on one image.
pub fn predict_identity(
    checkpoint: &Checkpoint,
    image: &ImageTensor,
) -> Result<IdentityDistribution, NetError> {
    if !matches!(checkpoint.spec.head.kind, HeadKind::IdentitySoftmax { .. }) {
        return Err(NetError::WrongHead {
            expected: "identity_softmax".into(),
            got: checkpoint.spec.head.kind.name().into(),
        });
    }
    let engine = InferenceEngine::compile(checkpoint)?;
    engine.predict_identity(image)
}

/// Runs the trunk only, returning the pooled feature vector.
pub fn extract_features(
    checkpoint: &Checkpoint,
    image: &ImageTensor,
) -> Result<FeatureVector, NetError> {
    let engine = InferenceEngine::compile(checkpoint)?;
    engine.extract_features(image)
}

/// Extractor plus the three attribute heads on one image.
pub struct AttributeHeads<'a> {
    pub age: &'a Checkpoint,
    pub gender: &'a Checkpoint,
    pub ethnicity: &'a Checkpoint,
}

pub fn predict_attributes(
    extractor: &Checkpoint,
    heads: &AttributeHeads<'_>,
    image: &ImageTensor,
) -> Result<AttributePrediction, NetError> {
    let engine = InferenceEngine::compile(extractor)?;
    let features = engine.extract_features(image)?;
    predict_attributes_from_features(heads, &features)
}

pub fn predict_attributes_from_features(
    heads: &AttributeHeads<'_>,
    features: &FeatureVector,
) -> Result<AttributePrediction, NetError> {
    let age_engine = head_engine(
        heads.age,
        "age_regression",
        &HeadKind::AgeRegression,
        features,
    )?;
    let gender_engine = head_engine(
        heads.gender,
        "gender_softmax",
        &HeadKind::GenderSoftmax,
        features,
    )?;
    let ethnicity_engine = head_engine(
        heads.ethnicity,
        "ethnicity_softmax",
        &HeadKind::EthnicitySoftmax,
        features,
    )?;

    let age_raw = age_engine.run_on_features(features)?[0];
    let age = age_raw.clamp(AGE_CLAMP.0, AGE_CLAMP.1);
    let gender_logits = gender_engine.run_on_features(features)?;
    let ethnicity_logits = ethnicity_engine.run_on_features(features)?;
    Ok(AttributePrediction {
        age,
        gender_probs: softmax_f64(&gender_logits),
        ethnicity_probs: softmax_f64(&ethnicity_logits),
    })
}

fn head_engine(
    checkpoint: &Checkpoint,
    expected: &str,
    kind: &HeadKind,
    features: &FeatureVector,
) -> Result<InferenceEngine, NetError> {
    if std::mem::discriminant(&checkpoint.spec.head.kind) != std::mem::discriminant(kind) {
        return Err(NetError::WrongHead {
            expected: expected.into(),
            got: checkpoint.spec.head.kind.name().into(),
        });
    }
    if checkpoint.spec.feature_dim != features.len() {
        return Err(NetError::HeadDimensionMismatch {
            head: checkpoint.spec.feature_dim,
            features: features.len(),
        });
    }
    InferenceEngine::compile(checkpoint)
}

/// Stable softmax over a logit slice.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn facefilternet_canonical_shape() {
        let spec = build_facefilternet(102).unwrap();
        assert_eq!(spec.feature_dim, 2048);
        assert_eq!(spec.head.kind.output_width(), 102);
        assert_eq!(spec.input_image_shape(), Some((256, 256, 3)));
        let backbone = spec.backbone.as_ref().unwrap();
        assert_eq!(backbone.out_channels(), 2048);
        // 1 stem + 3*(3+4+6+3) bottleneck convs + head = 50 weighted layers
        let conv_layers: usize =
            1 + backbone.stages.iter().map(|s| s.blocks * 3).sum::<usize>() + 1;
        assert_eq!(conv_layers, 50);
    }

    #[test]
    fn facefilternet_parameterizes_head() {
        let spec = build_facefilternet(2).unwrap();
        assert_eq!(spec.head.kind.output_width(), 2);
        assert_eq!(spec.feature_dim, 2048);
    }

    #[test]
    fn facefilternet_rejects_single_class() {
        assert!(matches!(
            build_facefilternet(1),
            Err(NetError::TooFewClasses(1))
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(IdentityDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(IdentityDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(IdentityDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(IdentityDistribution::new(vec![]).is_err());
    }

    #[test]
    fn argmax_ties_break_low() {
        let d = IdentityDistribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(d.argmax(), 0);
        let d = IdentityDistribution::new(vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn image_tensor_rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 3, vec![0.5, 1.2, 0.0]).is_err());
        assert!(ImageTensor::new(1, 1, 3, vec![0.5, 0.2]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 0.25]).is_ok());
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = ImageTensor::new(4, 4, 3, vec![0.25; 48]).unwrap();
        let resized = img.resize(9, 5);
        assert_eq!(resized.height, 9);
        assert_eq!(resized.width, 5);
        assert!(resized.data.iter().all(|v| (*v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_f64(&[1.0, -2.0, 0.5, 100.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn head_checkpoint(kind: HeadKind, feature_dim: usize, seed: u64) -> Checkpoint {
        use crate::nets::graph::Network;
        let spec = NetworkSpec::attribute_head(kind, feature_dim, vec![8]);
        let mut net = Network::init(&spec, seed).unwrap();
        Checkpoint::from_network(&mut net, TrainingFingerprint::default(), vec![])
    }

    #[test]
    fn attribute_predictions_are_valid_distributions() {
        let age = head_checkpoint(HeadKind::AgeRegression, 16, 1);
        let gender = head_checkpoint(HeadKind::GenderSoftmax, 16, 2);
        let ethnicity = head_checkpoint(HeadKind::EthnicitySoftmax, 16, 3);
        let heads = AttributeHeads {
            age: &age,
            gender: &gender,
            ethnicity: &ethnicity,
        };
        let features = FeatureVector::new((0..16).map(|i| i as f64 * 0.1 - 0.8).collect()).unwrap();
        let pred = predict_attributes_from_features(&heads, &features).unwrap();
        assert_eq!(pred.gender_probs.len(), 2);
        assert!((pred.gender_probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert_eq!(pred.ethnicity_probs.len(), 4);
        assert!((pred.ethnicity_probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!((AGE_CLAMP.0..=AGE_CLAMP.1).contains(&pred.age));
    }

    #[test]
    fn zero_weight_age_head_predicts_clamped_zero() {
        use crate::nets::graph::Network;
        let spec = NetworkSpec::attribute_head(HeadKind::AgeRegression, 16, vec![8]);
        let mut net = Network::init_zeros(&spec).unwrap();
        let age = Checkpoint::from_network(&mut net, TrainingFingerprint::default(), vec![]);
        let gender = head_checkpoint(HeadKind::GenderSoftmax, 16, 2);
        let ethnicity = head_checkpoint(HeadKind::EthnicitySoftmax, 16, 3);
        let heads = AttributeHeads {
            age: &age,
            gender: &gender,
            ethnicity: &ethnicity,
        };
        let features = FeatureVector::new(vec![5.0; 16]).unwrap();
        let pred = predict_attributes_from_features(&heads, &features).unwrap();
        assert_eq!(pred.age, 0.0);
    }

    #[test]
    fn head_dimension_mismatch_is_rejected() {
        let age = head_checkpoint(HeadKind::AgeRegression, 16, 1);
        let gender = head_checkpoint(HeadKind::GenderSoftmax, 16, 2);
        let ethnicity = head_checkpoint(HeadKind::EthnicitySoftmax, 16, 3);
        let heads = AttributeHeads {
            age: &age,
            gender: &gender,
            ethnicity: &ethnicity,
        };
        let features = FeatureVector::new(vec![0.0; 24]).unwrap();
        assert!(matches!(
            predict_attributes_from_features(&heads, &features),
            Err(NetError::HeadDimensionMismatch { .. })
        ));
    }

    #[test]
    fn wrong_head_kind_is_rejected() {
        let age = head_checkpoint(HeadKind::AgeRegression, 16, 1);
        let heads = AttributeHeads {
            age: &age,
            gender: &age,
            ethnicity: &age,
        };
        let features = FeatureVector::new(vec![0.0; 16]).unwrap();
        assert!(matches!(
            predict_attributes_from_features(&heads, &features),
            Err(NetError::WrongHead { .. })
        ));
    }
}
