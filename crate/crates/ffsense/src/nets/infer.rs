//! Optimized f32 inference over checkpointed weights.
//!
//! Compiling a checkpoint folds every conv + batch-norm pair into a
//! single biased convolution (using the stored running statistics),
//! pre-transforms favorable stride-1 3x3 kernels for the Winograd
//! path, and lays the trunk out as a flat CHW pipeline. Dense head
//! layers stay in f64 straight from the checkpoint. Engines are
//! immutable after compile and safe to share across threads; batch
//! helpers fan out over a thread pool with one [`Scratch`] per worker
//! and return results in input order.

use ndarray::{ArrayD, Ix1, Ix2, Ix4};
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::winograd::WinogradConv;
use super::{
    ensure_len, softmax_f64, FeatureVector, HeadKind, IdentityDistribution, ImageTensor, InputSpec,
    NetError, NetworkSpec,
};

const BN_EPS: f64 = 1e-5;

/// Winograd pays off once its 16 channel-space GEMMs are large enough
/// to amortize the tile transforms; measured per trunk shape, that is
/// 64 channels and 16 tiles upward.
const WINOGRAD_MIN_TILES: usize = 16;
const WINOGRAD_MIN_CHANNELS: usize = 64;

/// Reusable per-thread working memory for trunk forwards.
#[derive(Default)]
pub struct Scratch {
    cur: Vec<f32>,
    t1: Vec<f32>,
    t2: Vec<f32>,
    cols: Vec<f32>,
    wv: Vec<f32>,
    wm: Vec<f32>,
    cat: Vec<f32>,
}

impl Scratch {
    pub fn new() -> Scratch {
        Scratch::default()
    }
}

struct DirectConv {
    weight: Vec<f32>, // [c_out][c_in * kh * kw]
    bias: Vec<f32>,
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    relu: bool,
}

impl DirectConv {
    fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    fn forward(
        &self,
        input: &[f32],
        h: usize,
        w: usize,
        out: &mut Vec<f32>,
        cols_buf: &mut Vec<f32>,
    ) -> (usize, usize) {
        let (oh, ow) = self.output_hw(h, w);
        let k = self.c_in * self.kernel.0 * self.kernel.1;
        let cols = oh * ow;

        let pointwise = self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0);
        let col_ptr = if pointwise {
            input.as_ptr()
        } else {
            ensure_len(cols_buf, k * cols);
            self.im2col(input, h, w, oh, ow, &mut cols_buf[..k * cols]);
            cols_buf.as_ptr()
        };

        ensure_len(out, self.c_out * cols);
        unsafe {
            matrixmultiply::sgemm(
                self.c_out,
                k,
                cols,
                1.0,
                self.weight.as_ptr(),
                k as isize,
                1,
                col_ptr,
                cols as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                cols as isize,
                1,
            );
        }
        for o in 0..self.c_out {
            let b = self.bias[o];
            let plane = &mut out[o * cols..(o + 1) * cols];
            if self.relu {
                for v in plane {
                    *v = (*v + b).max(0.0);
                }
            } else {
                for v in plane {
                    *v += b;
                }
            }
        }
        (oh, ow)
    }

    // Writes every cell (zeros included) so the scratch buffer never
    // needs pre-clearing.
    fn im2col(&self, input: &[f32], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f32]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        for c in 0..self.c_in {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst_base = row * oh * ow;
                    for i in 0..oh {
                        let src_i = (i * sh + ki) as isize - ph as isize;
                        let dst_row = &mut cols[dst_base + i * ow..dst_base + (i + 1) * ow];
                        if src_i < 0 || src_i >= h as isize {
                            dst_row.fill(0.0);
                            continue;
                        }
                        let src_row = src_i as usize * w;
                        for (j, dst) in dst_row.iter_mut().enumerate() {
                            let src_j = (j * sw + kj) as isize - pw as isize;
                            *dst = if src_j < 0 || src_j >= w as isize {
                                0.0
                            } else {
                                plane[src_row + src_j as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

enum ConvUnit {
    Direct(DirectConv),
    Winograd(WinogradConv),
}

impl ConvUnit {
    fn forward(
        &self,
        input: &[f32],
        h: usize,
        w: usize,
        out: &mut Vec<f32>,
        scratch: &mut ScratchView<'_>,
    ) -> (usize, usize) {
        match self {
            ConvUnit::Direct(conv) => conv.forward(input, h, w, out, scratch.cols),
            ConvUnit::Winograd(conv) => {
                conv.forward(input, h, w, out, scratch.wv, scratch.wm);
                (h, w)
            }
        }
    }

    fn out_channels(&self) -> usize {
        match self {
            ConvUnit::Direct(c) => c.c_out,
            ConvUnit::Winograd(c) => c.c_out,
        }
    }
}

// Borrow-splitting view over the conv-related scratch buffers.
struct ScratchView<'a> {
    cols: &'a mut Vec<f32>,
    wv: &'a mut Vec<f32>,
    wm: &'a mut Vec<f32>,
}

struct InferBottleneck {
    reduce: ConvUnit,
    spatial: ConvUnit,
    expand: ConvUnit,
    down: Option<ConvUnit>,
}

struct InferBridge {
    b0: ConvUnit,
    b1a: ConvUnit,
    b1b: ConvUnit,
    b1c: ConvUnit,
    proj: ConvUnit,
    scale: f32,
}

struct DenseF64 {
    weight: ndarray::Array2<f64>,
    bias: ndarray::Array1<f64>,
    relu: bool,
}

impl DenseF64 {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight.nrows());
        for (row, b) in self.weight.rows().into_iter().zip(&self.bias) {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(if self.relu { acc.max(0.0) } else { acc });
        }
        out
    }
}

/// Immutable compiled inference pipeline for one checkpoint.
pub struct InferenceEngine {
    pub spec: NetworkSpec,
    trunk: Option<TrunkPipeline>,
    head: Vec<DenseF64>,
}

struct TrunkPipeline {
    input_shape: (usize, usize, usize),
    stem: ConvUnit,
    stem_pool: bool,
    stages: Vec<Vec<InferBottleneck>>,
    bridges: Vec<InferBridge>,
    proj: Option<DenseF64>,
}

struct TensorSource<'a> {
    checkpoint: &'a Checkpoint,
}

impl<'a> TensorSource<'a> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<&'a ArrayD<f64>, NetError> {
        let t = self.checkpoint.tensors.get(name).ok_or_else(|| {
            NetError::InvalidSpec(format!("tensor \"{name}\" missing from checkpoint"))
        })?;
        if t.shape() != shape {
            return Err(NetError::InvalidSpec(format!(
                "tensor \"{name}\" has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    /// Conv weight with its batch norm folded in: the standard
    /// scale-by-gamma/sigma, shift-by-beta-minus-mu rewrite.
    #[allow(clippy::too_many_arguments)]
    fn folded_conv(
        &self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        relu: bool,
        spatial: (usize, usize),
    ) -> Result<ConvUnit, NetError> {
        let w = self.get(
            &format!("{name}.conv.w"),
            &[c_out, c_in, kernel.0, kernel.1],
        )?;
        let gamma = self.get(&format!("{name}.bn.gamma"), &[c_out])?;
        let beta = self.get(&format!("{name}.bn.beta"), &[c_out])?;
        let mean = self.get(&format!("{name}.bn.running_mean"), &[c_out])?;
        let var = self.get(&format!("{name}.bn.running_var"), &[c_out])?;

        let w = w.view().into_dimensionality::<Ix4>().unwrap();
        let mut weight = vec![0f32; c_out * c_in * kernel.0 * kernel.1];
        let mut bias = vec![0f32; c_out];
        for o in 0..c_out {
            let scale = gamma[[o]] / (var[[o]] + BN_EPS).sqrt();
            bias[o] = (beta[[o]] - mean[[o]] * scale) as f32;
            for c in 0..c_in {
                for ki in 0..kernel.0 {
                    for kj in 0..kernel.1 {
                        weight[((o * c_in + c) * kernel.0 + ki) * kernel.1 + kj] =
                            (w[[o, c, ki, kj]] * scale) as f32;
                    }
                }
            }
        }
        Ok(make_unit(
            weight, bias, c_in, c_out, kernel, stride, padding, relu, spatial,
        ))
    }

    /// Plain biased conv (no batch norm), e.g. the bridge projection.
    fn plain_conv(
        &self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        relu: bool,
        spatial: (usize, usize),
    ) -> Result<ConvUnit, NetError> {
        let w = self.get(&format!("{name}.w"), &[c_out, c_in, kernel.0, kernel.1])?;
        let b = self.get(&format!("{name}.b"), &[c_out])?;
        let weight: Vec<f32> = w.iter().map(|v| *v as f32).collect();
        let bias: Vec<f32> = b.iter().map(|v| *v as f32).collect();
        Ok(make_unit(
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            (1, 1),
            (kernel.0 / 2, kernel.1 / 2),
            relu,
            spatial,
        ))
    }

    fn dense(
        &self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        relu: bool,
    ) -> Result<DenseF64, NetError> {
        let w = self.get(&format!("{prefix}.w"), &[d_out, d_in])?;
        let b = self.get(&format!("{prefix}.b"), &[d_out])?;
        Ok(DenseF64 {
            weight: w.view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            bias: b.view().into_dimensionality::<Ix1>().unwrap().to_owned(),
            relu,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn make_unit(
    weight: Vec<f32>,
    bias: Vec<f32>,
    c_in: usize,
    c_out: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    relu: bool,
    spatial: (usize, usize),
) -> ConvUnit {
    let tiles = spatial.0.div_ceil(2) * spatial.1.div_ceil(2);
    if kernel == (3, 3)
        && stride == (1, 1)
        && padding == (1, 1)
        && tiles >= WINOGRAD_MIN_TILES
        && c_in.min(c_out) >= WINOGRAD_MIN_CHANNELS
    {
        ConvUnit::Winograd(WinogradConv::new(&weight, bias, c_in, c_out, relu))
    } else {
        ConvUnit::Direct(DirectConv {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            relu,
        })
    }
}

fn conv_out(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (h + 2 * pad - kernel) / stride + 1,
        (w + 2 * pad - kernel) / stride + 1,
    )
}

impl InferenceEngine {
    pub fn compile(checkpoint: &Checkpoint) -> Result<InferenceEngine, NetError> {
        let spec = &checkpoint.spec;
        spec.validate()?;
        let src = TensorSource { checkpoint };

        let trunk = match spec.input {
            InputSpec::Features { .. } => None,
            InputSpec::Image {
                height,
                width,
                channels,
            } => {
                let backbone = spec.backbone.as_ref().ok_or_else(|| {
                    NetError::InvalidSpec("image input requires a backbone".into())
                })?;
                let (mut h, mut w) = (height, width);
                let stem = src.folded_conv(
                    "stem",
                    channels,
                    backbone.stem_channels,
                    (backbone.stem_kernel, backbone.stem_kernel),
                    (backbone.stem_stride, backbone.stem_stride),
                    (backbone.stem_kernel / 2, backbone.stem_kernel / 2),
                    true,
                    (h, w),
                )?;
                let (nh, nw) = conv_out(
                    h,
                    w,
                    backbone.stem_kernel,
                    backbone.stem_stride,
                    backbone.stem_kernel / 2,
                );
                h = nh;
                w = nw;
                if backbone.stem_pool {
                    let (nh, nw) = conv_out(h, w, 3, 2, 1);
                    h = nh;
                    w = nw;
                }

                let mut stages = Vec::new();
                let mut c_in = backbone.stem_channels;
                for (si, stage) in backbone.stages.iter().enumerate() {
                    let mut blocks = Vec::new();
                    for bi in 0..stage.blocks {
                        let stride = if bi == 0 { stage.stride } else { 1 };
                        let c_out = stage.width * 4;
                        let base = format!("s{si}.b{bi}");
                        let reduce = src.folded_conv(
                            &format!("{base}.conv1"),
                            c_in,
                            stage.width,
                            (1, 1),
                            (1, 1),
                            (0, 0),
                            true,
                            (h, w),
                        )?;
                        let (oh, ow) = conv_out(h, w, 3, stride, 1);
                        let spatial = src.folded_conv(
                            &format!("{base}.conv2"),
                            stage.width,
                            stage.width,
                            (3, 3),
                            (stride, stride),
                            (1, 1),
                            true,
                            (h, w),
                        )?;
                        let expand = src.folded_conv(
                            &format!("{base}.conv3"),
                            stage.width,
                            c_out,
                            (1, 1),
                            (1, 1),
                            (0, 0),
                            false,
                            (oh, ow),
                        )?;
                        let down = if stride != 1 || c_in != c_out {
                            Some(src.folded_conv(
                                &format!("{base}.down"),
                                c_in,
                                c_out,
                                (1, 1),
                                (stride, stride),
                                (0, 0),
                                false,
                                (h, w),
                            )?)
                        } else {
                            None
                        };
                        blocks.push(InferBottleneck {
                            reduce,
                            spatial,
                            expand,
                            down,
                        });
                        c_in = c_out;
                        h = oh;
                        w = ow;
                    }
                    stages.push(blocks);
                }

                let mut bridges = Vec::new();
                if let Some(bridge) = &spec.bridge {
                    for k in 0..bridge.blocks {
                        let base = format!("bridge{k}");
                        let br = bridge.branch_channels;
                        bridges.push(InferBridge {
                            b0: src.folded_conv(
                                &format!("{base}.b0"),
                                c_in,
                                br,
                                (1, 1),
                                (1, 1),
                                (0, 0),
                                true,
                                (h, w),
                            )?,
                            b1a: src.folded_conv(
                                &format!("{base}.b1a"),
                                c_in,
                                br,
                                (1, 1),
                                (1, 1),
                                (0, 0),
                                true,
                                (h, w),
                            )?,
                            b1b: src.folded_conv(
                                &format!("{base}.b1b"),
                                br,
                                br,
                                (1, 7),
                                (1, 1),
                                (0, 3),
                                true,
                                (h, w),
                            )?,
                            b1c: src.folded_conv(
                                &format!("{base}.b1c"),
                                br,
                                br,
                                (7, 1),
                                (1, 1),
                                (3, 0),
                                true,
                                (h, w),
                            )?,
                            proj: src.plain_conv(
                                &format!("{base}.proj"),
                                br * 2,
                                c_in,
                                (1, 1),
                                false,
                                (h, w),
                            )?,
                            scale: bridge.residual_scale as f32,
                        });
                    }
                }

                let proj = if c_in != spec.feature_dim {
                    Some(src.dense("proj", c_in, spec.feature_dim, false)?)
                } else {
                    None
                };

                Some(TrunkPipeline {
                    input_shape: (height, width, channels),
                    stem,
                    stem_pool: backbone.stem_pool,
                    stages,
                    bridges,
                    proj,
                })
            }
        };

        let mut head = Vec::new();
        let mut d = spec.feature_dim;
        for (i, &width) in spec.head.hidden.iter().enumerate() {
            head.push(src.dense(&format!("head.h{i}"), d, width, true)?);
            d = width;
        }
        head.push(src.dense("head.out", d, spec.head.kind.output_width(), false)?);

        Ok(InferenceEngine {
            spec: spec.clone(),
            trunk,
            head,
        })
    }

    /// Pooled trunk features for one image, reusing caller scratch.
    pub fn extract_features_with(
        &self,
        image: &ImageTensor,
        scratch: &mut Scratch,
    ) -> Result<FeatureVector, NetError> {
        let trunk = self.trunk.as_ref().ok_or_else(|| {
            NetError::InvalidSpec("this checkpoint takes features, not images".into())
        })?;
        image.check_shape(&self.spec)?;
        let pooled = trunk.forward(&image.to_chw(), image.height, image.width, scratch);
        let pooled_f64: Vec<f64> = pooled.iter().map(|v| *v as f64).collect();
        let features = match &trunk.proj {
            Some(proj) => proj.forward(&pooled_f64),
            None => pooled_f64,
        };
        FeatureVector::new(features)
    }

    pub fn extract_features(&self, image: &ImageTensor) -> Result<FeatureVector, NetError> {
        self.extract_features_with(image, &mut Scratch::new())
    }

    /// Head outputs (logits or raw regression values) from features.
    pub fn run_on_features(&self, features: &FeatureVector) -> Result<Vec<f64>, NetError> {
        if features.len() != self.spec.feature_dim {
            return Err(NetError::HeadDimensionMismatch {
                head: self.spec.feature_dim,
                features: features.len(),
            });
        }
        let mut x = features.values().to_vec();
        for layer in &self.head {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    pub fn logits_with(
        &self,
        image: &ImageTensor,
        scratch: &mut Scratch,
    ) -> Result<Vec<f64>, NetError> {
        let features = self.extract_features_with(image, scratch)?;
        self.run_on_features(&features)
    }

    pub fn logits(&self, image: &ImageTensor) -> Result<Vec<f64>, NetError> {
        self.logits_with(image, &mut Scratch::new())
    }

    /// Identity distribution for one image, reusing caller scratch.
    pub fn predict_identity_with(
        &self,
        image: &ImageTensor,
        scratch: &mut Scratch,
    ) -> Result<IdentityDistribution, NetError> {
        if !matches!(self.spec.head.kind, HeadKind::IdentitySoftmax { .. }) {
            return Err(NetError::WrongHead {
                expected: "identity_softmax".into(),
                got: self.spec.head.kind.name().into(),
            });
        }
        let logits = self.logits_with(image, scratch)?;
        IdentityDistribution::new(softmax_f64(&logits))
    }

    pub fn predict_identity(&self, image: &ImageTensor) -> Result<IdentityDistribution, NetError> {
        self.predict_identity_with(image, &mut Scratch::new())
    }

    /// Batched identity prediction; parallel internally, results in
    /// input order.
    pub fn predict_identity_batch(
        &self,
        images: &[ImageTensor],
    ) -> Result<Vec<IdentityDistribution>, NetError> {
        images
            .par_iter()
            .map_init(Scratch::new, |scratch, img| {
                self.predict_identity_with(img, scratch)
            })
            .collect()
    }

    /// Batched feature extraction in input order.
    pub fn extract_features_batch(
        &self,
        images: &[ImageTensor],
    ) -> Result<Vec<FeatureVector>, NetError> {
        images
            .par_iter()
            .map_init(Scratch::new, |scratch, img| {
                self.extract_features_with(img, scratch)
            })
            .collect()
    }
}

impl TrunkPipeline {
    /// CHW input -> pooled channel vector (pre-projection).
    fn forward(&self, input: &[f32], h: usize, w: usize, scratch: &mut Scratch) -> Vec<f32> {
        debug_assert_eq!((h, w), (self.input_shape.0, self.input_shape.1));
        let Scratch {
            cur,
            t1,
            t2,
            cols,
            wv,
            wm,
            cat,
        } = scratch;
        let mut view = ScratchView { cols, wv, wm };

        let (mut h, mut w) = self.stem.forward(input, h, w, cur, &mut view);
        let mut c_now = self.stem.out_channels();
        if self.stem_pool {
            let (nh, nw) = maxpool3x3s2(&cur[..c_now * h * w], c_now, h, w, t1);
            std::mem::swap(cur, t1);
            h = nh;
            w = nw;
        }

        for stage in &self.stages {
            for block in stage {
                let cur_slice = &cur[..c_now * h * w];
                block.reduce.forward(cur_slice, h, w, t1, &mut view);
                let mid_c = block.reduce.out_channels();
                let (mh, mw) = block
                    .spatial
                    .forward(&t1[..mid_c * h * w], h, w, t2, &mut view);
                block
                    .expand
                    .forward(&t2[..mid_c * mh * mw], mh, mw, t1, &mut view);
                let out_c = block.expand.out_channels();
                let n = out_c * mh * mw;
                match &block.down {
                    Some(down) => {
                        down.forward(cur_slice, h, w, t2, &mut view);
                        for (o, s) in t1[..n].iter_mut().zip(&t2[..n]) {
                            *o = (*o + s).max(0.0);
                        }
                    }
                    None => {
                        for (o, s) in t1[..n].iter_mut().zip(cur_slice) {
                            *o = (*o + s).max(0.0);
                        }
                    }
                }
                std::mem::swap(cur, t1);
                c_now = out_c;
                h = mh;
                w = mw;
            }
        }

        for bridge in &self.bridges {
            let branch = bridge.b0.out_channels();
            let cur_slice = &cur[..c_now * h * w];
            ensure_len(cat, 2 * branch * h * w);
            bridge.b0.forward(cur_slice, h, w, t1, &mut view);
            cat[..branch * h * w].copy_from_slice(&t1[..branch * h * w]);
            bridge.b1a.forward(cur_slice, h, w, t1, &mut view);
            bridge
                .b1b
                .forward(&t1[..branch * h * w], h, w, t2, &mut view);
            bridge
                .b1c
                .forward(&t2[..branch * h * w], h, w, t1, &mut view);
            cat[branch * h * w..2 * branch * h * w].copy_from_slice(&t1[..branch * h * w]);
            bridge
                .proj
                .forward(&cat[..2 * branch * h * w], h, w, t1, &mut view);
            let scale = bridge.scale;
            let n = c_now * h * w;
            for (o, x) in t1[..n].iter_mut().zip(cur_slice) {
                *o = (x + scale * *o).max(0.0);
            }
            std::mem::swap(cur, t1);
        }

        // global average pool
        let scale = 1.0 / (h * w) as f32;
        (0..c_now)
            .map(|c| cur[c * h * w..(c + 1) * h * w].iter().sum::<f32>() * scale)
            .collect()
    }
}

fn maxpool3x3s2(
    input: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut Vec<f32>,
) -> (usize, usize) {
    let (oh, ow) = conv_out(h, w, 3, 2, 1);
    ensure_len(out, channels * oh * ow);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        let out_plane = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ki in 0..3 {
                    let y = (i * 2 + ki) as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kj in 0..3 {
                        let x = (j * 2 + kj) as isize - 1;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        best = best.max(plane[y as usize * w + x as usize]);
                    }
                }
                out_plane[i * ow + j] = best;
            }
        }
    }
    (oh, ow)
}
