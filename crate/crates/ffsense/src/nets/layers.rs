//! Trainable layer implementations (f64).
//!
//! This is the reference stack used for training and gradient checking:
//! straightforward im2col convolutions, batch normalization, pooling,
//! and dense layers, each with an explicit backward pass. The optimized
//! f32 path in [`super::infer`] reuses the weights these layers learn.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// How a forward pass treats batch statistics.
///
/// `Train` updates batch-norm running statistics; `Probe` uses batch
/// statistics without updating anything (pure, for finite differences);
/// `Eval` uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Probe,
    Eval,
}

impl Mode {
    fn use_batch_stats(&self) -> bool {
        matches!(self, Mode::Train | Mode::Probe)
    }
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Weight initializer: seeded draws for fresh networks, zeros when the
/// values will immediately be overwritten from a checkpoint.
pub enum Init {
    Seeded(ChaCha12Rng),
    Zeros,
}

impl Init {
    pub fn normal(&mut self, std: f64) -> f64 {
        match self {
            Init::Seeded(rng) => normal_sample(rng) * std,
            Init::Zeros => 0.0,
        }
    }
}

pub fn kaiming_conv(
    init: &mut Init,
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let std = (2.0 / (c_in * kh * kw) as f64).sqrt();
    ArrayD::from_shape_fn(vec![c_out, c_in, kh, kw].as_slice(), |_| init.normal(std))
}

fn normal_sample(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms in (0,1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D convolution with independent kernel/stride/padding per axis.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    cached_input: Option<Array4<f64>>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        bias: bool,
    ) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.w"),
                kaiming_conv(init, c_out, c_in, kernel.0, kernel.1),
            ),
            bias: bias
                .then(|| Param::new(format!("{name}.b"), ArrayD::zeros(vec![c_out].as_slice()))),
            kernel,
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>, _mode: Mode) -> Array4<f64> {
        let (n, c_in, h, w) = x.dim();
        debug_assert_eq!(c_in, self.in_channels());
        let (oh, ow) = self.output_hw(h, w);
        let c_out = self.out_channels();
        let weight = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((c_out, c_in * self.kernel.0 * self.kernel.1))
            .unwrap()
            .to_owned();

        let mut out = Array4::zeros((n, c_out, oh, ow));
        for b in 0..n {
            let cols = self.im2col(&x.index_axis(Axis(0), b).to_owned(), oh, ow);
            let result = weight.dot(&cols); // [c_out, oh*ow]
            let mut out_b = out.index_axis_mut(Axis(0), b);
            for c in 0..c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        out_b[[c, i, j]] = result[[c, i * ow + j]];
                    }
                }
            }
        }
        if let Some(bias) = &self.bias {
            let bias = bias.value.view().into_dimensionality::<Ix1>().unwrap();
            for c in 0..c_out {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bias[c]);
            }
        }
        self.cached_input = Some(x.clone());
        out
    }

    fn im2col(&self, x: &ndarray::Array3<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (c_in, h, w) = x.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let mut cols = Array2::zeros((c_in * kh * kw, oh * ow));
        for c in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for i in 0..oh {
                        let src_i = (i * sh + ki) as isize - ph as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let src_j = (j * sw + kj) as isize - pw as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            cols[[row, i * ow + j]] = x[[c, src_i as usize, src_j as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self.cached_input.take().expect("forward before backward");
        let (n, c_in, h, w) = x.dim();
        let (_, c_out, oh, ow) = grad_out.dim();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;

        let weight = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((c_out, c_in * kh * kw))
            .unwrap()
            .to_owned();

        let mut grad_w = Array2::<f64>::zeros((c_out, c_in * kh * kw));
        let mut grad_x = Array4::<f64>::zeros((n, c_in, h, w));

        for b in 0..n {
            let cols = self.im2col(&x.index_axis(Axis(0), b).to_owned(), oh, ow);
            let mut g = Array2::zeros((c_out, oh * ow));
            for c in 0..c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        g[[c, i * ow + j]] = grad_out[[b, c, i, j]];
                    }
                }
            }
            grad_w = grad_w + g.dot(&cols.t());
            let grad_cols = weight.t().dot(&g); // [c_in*kh*kw, oh*ow]
                                                // col2im scatter
            let mut gx = grad_x.index_axis_mut(Axis(0), b);
            for c in 0..c_in {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let row = (c * kh + ki) * kw + kj;
                        for i in 0..oh {
                            let src_i = (i * sh + ki) as isize - ph as isize;
                            if src_i < 0 || src_i >= h as isize {
                                continue;
                            }
                            for j in 0..ow {
                                let src_j = (j * sw + kj) as isize - pw as isize;
                                if src_j < 0 || src_j >= w as isize {
                                    continue;
                                }
                                gx[[c, src_i as usize, src_j as usize]] +=
                                    grad_cols[[row, i * ow + j]];
                            }
                        }
                    }
                }
            }
        }

        self.weight.grad = (&self
            .weight
            .grad
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_shape((c_out, c_in * kh * kw))
            .unwrap()
            .to_owned()
            + &grad_w)
            .into_shape_with_order(vec![c_out, c_in, kh, kw])
            .unwrap()
            .into_dyn();
        if let Some(bias) = &mut self.bias {
            let mut gb = bias.grad.view_mut().into_dimensionality::<Ix1>().unwrap();
            for b in 0..n {
                for c in 0..c_out {
                    let mut sum = 0.0;
                    for i in 0..oh {
                        for j in 0..ow {
                            sum += grad_out[[b, c, i, j]];
                        }
                    }
                    gb[c] += sum;
                }
            }
        }
        grad_x
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(bias) = &mut self.bias {
            f(bias);
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    x_hat: Array4<f64>,
    inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::ones(vec![channels].as_slice()),
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ArrayD::zeros(vec![channels].as_slice()),
            ),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let gamma = self
            .gamma
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();

        let (mean, var) = if mode.use_batch_stats() {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let slice = x.index_axis(Axis(1), ch);
                let m = slice.sum() / count;
                mean[ch] = m;
                var[ch] = slice.mapv(|v| (v - m) * (v - m)).sum() / count;
            }
            if mode == Mode::Train {
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
                }
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = x.clone();
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            x_hat
                .index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - m) * s);
        }
        let mut out = x_hat.clone();
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * g + b);
        }
        if mode.use_batch_stats() {
            self.cache = Some(BnCache { x_hat, inv_std });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = grad_out.dim();
        let count = (n * h * w) as f64;
        let gamma = self
            .gamma
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();

        let mut grad_x = Array4::zeros((n, c, h, w));
        {
            let mut g_gamma = self
                .gamma
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let mut g_beta = self
                .beta
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for ch in 0..c {
                let gy = grad_out.index_axis(Axis(1), ch);
                let xh = cache.x_hat.index_axis(Axis(1), ch);
                let sum_gy = gy.sum();
                let sum_gy_xhat = (&gy * &xh).sum();
                g_gamma[ch] += sum_gy_xhat;
                g_beta[ch] += sum_gy;

                // dL/dx = gamma*inv_std/count * (count*gy - sum(gy) - x_hat*sum(gy*x_hat))
                let scale = gamma[ch] * cache.inv_std[ch] / count;
                let mut gx = grad_x.index_axis_mut(Axis(1), ch);
                ndarray::Zip::from(&mut gx)
                    .and(&gy)
                    .and(&xh)
                    .for_each(|g, &y, &x_hat| {
                        *g = scale * (count * y - sum_gy - x_hat * sum_gy_xhat);
                    });
            }
        }
        grad_x
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

#[derive(Default)]
pub struct Relu4 {
    mask: Option<Array4<f64>>,
}

impl Relu4 {
    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let out = x.mapv(|v| v.max(0.0));
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        grad_out * &self.mask.take().expect("forward before backward")
    }
}

pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<Vec<(usize, usize)>>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            argmax: None,
            in_shape: (0, 0, 0, 0),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut argmax = vec![(0usize, 0usize); n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = (0usize, 0usize);
                        for ki in 0..self.kernel {
                            let src_i = (i * self.stride + ki) as isize - self.padding as isize;
                            if src_i < 0 || src_i >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let src_j = (j * self.stride + kj) as isize - self.padding as isize;
                                if src_j < 0 || src_j >= w as isize {
                                    continue;
                                }
                                let v = x[[b, ch, src_i as usize, src_j as usize]];
                                if v > best {
                                    best = v;
                                    best_pos = (src_i as usize, src_j as usize);
                                }
                            }
                        }
                        out[[b, ch, i, j]] = best;
                        argmax[((b * c + ch) * oh + i) * ow + j] = best_pos;
                    }
                }
            }
        }
        self.argmax = Some(argmax);
        self.in_shape = (n, c, h, w);
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let argmax = self.argmax.take().expect("forward before backward");
        let (n, c, h, w) = self.in_shape;
        let (_, _, oh, ow) = grad_out.dim();
        let mut grad_x = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let (si, sj) = argmax[((b * c + ch) * oh + i) * ow + j];
                        grad_x[[b, ch, si, sj]] += grad_out[[b, ch, i, j]];
                    }
                }
            }
        }
        grad_x
    }
}

/// Global average pool: [N, C, H, W] -> [N, C].
#[derive(Default)]
pub struct GlobalAvgPool {
    in_shape: (usize, usize, usize, usize),
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.in_shape = (n, c, h, w);
        let scale = 1.0 / (h * w) as f64;
        let mut out = Array2::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                out[[b, ch]] = x.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum() * scale;
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array4<f64> {
        let (n, c, h, w) = self.in_shape;
        let scale = 1.0 / (h * w) as f64;
        let mut grad_x = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let g = grad_out[[b, ch]] * scale;
                grad_x
                    .index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .fill(g);
            }
        }
        grad_x
    }
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

pub struct Dense {
    pub weight: Param, // [out, in]
    pub bias: Param,   // [out]
    cached_input: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(
        name: &str,
        init: &mut Init,
        d_in: usize,
        d_out: usize,
        init_std: Option<f64>,
    ) -> Self {
        let std = init_std.unwrap_or_else(|| (2.0 / d_in as f64).sqrt());
        let weight = ArrayD::from_shape_fn(vec![d_out, d_in].as_slice(), |_| init.normal(std));
        Dense {
            weight: Param::new(format!("{name}.w"), weight),
            bias: Param::new(format!("{name}.b"), ArrayD::zeros(vec![d_out].as_slice())),
            cached_input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = x.dot(&w.t());
        for mut row in out.rows_mut() {
            row += &b;
        }
        self.cached_input = Some(x.clone());
        out
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self.cached_input.take().expect("forward before backward");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            gw += &grad_out.t().dot(&x);
            let mut gb = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            gb += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&w)
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Default)]
pub struct Relu2 {
    mask: Option<Array2<f64>>,
}

impl Relu2 {
    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        grad_out * &self.mask.take().expect("forward before backward")
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy over the batch with optional per-class weights.
/// Returns the loss and the gradient w.r.t. the logits.
pub fn cross_entropy_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    debug_assert_eq!(n, labels.len());
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let mut weight_sum = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let w = class_weights.map_or(1.0, |cw| cw[label]);
        loss += -w * probs[[i, label]].max(1e-300).ln();
        weight_sum += w;
        grad[[i, label]] -= 1.0;
        for j in 0..grad.ncols() {
            grad[[i, j]] *= w;
        }
    }
    let norm = if weight_sum > 0.0 { weight_sum } else { 1.0 };
    (loss / norm, grad / norm)
}

/// Mean squared error against scalar targets (predictions are [N, 1]).
pub fn mse_loss(pred: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let diff = pred[[i, 0]] - t;
        loss += diff * diff;
        grad[[i, 0]] = 2.0 * diff / n;
    }
    (loss / n, grad)
}

/// Mean absolute error; subgradient 0 at exact hits.
pub fn mae_loss(pred: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let diff = pred[[i, 0]] - t;
        loss += diff.abs();
        grad[[i, 0]] = diff.signum() / n;
        if diff == 0.0 {
            grad[[i, 0]] = 0.0;
        }
    }
    (loss / n, grad)
}
