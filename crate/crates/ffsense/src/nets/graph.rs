//! Assembles a trainable f64 network from a [`NetworkSpec`].
//!
//! Parameter tensors carry stable hierarchical names (`stem.conv.w`,
//! `s0.b1.conv2.w`, `bridge0.proj.w`, `head.out.w`, ...) which are the
//! keys used by checkpoints, so a spec plus a tensor map reconstructs
//! the exact network.

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, Array4, ArrayD, Axis, Ix1};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::layers::{
    BatchNorm2d, Conv2d, Dense, GlobalAvgPool, Init, MaxPool2d, Mode, Param, Relu2, Relu4,
};
use super::{InputSpec, NetError, NetworkSpec};

const BOTTLENECK_EXPANSION: usize = 4;

/// Fresh bottlenecks start with their expansion batch-norm gamma at
/// this value instead of 1, so a residual block near initialization is
/// dominated by its skip path. Without it, eval-mode activations (which
/// see the untouched running statistics) double their variance at every
/// block and a 16-block trunk saturates its softmax.
const RESIDUAL_GAMMA_INIT: f64 = 0.2;

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    relu: Option<Relu4>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        relu: bool,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                init,
                c_in,
                c_out,
                kernel,
                stride,
                padding,
                false,
            ),
            bn: BatchNorm2d::new(&format!("{name}.bn"), c_out),
            relu: relu.then(Relu4::default),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y = self.bn.forward(&self.conv.forward(x, mode), mode);
        match &mut self.relu {
            Some(relu) => relu.forward(&y),
            None => y,
        }
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = match &mut self.relu {
            Some(relu) => relu.backward(grad),
            None => grad.clone(),
        };
        self.conv.backward(&self.bn.backward(&g))
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.for_each_param(f);
        self.bn.for_each_param(f);
    }
}

struct Bottleneck {
    reduce: ConvBn,
    spatial: ConvBn,
    expand: ConvBn,
    down: Option<ConvBn>,
    relu_out: Relu4,
}

impl Bottleneck {
    fn new(name: &str, init: &mut Init, c_in: usize, width: usize, stride: usize) -> Self {
        let c_out = width * BOTTLENECK_EXPANSION;
        let down = (stride != 1 || c_in != c_out).then(|| {
            ConvBn::new(
                &format!("{name}.down"),
                init,
                c_in,
                c_out,
                (1, 1),
                (stride, stride),
                (0, 0),
                false,
            )
        });
        let mut expand = ConvBn::new(
            &format!("{name}.conv3"),
            init,
            width,
            c_out,
            (1, 1),
            (1, 1),
            (0, 0),
            false,
        );
        if matches!(init, Init::Seeded(_)) {
            expand.bn.gamma.value.fill(RESIDUAL_GAMMA_INIT);
        }
        Bottleneck {
            reduce: ConvBn::new(
                &format!("{name}.conv1"),
                init,
                c_in,
                width,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            ),
            spatial: ConvBn::new(
                &format!("{name}.conv2"),
                init,
                width,
                width,
                (3, 3),
                (stride, stride),
                (1, 1),
                true,
            ),
            expand,
            down,
            relu_out: Relu4::default(),
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let main = self.expand.forward(
            &self.spatial.forward(&self.reduce.forward(x, mode), mode),
            mode,
        );
        let skip = match &mut self.down {
            Some(down) => down.forward(x, mode),
            None => x.clone(),
        };
        self.relu_out.forward(&(main + skip))
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = self.relu_out.backward(grad);
        let g_main = self
            .reduce
            .backward(&self.spatial.backward(&self.expand.backward(&g)));
        let g_skip = match &mut self.down {
            Some(down) => down.backward(&g),
            None => g,
        };
        g_main + g_skip
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.reduce.for_each_param(f);
        self.spatial.for_each_param(f);
        self.expand.for_each_param(f);
        if let Some(down) = &mut self.down {
            down.for_each_param(f);
        }
    }
}

/// Inception-style residual block: parallel 1x1 and 1x1 -> 1x7 -> 7x1
/// branches, concatenated and projected back to the input width, then
/// residual-added with a small scale.
struct InceptionResB {
    b0: ConvBn,
    b1_a: ConvBn,
    b1_b: ConvBn,
    b1_c: ConvBn,
    proj: Conv2d,
    scale: f64,
    relu_out: Relu4,
    branch_channels: usize,
}

impl InceptionResB {
    fn new(name: &str, init: &mut Init, channels: usize, branch: usize, scale: f64) -> Self {
        InceptionResB {
            b0: ConvBn::new(
                &format!("{name}.b0"),
                init,
                channels,
                branch,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            ),
            b1_a: ConvBn::new(
                &format!("{name}.b1a"),
                init,
                channels,
                branch,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            ),
            b1_b: ConvBn::new(
                &format!("{name}.b1b"),
                init,
                branch,
                branch,
                (1, 7),
                (1, 1),
                (0, 3),
                true,
            ),
            b1_c: ConvBn::new(
                &format!("{name}.b1c"),
                init,
                branch,
                branch,
                (7, 1),
                (1, 1),
                (3, 0),
                true,
            ),
            proj: Conv2d::new(
                &format!("{name}.proj"),
                init,
                branch * 2,
                channels,
                (1, 1),
                (1, 1),
                (0, 0),
                true,
            ),
            scale,
            relu_out: Relu4::default(),
            branch_channels: branch,
        }
    }

    fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array4<f64> {
        let y0 = self.b0.forward(x, mode);
        let y1 = self
            .b1_c
            .forward(&self.b1_b.forward(&self.b1_a.forward(x, mode), mode), mode);
        let cat = concatenate(Axis(1), &[y0.view(), y1.view()]).expect("branch shapes agree");
        let p = self.proj.forward(&cat, mode);
        self.relu_out.forward(&(x + &(p * self.scale)))
    }

    fn backward(&mut self, grad: &Array4<f64>) -> Array4<f64> {
        let g = self.relu_out.backward(grad);
        let g_proj = self.proj.backward(&(&g * self.scale));
        let (g0, g1) = g_proj.view().split_at(Axis(1), self.branch_channels);
        let gx0 = self.b0.backward(&g0.to_owned());
        let gx1 = self
            .b1_a
            .backward(&self.b1_b.backward(&self.b1_c.backward(&g1.to_owned())));
        g + gx0 + gx1
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.b0.for_each_param(f);
        self.b1_a.for_each_param(f);
        self.b1_b.for_each_param(f);
        self.b1_c.for_each_param(f);
        self.proj.for_each_param(f);
    }
}

/// Backbone + bridge + pool (+ optional linear projection to
/// `feature_dim`). Produces the shared feature vector.
pub struct Trunk {
    stem: ConvBn,
    stem_pool: Option<MaxPool2d>,
    stages: Vec<Vec<Bottleneck>>,
    bridge: Vec<InceptionResB>,
    gap: GlobalAvgPool,
    proj: Option<Dense>,
}

impl Trunk {
    fn new(spec: &NetworkSpec, init: &mut Init) -> Result<Self, NetError> {
        let backbone = spec
            .backbone
            .as_ref()
            .ok_or_else(|| NetError::InvalidSpec("trunk requires a backbone".into()))?;
        let (_, _, channels) = spec
            .input_image_shape()
            .ok_or_else(|| NetError::InvalidSpec("trunk requires image input".into()))?;

        let stem_pad = backbone.stem_kernel / 2;
        let stem = ConvBn::new(
            "stem",
            init,
            channels,
            backbone.stem_channels,
            (backbone.stem_kernel, backbone.stem_kernel),
            (backbone.stem_stride, backbone.stem_stride),
            (stem_pad, stem_pad),
            true,
        );
        let stem_pool = backbone.stem_pool.then(|| MaxPool2d::new(3, 2, 1));

        let mut stages = Vec::new();
        let mut c_in = backbone.stem_channels;
        for (si, stage) in backbone.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                blocks.push(Bottleneck::new(
                    &format!("s{si}.b{bi}"),
                    init,
                    c_in,
                    stage.width,
                    stride,
                ));
                c_in = stage.width * BOTTLENECK_EXPANSION;
            }
            stages.push(blocks);
        }

        let mut bridge = Vec::new();
        if let Some(bridge_spec) = &spec.bridge {
            for k in 0..bridge_spec.blocks {
                bridge.push(InceptionResB::new(
                    &format!("bridge{k}"),
                    init,
                    c_in,
                    bridge_spec.branch_channels,
                    bridge_spec.residual_scale,
                ));
            }
        }

        let proj = (c_in != spec.feature_dim)
            .then(|| Dense::new("proj", init, c_in, spec.feature_dim, None));

        Ok(Trunk {
            stem,
            stem_pool,
            stages,
            bridge,
            gap: GlobalAvgPool::default(),
            proj,
        })
    }

    pub fn forward(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let mut y = self.stem.forward(x, mode);
        if let Some(pool) = &mut self.stem_pool {
            y = pool.forward(&y);
        }
        for stage in &mut self.stages {
            for block in stage {
                y = block.forward(&y, mode);
            }
        }
        for block in &mut self.bridge {
            y = block.forward(&y, mode);
        }
        let pooled = self.gap.forward(&y);
        match &mut self.proj {
            Some(proj) => proj.forward(&pooled),
            None => pooled,
        }
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array4<f64> {
        let g_pooled = match &mut self.proj {
            Some(proj) => proj.backward(grad),
            None => grad.clone(),
        };
        let mut g = self.gap.backward(&g_pooled);
        for block in self.bridge.iter_mut().rev() {
            g = block.backward(&g);
        }
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
        }
        if let Some(pool) = &mut self.stem_pool {
            g = pool.backward(&g);
        }
        self.stem.backward(&g)
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.for_each_param(f);
        for stage in &mut self.stages {
            for block in stage {
                block.for_each_param(f);
            }
        }
        for block in &mut self.bridge {
            block.for_each_param(f);
        }
        if let Some(proj) = &mut self.proj {
            proj.for_each_param(f);
        }
    }

    fn for_each_buffer(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array1<f64>)) {
        let mut visit_bn = |prefix: &str, bn: &mut BatchNorm2d| {
            f(&format!("{prefix}.running_mean"), &mut bn.running_mean);
            f(&format!("{prefix}.running_var"), &mut bn.running_var);
        };
        visit_bn("stem.bn", &mut self.stem.bn);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let base = format!("s{si}.b{bi}");
                visit_bn(&format!("{base}.conv1.bn"), &mut block.reduce.bn);
                visit_bn(&format!("{base}.conv2.bn"), &mut block.spatial.bn);
                visit_bn(&format!("{base}.conv3.bn"), &mut block.expand.bn);
                if let Some(down) = &mut block.down {
                    visit_bn(&format!("{base}.down.bn"), &mut down.bn);
                }
            }
        }
        for (k, block) in self.bridge.iter_mut().enumerate() {
            visit_bn(&format!("bridge{k}.b0.bn"), &mut block.b0.bn);
            visit_bn(&format!("bridge{k}.b1a.bn"), &mut block.b1_a.bn);
            visit_bn(&format!("bridge{k}.b1b.bn"), &mut block.b1_b.bn);
            visit_bn(&format!("bridge{k}.b1c.bn"), &mut block.b1_c.bn);
        }
    }
}

/// Dense head: hidden layers with rectifier activations, then a linear
/// output layer.
pub struct Mlp {
    hidden: Vec<(Dense, Relu2)>,
    out: Dense,
}

impl Mlp {
    fn new(init: &mut Init, d_in: usize, hidden: &[usize], d_out: usize) -> Self {
        let mut layers = Vec::new();
        let mut d = d_in;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push((
                Dense::new(&format!("head.h{i}"), init, d, width, None),
                Relu2::default(),
            ));
            d = width;
        }
        // Small output init keeps fresh softmax heads near uniform.
        let out = Dense::new("head.out", init, d, d_out, Some(0.01));
        Mlp {
            hidden: layers,
            out,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for (dense, relu) in &mut self.hidden {
            y = relu.forward(&dense.forward(&y));
        }
        self.out.forward(&y)
    }

    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = self.out.backward(grad);
        for (dense, relu) in self.hidden.iter_mut().rev() {
            g = dense.backward(&relu.backward(&g));
        }
        g
    }

    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (dense, _) in &mut self.hidden {
            dense.for_each_param(f);
        }
        self.out.for_each_param(f);
    }
}

/// A complete network instance: optional trunk plus head.
pub struct Network {
    pub spec: NetworkSpec,
    trunk: Option<Trunk>,
    head: Mlp,
}

impl Network {
    /// Builds a freshly initialized network (deterministic for a given
    /// seed).
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Network, NetError> {
        Self::build(spec, Init::Seeded(ChaCha12Rng::seed_from_u64(seed)))
    }

    /// Builds the network with zeroed weights; used when a checkpoint
    /// will immediately overwrite every tensor.
    pub fn init_zeros(spec: &NetworkSpec) -> Result<Network, NetError> {
        Self::build(spec, Init::Zeros)
    }

    fn build(spec: &NetworkSpec, mut init: Init) -> Result<Network, NetError> {
        spec.validate()?;
        let trunk = match spec.input {
            InputSpec::Image { .. } => Some(Trunk::new(spec, &mut init)?),
            InputSpec::Features { .. } => None,
        };
        let head = Mlp::new(
            &mut init,
            spec.feature_dim,
            &spec.head.hidden,
            spec.head.kind.output_width(),
        );
        Ok(Network {
            spec: spec.clone(),
            trunk,
            head,
        })
    }

    /// Expected tensor names and shapes for a spec.
    pub fn expected_tensor_shapes(
        spec: &NetworkSpec,
    ) -> Result<BTreeMap<String, Vec<usize>>, NetError> {
        let mut net = Network::init_zeros(spec)?;
        Ok(net
            .export_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.shape().to_vec()))
            .collect())
    }

    /// Full forward: images -> head outputs (logits or raw regression).
    pub fn forward_images(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        let features = self
            .trunk
            .as_mut()
            .expect("image forward requires a trunk")
            .forward(x, mode);
        self.head.forward(&features)
    }

    /// Trunk only: images -> feature matrix.
    pub fn forward_trunk(&mut self, x: &Array4<f64>, mode: Mode) -> Array2<f64> {
        self.trunk
            .as_mut()
            .expect("feature extraction requires a trunk")
            .forward(x, mode)
    }

    /// Head only: features -> outputs.
    pub fn forward_features(&mut self, features: &Array2<f64>) -> Array2<f64> {
        self.head.forward(features)
    }

    /// Backward through head and trunk.
    pub fn backward_images(&mut self, grad_out: &Array2<f64>) {
        let g = self.head.backward(grad_out);
        self.trunk
            .as_mut()
            .expect("image backward requires a trunk")
            .backward(&g);
    }

    /// Backward through the head only.
    pub fn backward_features(&mut self, grad_out: &Array2<f64>) {
        self.head.backward(grad_out);
    }

    pub fn has_trunk(&self) -> bool {
        self.trunk.is_some()
    }

    /// Visits trainable parameters in a stable order.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(trunk) = &mut self.trunk {
            trunk.for_each_param(f);
        }
        self.head.for_each_param(f);
    }

    /// Visits head parameters only (for frozen-trunk fine-tuning).
    pub fn for_each_head_param(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.head.for_each_param(f);
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param(&mut |p| p.zero_grad());
    }

    /// All tensors (trainable parameters and batch-norm running
    /// statistics), keyed by stable names.
    pub fn export_tensors(&mut self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.for_each_param(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        if let Some(trunk) = &mut self.trunk {
            trunk.for_each_buffer(&mut |name, buf| {
                out.insert(name.to_string(), buf.clone().into_dyn());
            });
        }
        out
    }

    /// Loads tensors by name, checking shapes; errors name the first
    /// offending tensor.
    pub fn import_tensors(
        &mut self,
        tensors: &BTreeMap<String, ArrayD<f64>>,
    ) -> Result<(), NetError> {
        let mut error: Option<NetError> = None;
        self.for_each_param(&mut |p| {
            if error.is_some() {
                return;
            }
            match tensors.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
                Some(t) => {
                    error = Some(NetError::InvalidSpec(format!(
                        "tensor \"{}\" has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => {
                    error = Some(NetError::InvalidSpec(format!(
                        "tensor \"{}\" missing from checkpoint",
                        p.name
                    )))
                }
            }
        });
        if let Some(e) = error {
            return Err(e);
        }
        let mut error: Option<NetError> = None;
        if let Some(trunk) = &mut self.trunk {
            trunk.for_each_buffer(&mut |name, buf| {
                if error.is_some() {
                    return;
                }
                match tensors.get(name) {
                    Some(t) if t.shape() == buf.shape() => {
                        buf.assign(&t.view().into_dimensionality::<Ix1>().unwrap())
                    }
                    Some(t) => {
                        error = Some(NetError::InvalidSpec(format!(
                            "tensor \"{name}\" has shape {:?}, expected {:?}",
                            t.shape(),
                            buf.shape()
                        )))
                    }
                    None => {
                        error = Some(NetError::InvalidSpec(format!(
                            "tensor \"{name}\" missing from checkpoint"
                        )))
                    }
                }
            });
        }
        match error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Overwrites any parameters/buffers whose names appear in the map
    /// with matching shapes; silently skips the rest. Used to seed a
    /// fine-tune network from a checkpoint with a different head.
    pub fn import_matching(&mut self, tensors: &BTreeMap<String, ArrayD<f64>>) {
        self.for_each_param(&mut |p| {
            if let Some(t) = tensors.get(&p.name) {
                if t.shape() == p.value.shape() {
                    p.value.assign(t);
                }
            }
        });
        if let Some(trunk) = &mut self.trunk {
            trunk.for_each_buffer(&mut |name, buf| {
                if let Some(t) = tensors.get(name) {
                    if t.shape() == buf.shape() {
                        buf.assign(&t.view().into_dimensionality::<Ix1>().unwrap());
                    }
                }
            });
        }
    }

    /// Total trainable parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_tiny_recognizer, HeadKind};

    fn tiny_spec() -> NetworkSpec {
        build_tiny_recognizer(3, 8, 16).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let spec = tiny_spec();
        let mut a = Network::init(&spec, 42).unwrap();
        let mut b = Network::init(&spec, 42).unwrap();
        assert_eq!(a.export_tensors(), b.export_tensors());
        let mut c = Network::init(&spec, 43).unwrap();
        assert_ne!(a.export_tensors(), c.export_tensors());
    }

    #[test]
    fn forward_shapes() {
        let spec = tiny_spec();
        let mut net = Network::init(&spec, 1).unwrap();
        let x = Array4::from_elem((2, 3, 8, 8), 0.5);
        let logits = net.forward_images(&x, Mode::Eval);
        assert_eq!(logits.dim(), (2, 3));
        let features = net.forward_trunk(&x, Mode::Eval);
        assert_eq!(features.dim(), (2, 16));
    }

    #[test]
    fn export_import_round_trip() {
        let spec = tiny_spec();
        let mut net = Network::init(&spec, 5).unwrap();
        let tensors = net.export_tensors();
        let mut other = Network::init(&spec, 99).unwrap();
        other.import_tensors(&tensors).unwrap();
        assert_eq!(other.export_tensors(), tensors);
    }

    #[test]
    fn import_rejects_bad_shape_naming_tensor() {
        let spec = tiny_spec();
        let mut net = Network::init(&spec, 5).unwrap();
        let mut tensors = net.export_tensors();
        tensors.insert(
            "stem.conv.w".to_string(),
            ArrayD::zeros(vec![1, 2, 3].as_slice()),
        );
        let err = Network::init(&spec, 0)
            .unwrap()
            .import_tensors(&tensors)
            .unwrap_err();
        assert!(err.to_string().contains("stem.conv.w"), "{err}");
    }

    #[test]
    fn feature_head_network_has_no_trunk() {
        let spec = NetworkSpec::attribute_head(HeadKind::GenderSoftmax, 32, vec![16]);
        let mut net = Network::init(&spec, 3).unwrap();
        assert!(!net.has_trunk());
        let f = Array2::from_elem((4, 32), 0.1);
        let out = net.forward_features(&f);
        assert_eq!(out.dim(), (4, 2));
    }

    #[test]
    fn backward_runs_and_fills_grads() {
        let spec = tiny_spec();
        let mut net = Network::init(&spec, 7).unwrap();
        let x = Array4::from_shape_fn((2, 3, 8, 8), |(b, c, i, j)| {
            ((b + c + i + j) % 5) as f64 * 0.2
        });
        let logits = net.forward_images(&x, Mode::Probe);
        let (_, grad) = super::super::layers::cross_entropy_loss(&logits, &[0, 2], None);
        net.backward_images(&grad);
        let mut nonzero = 0usize;
        net.for_each_param(&mut |p| {
            if p.grad.iter().any(|g| *g != 0.0) {
                nonzero += 1;
            }
        });
        assert!(nonzero > 10, "only {nonzero} params received gradient");
    }
}
