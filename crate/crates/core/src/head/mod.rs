//! The proposal head and its training maths.
//!
//! One [`RpnHeadParams`] is evaluated two ways: densely as a dilated
//! convolution ([`forward_conv`]) and per box as a fully-connected map over a
//! RoI-aligned patch ([`forward_fc`]). Both read the same storage.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::Delta4;
use crate::tensor::{conv2d_dilated, fc_apply, fc_from_conv, ConvWeights, FeatureMap, TensorError};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("patch is {got:?} (channels, height, width), head expects {expected:?}")]
    PatchShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("{outputs} outputs but {targets} targets")]
    TargetCount { outputs: usize, targets: usize },
    #[error("degenerate batch: no sampled examples")]
    EmptyBatch,
    #[error("parameter shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared head parameters: a hidden `m x n` convolution followed by ReLU and
/// two sibling 1x1 heads (objectness and box deltas).
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHeadParams {
    pub hidden: ConvWeights,
    /// `[C_mid]`
    pub cls_weight: Vec<f64>,
    pub cls_bias: f64,
    /// `[4][C_mid]` in `dx, dy, dw, dh` order.
    pub reg_weight: Vec<f64>,
    pub reg_bias: [f64; 4],
}

impl RpnHeadParams {
    pub fn zeros(
        in_channels: usize,
        mid_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Self {
        Self {
            hidden: ConvWeights::zeros(mid_channels, in_channels, kernel_h, kernel_w),
            cls_weight: vec![0.0; mid_channels],
            cls_bias: 0.0,
            reg_weight: vec![0.0; 4 * mid_channels],
            reg_bias: [0.0; 4],
        }
    }

    /// Zero-mean normal weights with deviation `std`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        mid_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        std: f64,
    ) -> Self {
        let mut p = Self::zeros(in_channels, mid_channels, kernel_h, kernel_w);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite positive deviation");
            for v in p
                .hidden
                .weights
                .iter_mut()
                .chain(p.cls_weight.iter_mut())
                .chain(p.reg_weight.iter_mut())
            {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.in_channels
    }

    pub fn mid_channels(&self) -> usize {
        self.hidden.out_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.hidden.kernel_h, self.hidden.kernel_w)
    }

    /// Same shape, all zeros. Used as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let (kh, kw) = self.kernel();
        Self::zeros(self.in_channels(), self.mid_channels(), kh, kw)
    }

    /// Zeroes the regression branch; boxes then decode to their anchors.
    pub fn without_regression(&self) -> Self {
        let mut p = self.clone();
        p.reg_weight.fill(0.0);
        p.reg_bias = [0.0; 4];
        p
    }

    pub const TENSOR_NAMES: [&'static str; 6] = [
        "hidden.weight",
        "hidden.bias",
        "cls.weight",
        "cls.bias",
        "reg.weight",
        "reg.bias",
    ];

    /// All parameter tensors in the fixed order of [`Self::TENSOR_NAMES`].
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.hidden.weights,
            &self.hidden.bias,
            &self.cls_weight,
            std::slice::from_ref(&self.cls_bias),
            &self.reg_weight,
            &self.reg_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.cls_weight,
            std::slice::from_mut(&mut self.cls_bias),
            &mut self.reg_weight,
            &mut self.reg_bias,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.kernel() == other.kernel()
            && self.in_channels() == other.in_channels()
            && self.mid_channels() == other.mid_channels()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<(), HeadError> {
        if !self.same_shape(other) {
            return Err(HeadError::ShapeMismatch("add_scaled".into()));
        }
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    fn heads(&self, hidden: &[f64]) -> HeadOutput {
        let c = self.mid_channels();
        let dot = |w: &[f64]| w.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>();
        let logit = dot(&self.cls_weight) + self.cls_bias;
        let mut d = [0.0; 4];
        for (k, v) in d.iter_mut().enumerate() {
            *v = dot(&self.reg_weight[k * c..(k + 1) * c]) + self.reg_bias[k];
        }
        HeadOutput {
            logit,
            delta: Delta4::from_array(d),
        }
    }
}

/// Objectness logit and box deltas for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutput {
    pub logit: f64,
    pub delta: Delta4,
}

/// Dense head outputs, one per feature cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrid {
    pub height: usize,
    pub width: usize,
    pub outputs: Vec<HeadOutput>,
}

impl HeadGrid {
    pub fn at(&self, row: usize, col: usize) -> &HeadOutput {
        &self.outputs[row * self.width + col]
    }
}

/// Dense (convolutional) evaluation over a whole feature map.
pub fn forward_conv(
    features: &FeatureMap,
    params: &RpnHeadParams,
    dilation: usize,
) -> Result<HeadGrid, HeadError> {
    let mut hidden = conv2d_dilated(features, &params.hidden, dilation)?;
    hidden
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.max(0.0));
    let (h, w) = (features.height(), features.width());
    let cells = h * w;
    let c_mid = params.mid_channels();
    let data = hidden.as_slice();
    let mut column = vec![0.0; c_mid];
    let mut outputs = Vec::with_capacity(cells);
    for cell in 0..cells {
        for (k, v) in column.iter_mut().enumerate() {
            *v = data[k * cells + cell];
        }
        outputs.push(params.heads(&column));
    }
    Ok(HeadGrid {
        height: h,
        width: w,
        outputs,
    })
}

/// Intermediate values of one fully-connected evaluation, kept for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct FcTrace {
    pub patch: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub output: HeadOutput,
}

fn check_patch(patch: &FeatureMap, params: &RpnHeadParams) -> Result<(), HeadError> {
    let (kh, kw) = params.kernel();
    let expected = (params.in_channels(), kh, kw);
    let got = (patch.channels(), patch.height(), patch.width());
    if expected != got {
        return Err(HeadError::PatchShape { expected, got });
    }
    Ok(())
}

pub fn forward_fc_traced(patch: &FeatureMap, params: &RpnHeadParams) -> Result<FcTrace, HeadError> {
    check_patch(patch, params)?;
    let pre = fc_apply(patch.as_slice(), &fc_from_conv(&params.hidden))?;
    let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    Ok(FcTrace {
        patch: patch.as_slice().to_vec(),
        output: params.heads(&hidden),
        pre_activation: pre,
    })
}

/// Per-box evaluation over a `C_in x m x n` patch.
pub fn forward_fc(patch: &FeatureMap, params: &RpnHeadParams) -> Result<HeadOutput, HeadError> {
    forward_fc_traced(patch, params).map(|t| t.output)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            beta: 1.0,
        }
    }
}

/// Training target of one sampled example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Positive(Delta4),
    Negative,
}

impl Target {
    fn label(&self) -> f64 {
        match self {
            Target::Positive(_) => 1.0,
            Target::Negative => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Binary cross entropy of a logit against label `y`, in log-sum-exp form.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// `lambda * L_reg + L_cls` where `L_cls` is the mean BCE over the batch and
/// `L_reg` is the smooth-L1 sum over positive deltas divided by the batch size.
pub fn loss(
    outputs: &[HeadOutput],
    targets: &[Target],
    cfg: &LossConfig,
) -> Result<LossBreakdown, HeadError> {
    if outputs.len() != targets.len() {
        return Err(HeadError::TargetCount {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    if outputs.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    let n = outputs.len() as f64;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        cls += bce_with_logit(o.logit, t.label());
        if let Target::Positive(goal) = t {
            for (p, g) in o.delta.to_array().iter().zip(goal.to_array()) {
                reg += smooth_l1(p - g, cfg.beta);
            }
        }
    }
    let (cls, reg) = (cls / n, reg / n);
    Ok(LossBreakdown {
        total: cfg.lambda * reg + cls,
        cls,
        reg,
    })
}

/// Exact gradients of [`loss`] with respect to `params`, for the examples of a
/// batch of `batch_len` elements that were produced by this parameter set.
///
/// The patches inside each trace are constants: nothing flows back into the
/// features or into whatever produced the boxes they were pooled from.
pub fn backward(
    examples: &[(&FcTrace, &Target)],
    params: &RpnHeadParams,
    cfg: &LossConfig,
    batch_len: usize,
) -> Result<RpnHeadParams, HeadError> {
    if batch_len == 0 {
        return Err(HeadError::EmptyBatch);
    }
    let n = batch_len as f64;
    let c_mid = params.mid_channels();
    let in_dim = params.hidden.in_channels * params.hidden.taps();
    let mut g = params.zeros_like();
    let mut d_hidden = vec![0.0; c_mid];
    for (trace, target) in examples {
        if trace.patch.len() != in_dim || trace.pre_activation.len() != c_mid {
            return Err(HeadError::ShapeMismatch(
                "trace does not match parameters".into(),
            ));
        }
        let g_logit = (sigmoid(trace.output.logit) - target.label()) / n;
        let mut g_delta = [0.0; 4];
        if let Target::Positive(goal) = target {
            for (k, (p, t)) in trace
                .output
                .delta
                .to_array()
                .iter()
                .zip(goal.to_array())
                .enumerate()
            {
                g_delta[k] = cfg.lambda * smooth_l1_grad(p - t, cfg.beta) / n;
            }
        }

        g.cls_bias += g_logit;
        for (k, gd) in g_delta.iter().enumerate() {
            g.reg_bias[k] += gd;
        }
        for (j, (dh, &pre)) in d_hidden.iter_mut().zip(&trace.pre_activation).enumerate() {
            let h = pre.max(0.0);
            g.cls_weight[j] += g_logit * h;
            let mut acc = g_logit * params.cls_weight[j];
            for (k, gd) in g_delta.iter().enumerate() {
                g.reg_weight[k * c_mid + j] += gd * h;
                acc += gd * params.reg_weight[k * c_mid + j];
            }
            *dh = if pre > 0.0 { acc } else { 0.0 };
        }
        for (o, &dh) in d_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            g.hidden.bias[o] += dh;
            let row = &mut g.hidden.weights[o * in_dim..(o + 1) * in_dim];
            for (w, x) in row.iter_mut().zip(&trace.patch) {
                *w += dh * x;
            }
        }
    }
    Ok(g)
}

/// `theta <- theta - epsilon * grad`.
pub fn sgd_step(
    params: &mut RpnHeadParams,
    grads: &RpnHeadParams,
    epsilon: f64,
) -> Result<(), HeadError> {
    params.add_scaled(grads, -epsilon)
}

/// Plain SGD with optional heavy-ball momentum (off when `momentum == 0`).
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<RpnHeadParams>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut [RpnHeadParams],
        grads: &[RpnHeadParams],
    ) -> Result<(), HeadError> {
        if params.len() != grads.len() {
            return Err(HeadError::ShapeMismatch(format!(
                "{} parameter sets, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.momentum == 0.0 {
            for (p, g) in params.iter_mut().zip(grads) {
                sgd_step(p, g, self.learning_rate)?;
            }
            return Ok(());
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(RpnHeadParams::zeros_like).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for (vt, gt) in v.tensors_mut().into_iter().zip(g.tensors()) {
                for (a, b) in vt.iter_mut().zip(gt) {
                    *a = self.momentum * *a + b;
                }
            }
            sgd_step(p, v, self.learning_rate)?;
        }
        Ok(())
    }
}

/// Binds one dilation to one parameter set. Several bindings may point at the
/// same set, which is how dilated heads share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadBinding {
    pub dilation: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    pub params: Vec<RpnHeadParams>,
    pub bindings: Vec<HeadBinding>,
}

impl HeadSet {
    /// One binding per dilation; `shared` uses a single parameter set for all.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        dilations: &[usize],
        shared: bool,
        in_channels: usize,
        mid_channels: usize,
        kernel: (usize, usize),
        std: f64,
    ) -> Self {
        let sets = if shared { 1 } else { dilations.len() };
        let params = (0..sets)
            .map(|_| RpnHeadParams::init(rng, in_channels, mid_channels, kernel.0, kernel.1, std))
            .collect();
        let bindings = dilations
            .iter()
            .enumerate()
            .map(|(i, &dilation)| HeadBinding {
                dilation,
                params: if shared { 0 } else { i },
            })
            .collect();
        Self { params, bindings }
    }

    pub fn params_of(&self, head: usize) -> &RpnHeadParams {
        &self.params[self.bindings[head].params]
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.params.first().map(|p| p.kernel()).unwrap_or((3, 3))
    }

    pub fn without_regression(&self) -> Self {
        Self {
            params: self.params.iter().map(|p| p.without_regression()).collect(),
            bindings: self.bindings.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
