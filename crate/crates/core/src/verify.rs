//! Self-checks run by the `verify` command: dense-versus-per-box equivalence
//! and finite-difference gradients.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{generate_anchor_grid, AnchorSpec, Delta4};
use crate::head::{
    backward, forward_conv, forward_fc, forward_fc_traced, loss, HeadError, HeadOutput, LossConfig,
    RpnHeadParams, Target,
};
use crate::tensor::{roi_align, FeatureMap};

pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Parameters probed per tensor; smaller tensors are checked in full.
pub const GRADIENT_SAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub instances: usize,
    /// Reverses the tap order of the per-box weights. Must make verification fail.
    pub corrupt_layout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub cells: usize,
    pub border_cells: usize,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorGradientCheck {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub equivalence: EquivalenceReport,
    pub gradients: Vec<TensorGradientCheck>,
}

impl VerifyReport {
    pub fn max_gradient_error(&self) -> f64 {
        self.gradients
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.equivalence.max_abs_error <= EQUIVALENCE_TOL
            && self.max_gradient_error() <= GRADIENT_TOL
    }
}

fn random_params<R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_mid: usize,
    kh: usize,
    kw: usize,
) -> RpnHeadParams {
    let mut p = RpnHeadParams::init(rng, c_in, c_mid, kh, kw, 0.5);
    for v in p.hidden.bias.iter_mut().chain(p.reg_bias.iter_mut()) {
        *v = rng.random_range(-0.5..0.5);
    }
    p.cls_bias = rng.random_range(-0.5..0.5);
    p
}

fn reverse_taps(p: &RpnHeadParams) -> RpnHeadParams {
    let mut q = p.clone();
    let taps = q.hidden.taps();
    for block in q.hidden.weights.chunks_mut(taps) {
        block.reverse();
    }
    q
}

fn output_gap(a: &HeadOutput, b: &HeadOutput) -> f64 {
    a.delta
        .to_array()
        .iter()
        .zip(b.delta.to_array())
        .map(|(x, y)| (x - y).abs())
        .fold((a.logit - b.logit).abs(), f64::max)
}

/// Compares the dense head at every cell with RoI Align plus the per-box head
/// on that cell's hand-designed anchor.
pub fn check_equivalence(opts: &VerifyOptions) -> Result<EquivalenceReport, HeadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let kernels = [(1, 1), (3, 3), (3, 3), (3, 5), (5, 3)];
    let strides = [1, 4, 8, 16];
    let mut report = EquivalenceReport {
        instances: opts.instances,
        cells: 0,
        border_cells: 0,
        max_abs_error: 0.0,
    };
    for _ in 0..opts.instances {
        let c_in = rng.random_range(1..=8);
        let c_mid = rng.random_range(1..=8);
        let h = rng.random_range(1..=32);
        let w = rng.random_range(1..=32);
        let d = rng.random_range(1..=4);
        let (kh, kw) = kernels[rng.random_range(0..kernels.len())];
        let stride = strides[rng.random_range(0..strides.len())];
        let map = FeatureMap::from_fn(c_in, h, w, |_, _, _| normal.sample(&mut rng));
        let params = random_params(&mut rng, c_in, c_mid, kh, kw);
        let fc_params = if opts.corrupt_layout {
            reverse_taps(&params)
        } else {
            params.clone()
        };

        let dense = forward_conv(&map, &params, d)?;
        let spec = AnchorSpec::new(kh, kw, d, stride)
            .map_err(|e| HeadError::ShapeMismatch(e.to_string()))?;
        for a in generate_anchor_grid(&spec, 0, h, w) {
            let roi = a.bbox.scaled(1.0 / stride as f64);
            let patch = roi_align(&map, &roi, kh, kw)?;
            let per_box = forward_fc(&patch, &fc_params)?;
            let gap = output_gap(dense.at(a.cell_row, a.cell_col), &per_box);
            report.max_abs_error = report.max_abs_error.max(gap);
            report.cells += 1;
            if a.cell_row == 0 || a.cell_col == 0 || a.cell_row + 1 == h || a.cell_col + 1 == w {
                report.border_cells += 1;
            }
        }
    }
    Ok(report)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of the batch loss against the analytic gradient.
pub fn check_gradients(seed: u64) -> Result<Vec<TensorGradientCheck>, HeadError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let (c_in, c_mid, kh, kw) = (4, 8, 3, 3);
    let cfg = LossConfig::default();
    let params = random_params(&mut rng, c_in, c_mid, kh, kw);
    let batch = 12;
    let patches: Vec<FeatureMap> = (0..batch)
        .map(|_| FeatureMap::from_fn(c_in, kh, kw, |_, _, _| normal.sample(&mut rng)))
        .collect();
    let targets: Vec<Target> = (0..batch)
        .map(|i| {
            if i % 2 == 0 {
                // spread targets so smooth-L1 sees both its quadratic and linear parts
                Target::Positive(Delta4::from_array(std::array::from_fn(|_| {
                    rng.random_range(-2.0..2.0)
                })))
            } else {
                Target::Negative
            }
        })
        .collect();

    let total = |p: &RpnHeadParams| -> Result<f64, HeadError> {
        let outs = patches
            .iter()
            .map(|x| forward_fc(x, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(loss(&outs, &targets, &cfg)?.total)
    };
    let traces = patches
        .iter()
        .map(|x| forward_fc_traced(x, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let examples: Vec<_> = traces.iter().zip(&targets).collect();
    let grads = backward(&examples, &params, &cfg, batch)?;

    let mut out = Vec::new();
    for (t, name) in RpnHeadParams::TENSOR_NAMES.iter().enumerate() {
        let len = params.tensors()[t].len();
        let picks: Vec<usize> = if len <= GRADIENT_SAMPLES {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, GRADIENT_SAMPLES).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= FD_STEP;
            let numeric = (total(&plus)? - total(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.tensors()[t][i], numeric));
        }
        out.push(TensorGradientCheck {
            name,
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifyReport, HeadError> {
    Ok(VerifyReport {
        equivalence: check_equivalence(opts)?,
        gradients: check_gradients(opts.seed.wrapping_add(1))?,
    })
}
