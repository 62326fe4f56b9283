//! Slow, obviously-correct reference implementations shared by the test targets.
#![allow(dead_code)]

use augrpn::geometry::BBox;
use augrpn::head::{HeadOutput, RpnHeadParams};
use augrpn::tensor::{ConvWeights, FeatureMap};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn random_map<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize) -> FeatureMap {
    let n = Normal::new(0.0, 1.0).unwrap();
    FeatureMap::from_fn(c, h, w, |_, _, _| n.sample(rng))
}

/// Random weights and biases, all of order one.
pub fn random_params<R: Rng>(
    rng: &mut R,
    c_in: usize,
    c_mid: usize,
    kh: usize,
    kw: usize,
) -> RpnHeadParams {
    let mut p = RpnHeadParams::init(rng, c_in, c_mid, kh, kw, 0.5);
    for v in p.hidden.bias.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in p.reg_bias.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    p.cls_bias = rng.random_range(-0.5..0.5);
    p
}

/// Reads the map with zeros outside it.
pub fn padded(x: &FeatureMap, c: usize, r: i64, col: i64) -> f64 {
    if r < 0 || col < 0 || r >= x.height() as i64 || col >= x.width() as i64 {
        0.0
    } else {
        x.get(c, r as usize, col as usize)
    }
}

/// Dilated convolution straight from the definition, one output at a time.
pub fn conv_oracle(x: &FeatureMap, w: &ConvWeights, d: usize) -> Vec<Vec<Vec<f64>>> {
    let (h, wd) = (x.height(), x.width());
    let (ch, cw) = (w.kernel_h as i64 / 2, w.kernel_w as i64 / 2);
    let mut out = vec![vec![vec![0.0; wd]; h]; w.out_channels];
    for o in 0..w.out_channels {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = w.bias[o];
                for i in 0..w.in_channels {
                    for ki in 0..w.kernel_h {
                        for kj in 0..w.kernel_w {
                            let rr = r as i64 + (ki as i64 - ch) * d as i64;
                            let cc = c as i64 + (kj as i64 - cw) * d as i64;
                            acc += w.weights
                                [((o * w.in_channels + i) * w.kernel_h + ki) * w.kernel_w + kj]
                                * padded(x, i, rr, cc);
                        }
                    }
                }
                out[o][r][c] = acc;
            }
        }
    }
    out
}

/// Bilinear interpolation as a tent-weighted sum over every cell; cell
/// `(r, c)` sits at `(c + 0.5, r + 0.5)`.
pub fn bilinear_oracle(x: &FeatureMap, ch: usize, px: f64, py: f64) -> f64 {
    let mut acc = 0.0;
    for r in 0..x.height() {
        for c in 0..x.width() {
            let wx = (1.0 - (px - (c as f64 + 0.5)).abs()).max(0.0);
            let wy = (1.0 - (py - (r as f64 + 0.5)).abs()).max(0.0);
            acc += wx * wy * x.get(ch, r, c);
        }
    }
    acc
}

/// One bilinear sample at each bin centre, `[ch][bin_row][bin_col]`.
pub fn roi_align_oracle(x: &FeatureMap, roi: &BBox, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..x.channels() {
        for i in 0..oh {
            for j in 0..ow {
                let px = roi.x1 + (j as f64 + 0.5) * (roi.x2 - roi.x1) / ow as f64;
                let py = roi.y1 + (i as f64 + 0.5) * (roi.y2 - roi.y1) / oh as f64;
                out.push(bilinear_oracle(x, ch, px, py));
            }
        }
    }
    out
}

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter <= 0.0 || ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Greedy NMS by repeated scanning: take the best live box (lowest index on
/// ties), kill everything overlapping it by more than `thr`, repeat.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && iou_oracle(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    keep
}

/// The head evaluated layer by layer on a flattened `[ch][ki][kj]` patch.
pub fn head_oracle(patch: &[f64], p: &RpnHeadParams) -> HeadOutput {
    let c_mid = p.hidden.out_channels;
    let n_in = patch.len();
    let mut hidden = vec![0.0; c_mid];
    for (o, h) in hidden.iter_mut().enumerate() {
        let mut acc = p.hidden.bias[o];
        for (k, x) in patch.iter().enumerate() {
            acc += p.hidden.weights[o * n_in + k] * x;
        }
        *h = if acc > 0.0 { acc } else { 0.0 };
    }
    let mut logit = p.cls_bias;
    for j in 0..c_mid {
        logit += p.cls_weight[j] * hidden[j];
    }
    let mut d = [0.0; 4];
    for (k, dk) in d.iter_mut().enumerate() {
        *dk = p.reg_bias[k];
        for j in 0..c_mid {
            *dk += p.reg_weight[k * c_mid + j] * hidden[j];
        }
    }
    HeadOutput {
        logit,
        delta: augrpn::geometry::Delta4::from_array(d),
    }
}

pub fn max_output_gap(a: &HeadOutput, b: &HeadOutput) -> f64 {
    let mut m = (a.logit - b.logit).abs();
    for (x, y) in a.delta.to_array().iter().zip(b.delta.to_array()) {
        m = m.max((x - y).abs());
    }
    m
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    BBox::new(x, y, x + w, y + h)
}
