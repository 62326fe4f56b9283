//! Boxes, IoU, anchor grids, box-delta transforms and greedy NMS.
//!
//! Coordinates are continuous corner coordinates in image pixels. Area is
//! `(x2 - x1) * (y2 - y1)`; there is no `+1` convention anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound applied to `dw`/`dh` before exponentiation in [`decode_deltas`].
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cannot encode against a zero-area box {0:?}")]
    DegenerateBox(BBox),
    #[error("boxes and scores length mismatch (boxes: {boxes}, scores: {scores})")]
    LengthMismatch { boxes: usize, scores: usize },
    #[error("invalid anchor spec {0:?}: all of kernel, dilation and stride must be >= 1")]
    InvalidSpec(AnchorSpec),
}

/// Axis-aligned rectangle in image-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// COCO `[x, y, width, height]` layout.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Area, zero for inverted or degenerate boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn has_positive_area(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    /// Multiplies every coordinate by `factor`; `1 / stride` maps image pixels
    /// to feature cells.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }
}

/// Intersection over union; 0 for disjoint or zero-area inputs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Discrete anchor family: an `m x n` kernel with dilation `d` placed on a
/// feature map of stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl AnchorSpec {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Self, GeometryError> {
        let spec = Self {
            kernel_h,
            kernel_w,
            dilation,
            stride,
        };
        if kernel_h == 0 || kernel_w == 0 || dilation == 0 || stride == 0 {
            return Err(GeometryError::InvalidSpec(spec));
        }
        Ok(spec)
    }

    /// Anchor width in image pixels.
    pub fn width_px(&self) -> f64 {
        (self.kernel_w * self.dilation * self.stride) as f64
    }

    /// Anchor height in image pixels.
    pub fn height_px(&self) -> f64 {
        (self.kernel_h * self.dilation * self.stride) as f64
    }
}

/// Anchor scale in feature cells: `d * sqrt(m * n)`.
pub fn anchor_scale(spec: &AnchorSpec) -> f64 {
    spec.dilation as f64 * ((spec.kernel_h * spec.kernel_w) as f64).sqrt()
}

/// Anchor aspect ratio (width over height): `n / m`.
pub fn anchor_aspect_ratio(spec: &AnchorSpec) -> f64 {
    spec.kernel_w as f64 / spec.kernel_h as f64
}

/// One placed anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level_index: usize,
    pub cell_row: usize,
    pub cell_col: usize,
    pub spec: AnchorSpec,
    pub on_grid: bool,
}

/// Places one anchor per feature cell, row-major, centred on the cell centre.
pub fn generate_anchor_grid(
    spec: &AnchorSpec,
    level_index: usize,
    feature_h: usize,
    feature_w: usize,
) -> Vec<Anchor> {
    let s = spec.stride as f64;
    let (w, h) = (spec.width_px(), spec.height_px());
    let mut out = Vec::with_capacity(feature_h * feature_w);
    for r in 0..feature_h {
        for c in 0..feature_w {
            let cx = (c as f64 + 0.5) * s;
            let cy = (r as f64 + 0.5) * s;
            out.push(Anchor {
                bbox: BBox::from_center(cx, cy, w, h),
                level_index,
                cell_row: r,
                cell_col: c,
                spec: *spec,
                on_grid: true,
            });
        }
    }
    out
}

/// Regression offsets in the standard R-CNN parameterisation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Delta4 {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl Delta4 {
    pub const ZERO: Delta4 = Delta4 {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn encode_deltas(anchor: &BBox, target: &BBox) -> Result<Delta4, GeometryError> {
    if !anchor.has_positive_area() {
        return Err(GeometryError::DegenerateBox(*anchor));
    }
    if !target.has_positive_area() {
        return Err(GeometryError::DegenerateBox(*target));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tx, ty) = target.center();
    Ok(Delta4 {
        dx: (tx - ax) / aw,
        dy: (ty - ay) / ah,
        dw: (target.width() / aw).ln(),
        dh: (target.height() / ah).ln(),
    })
}

pub fn decode_deltas(anchor: &BBox, delta: &Delta4) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let dw = delta.dw.min(DELTA_CLAMP);
    let dh = delta.dh.min(DELTA_CLAMP);
    BBox::from_center(
        ax + delta.dx * aw,
        ay + delta.dy * ah,
        aw * dw.exp(),
        ah * dh.exp(),
    )
}

pub fn clip_to_image(b: &BBox, width: u32, height: u32) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox::new(
        b.x1.clamp(0.0, w),
        b.y1.clamp(0.0, h),
        b.x2.clamp(0.0, w),
        b.y2.clamp(0.0, h),
    )
}

/// Indices sorted by descending score, ties by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending-score order. A box is suppressed when
/// its IoU with an already kept box is strictly greater than `iou_threshold`.
pub fn nms(
    boxes: &[BBox],
    scores: &[f64],
    iou_threshold: f64,
    max_keep: usize,
) -> Result<Vec<usize>, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::LengthMismatch {
            boxes: boxes.len(),
            scores: scores.len(),
        });
    }
    let order = argsort_desc(scores);
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if kept.len() >= max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        let bi = &boxes[i];
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(bi, &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Dense IoU matrix; row `i` holds anchor `i` against every ground truth.
pub fn match_quality_matrix(anchors: &[BBox], gts: &[BBox]) -> Vec<Vec<f64>> {
    anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize, n: usize, d: usize, s: usize) -> AnchorSpec {
        AnchorSpec::new(m, n, d, s).unwrap()
    }

    #[test]
    fn iou_spot_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(
            iou(
                &BBox::new(0.0, 0.0, 1.0, 1.0),
                &BBox::new(5.0, 5.0, 6.0, 6.0)
            ),
            0.0
        );
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn clamp_constant_is_ln_1000_over_16() {
        assert!((DELTA_CLAMP - (1000.0f64 / 16.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn scale_and_ratio() {
        assert_eq!(anchor_scale(&spec(3, 3, 2, 1)), 6.0);
        assert_eq!(anchor_scale(&spec(3, 3, 1, 1)), 3.0);
        assert!((anchor_scale(&spec(3, 5, 2, 1)) - 7.745_966_692_414_834).abs() < 1e-12);
        assert_eq!(anchor_aspect_ratio(&spec(3, 3, 2, 1)), 1.0);
        assert_eq!(anchor_aspect_ratio(&spec(1, 1, 1, 1)), 1.0);
        assert_eq!(anchor_aspect_ratio(&spec(3, 1, 1, 1)), 1.0 / 3.0);
        assert!(AnchorSpec::new(3, 3, 0, 4).is_err());
    }

    #[test]
    fn grid_placement() {
        let g = generate_anchor_grid(&spec(3, 3, 2, 4), 0, 2, 2);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0].bbox, BBox::new(-10.0, -10.0, 14.0, 14.0));
        assert!(g.iter().all(|a| a.on_grid));
        let g = generate_anchor_grid(&spec(3, 3, 1, 1), 0, 1, 1);
        assert_eq!(g[0].bbox, BBox::new(-1.0, -1.0, 2.0, 2.0));
        let g = generate_anchor_grid(&spec(3, 3, 4, 4), 0, 3, 3);
        assert_eq!(g.len(), 9);
        assert!(g
            .iter()
            .all(|a| a.bbox.width() == 48.0 && a.bbox.height() == 48.0));
        assert_eq!((g[5].cell_row, g[5].cell_col), (1, 2));
    }

    #[test]
    fn delta_spot_values() {
        let a = BBox::from_center(10.0, 10.0, 4.0, 4.0);
        assert_eq!(encode_deltas(&a, &a).unwrap(), Delta4::ZERO);
        let t = BBox::from_center(12.0, 10.0, 8.0, 4.0);
        let d = encode_deltas(&a, &t).unwrap();
        assert_eq!(d.dx, 0.5);
        assert_eq!(d.dy, 0.0);
        assert!((d.dw - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.dh, 0.0);
        assert_eq!(decode_deltas(&a, &Delta4::ZERO), a);
        assert!(encode_deltas(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn decode_clamps_huge_log_sizes() {
        let a = BBox::from_center(0.0, 0.0, 16.0, 16.0);
        let b = decode_deltas(&a, &Delta4::new(0.0, 0.0, 1e6, 1e6));
        assert!((b.width() - 1000.0).abs() < 1e-9);
        assert!(b.height().is_finite());
    }

    #[test]
    fn clipping() {
        let b = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(clip_to_image(&b, 8, 8), b);
        assert_eq!(
            clip_to_image(&BBox::new(-5.0, -5.0, 10.0, 10.0), 8, 8),
            BBox::new(0.0, 0.0, 8.0, 8.0)
        );
        let out = clip_to_image(&BBox::new(20.0, 20.0, 30.0, 30.0), 8, 8);
        assert_eq!(out.area(), 0.0);
        assert_eq!(out, BBox::new(8.0, 8.0, 8.0, 8.0));
    }

    #[test]
    fn nms_small_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(nms(&[a], &[0.3], 0.7, 10).unwrap(), vec![0]);
        assert_eq!(nms(&[a, a], &[0.8, 0.9], 0.7, 10).unwrap(), vec![1]);
        assert!(nms(&[], &[], 0.7, 10).unwrap().is_empty());
        // equal scores keep the lower index
        assert_eq!(nms(&[a, a], &[0.5, 0.5], 0.7, 10).unwrap(), vec![0]);
        let far = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(nms(&[a, far], &[0.1, 0.2], 0.7, 1).unwrap(), vec![1]);
        assert!(nms(&[a], &[], 0.5, 1).is_err());
    }

    #[test]
    fn quality_matrix_shapes() {
        let boxes = [BBox::new(0.0, 0.0, 1.0, 1.0), BBox::new(3.0, 3.0, 5.0, 5.0)];
        let m = match_quality_matrix(&boxes, &boxes);
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[1][1], 1.0);
        assert_eq!(m[0][1], 0.0);
        let empty = match_quality_matrix(&boxes, &[]);
        assert_eq!(empty.len(), 2);
        assert!(empty.iter().all(|r| r.is_empty()));
    }
}
