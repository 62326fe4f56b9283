//! Dense feature maps, dilated convolution, single-sample RoI Align and the
//! convolution / fully-connected weight bijection.
//!
//! Two routes compute the same per-anchor features:
//!
//! * [`conv2d_dilated`] reads taps at `(r + d*(ki - (m-1)/2), c + d*(kj - (n-1)/2))`.
//! * [`roi_align`] over the on-grid anchor box of size `(n*d) x (m*d)` centred on
//!   `(c + 0.5, r + 0.5)` samples each bin exactly once at its centre, which lands
//!   on the same taps.
//!
//! Bilinear samples outside the map read zeros, matching the zero padding of the
//! convolution, so the two routes agree at borders as well.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("kernel {kernel_h}x{kernel_w} must have odd dimensions")]
    EvenKernel { kernel_h: usize, kernel_w: usize },
    #[error("dilation must be >= 1")]
    ZeroDilation,
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("RoI must have positive width and height, got {0:?}")]
    NonPositiveRoi(BBox),
    #[error("output grid must be at least 1x1")]
    EmptyOutput,
}

/// `C x H x W` values, channel-major then row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(TensorError::ShapeMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for ch in 0..channels {
            for r in 0..height {
                for c in 0..width {
                    data.push(f(ch, r, c));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, ch: usize, row: usize, col: usize) -> usize {
        (ch * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(ch, row, col)]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        let i = self.index(ch, row, col);
        self.data[i] = v;
    }

    /// Value at a signed position, zero outside the map.
    #[inline]
    pub fn get_padded(&self, ch: usize, row: isize, col: isize) -> f64 {
        if row < 0 || col < 0 || row >= self.height as isize || col >= self.width as isize {
            0.0
        } else {
            self.get(ch, row as usize, col as usize)
        }
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub map: FeatureMap,
    pub stride: usize,
}

/// Per-level feature maps plus the image size they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    pub image_width: u32,
    pub image_height: u32,
}

impl FeaturePyramid {
    /// Checks stride ordering and `ceil(image / stride)` level dimensions.
    pub fn validate(&self) -> Result<(), String> {
        for pair in self.levels.windows(2) {
            if pair[1].stride <= pair[0].stride {
                return Err(format!(
                    "strides must strictly increase, got {} then {}",
                    pair[0].stride, pair[1].stride
                ));
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            let (h, w) = level_dims(self.image_width, self.image_height, l.stride);
            if l.map.height() != h || l.map.width() != w {
                return Err(format!(
                    "level {i} (stride {}) is {}x{}, expected {h}x{w}",
                    l.stride,
                    l.map.height(),
                    l.map.width()
                ));
            }
        }
        Ok(())
    }
}

/// `(height, width)` of the feature map for a given stride.
pub fn level_dims(image_width: u32, image_height: u32, stride: usize) -> (usize, usize) {
    (
        (image_height as usize).div_ceil(stride),
        (image_width as usize).div_ceil(stride),
    )
}

/// Convolution weights stored `[out][in][ki][kj]`, plus one bias per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    ) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    #[inline]
    pub fn index(&self, o: usize, c: usize, ki: usize, kj: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel_h + ki) * self.kernel_w + kj
    }

    pub fn weight(&self, o: usize, c: usize, ki: usize, kj: usize) -> f64 {
        self.weights[self.index(o, c, ki, kj)]
    }

    fn check(&self) -> Result<(), TensorError> {
        if self.kernel_h.is_multiple_of(2) || self.kernel_w.is_multiple_of(2) {
            return Err(TensorError::EvenKernel {
                kernel_h: self.kernel_h,
                kernel_w: self.kernel_w,
            });
        }
        let expected = self.out_channels * self.in_channels * self.taps();
        if self.weights.len() != expected {
            return Err(TensorError::ShapeMismatch {
                expected,
                got: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_channels {
            return Err(TensorError::ShapeMismatch {
                expected: self.out_channels,
                got: self.bias.len(),
            });
        }
        Ok(())
    }
}

/// SAME-padded dilated convolution with zero padding.
///
/// Each output element accumulates bias first, then input channels, then
/// kernel rows, then kernel columns. The order is fixed.
pub fn conv2d_dilated(
    input: &FeatureMap,
    w: &ConvWeights,
    dilation: usize,
) -> Result<FeatureMap, TensorError> {
    w.check()?;
    if dilation == 0 {
        return Err(TensorError::ZeroDilation);
    }
    if input.channels() != w.in_channels {
        return Err(TensorError::ChannelMismatch {
            expected: w.in_channels,
            got: input.channels(),
        });
    }
    let (h, wd) = (input.height() as isize, input.width() as isize);
    let half_h = (w.kernel_h / 2) as isize;
    let half_w = (w.kernel_w / 2) as isize;
    let d = dilation as isize;
    let plane = (h * wd) as usize;
    let mut out = FeatureMap::zeros(w.out_channels, input.height(), input.width());
    for (o, out_plane) in out.as_mut_slice().chunks_mut(plane.max(1)).enumerate() {
        out_plane.fill(w.bias[o]);
        for c in 0..w.in_channels {
            let in_plane = input.plane(c);
            for ki in 0..w.kernel_h {
                let dy = d * (ki as isize - half_h);
                let r_lo = (-dy).max(0);
                let r_hi = (h - dy).min(h);
                for kj in 0..w.kernel_w {
                    let weight = w.weight(o, c, ki, kj);
                    let dx = d * (kj as isize - half_w);
                    let c_lo = (-dx).max(0);
                    let c_hi = (wd - dx).min(wd);
                    if c_lo >= c_hi {
                        continue;
                    }
                    for r in r_lo..r_hi {
                        let src = ((r + dy) * wd + c_lo + dx) as usize;
                        let dst = (r * wd + c_lo) as usize;
                        let n = (c_hi - c_lo) as usize;
                        for (y, x) in out_plane[dst..dst + n]
                            .iter_mut()
                            .zip(&in_plane[src..src + n])
                        {
                            *y += weight * x;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Neighbour indices and weights for one bilinear sample.
///
/// Cell `(r, c)` holds its value at `(c + 0.5, r + 0.5)`. Neighbours may fall
/// outside the map, in which case they read as zero.
#[derive(Debug, Clone, Copy)]
struct BilinearTaps {
    col0: isize,
    row0: isize,
    fx: f64,
    fy: f64,
}

impl BilinearTaps {
    fn at(x: f64, y: f64) -> Self {
        let u = x - 0.5;
        let v = y - 0.5;
        let col0 = u.floor();
        let row0 = v.floor();
        Self {
            col0: col0 as isize,
            row0: row0 as isize,
            fx: u - col0,
            fy: v - row0,
        }
    }

    #[inline]
    fn sample(&self, map: &FeatureMap, ch: usize) -> f64 {
        let (r, c) = (self.row0, self.col0);
        let top =
            (1.0 - self.fx) * map.get_padded(ch, r, c) + self.fx * map.get_padded(ch, r, c + 1);
        let bottom = (1.0 - self.fx) * map.get_padded(ch, r + 1, c)
            + self.fx * map.get_padded(ch, r + 1, c + 1);
        (1.0 - self.fy) * top + self.fy * bottom
    }
}

/// Bilinear interpolation at `(x, y)` in feature-cell coordinates, one value
/// per channel.
pub fn bilinear_sample(input: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    if !x.is_finite() || !y.is_finite() {
        return vec![0.0; input.channels()];
    }
    let taps = BilinearTaps::at(x, y);
    (0..input.channels())
        .map(|ch| taps.sample(input, ch))
        .collect()
}

/// RoI Align with exactly one sample per bin, taken at the bin centre.
///
/// `roi` is in feature-cell coordinates. The result is a `C x out_h x out_w`
/// map whose flattening order matches [`fc_from_conv`].
pub fn roi_align(
    input: &FeatureMap,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap, TensorError> {
    if !roi.has_positive_area() {
        return Err(TensorError::NonPositiveRoi(*roi));
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::EmptyOutput);
    }
    let bin_w = roi.width() / out_w as f64;
    let bin_h = roi.height() / out_h as f64;
    let mut taps = Vec::with_capacity(out_h * out_w);
    for bi in 0..out_h {
        let y = roi.y1 + (bi as f64 + 0.5) * bin_h;
        for bj in 0..out_w {
            let x = roi.x1 + (bj as f64 + 0.5) * bin_w;
            taps.push(BilinearTaps::at(x, y));
        }
    }
    let mut out = Vec::with_capacity(input.channels() * taps.len());
    for ch in 0..input.channels() {
        out.extend(taps.iter().map(|t| t.sample(input, ch)));
    }
    FeatureMap::from_vec(input.channels(), out_h, out_w, out)
}

/// Fully-connected form of a convolution: `out_dim x in_dim` row-major.
///
/// Built from a [`ConvWeights`] it borrows the convolution's storage, so both
/// forms always read the same parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights<'a> {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: Cow<'a, [f64]>,
    pub bias: Cow<'a, [f64]>,
}

/// Row `o` of the FC matrix is the `[in][ki][kj]` block of output channel `o`,
/// so a patch flattened channel-major then row then column lines up with it.
pub fn fc_from_conv(w: &ConvWeights) -> FcWeights<'_> {
    FcWeights {
        out_dim: w.out_channels,
        in_dim: w.in_channels * w.taps(),
        weights: Cow::Borrowed(&w.weights),
        bias: Cow::Borrowed(&w.bias),
    }
}

/// Inverse of [`fc_from_conv`].
pub fn conv_from_fc(
    fc: &FcWeights,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
) -> Result<ConvWeights, TensorError> {
    let expected = in_channels * kernel_h * kernel_w;
    if fc.in_dim != expected {
        return Err(TensorError::ShapeMismatch {
            expected,
            got: fc.in_dim,
        });
    }
    Ok(ConvWeights {
        out_channels: fc.out_dim,
        in_channels,
        kernel_h,
        kernel_w,
        weights: fc.weights.to_vec(),
        bias: fc.bias.to_vec(),
    })
}

/// `W * flatten(patch) + b`.
pub fn fc_apply(patch: &[f64], fc: &FcWeights) -> Result<Vec<f64>, TensorError> {
    if patch.len() != fc.in_dim {
        return Err(TensorError::ShapeMismatch {
            expected: fc.in_dim,
            got: patch.len(),
        });
    }
    if fc.weights.len() != fc.out_dim * fc.in_dim || fc.bias.len() != fc.out_dim {
        return Err(TensorError::ShapeMismatch {
            expected: fc.out_dim * fc.in_dim,
            got: fc.weights.len(),
        });
    }
    Ok(fc
        .weights
        .chunks(fc.in_dim.max(1))
        .take(fc.out_dim)
        .zip(fc.bias.iter())
        .map(|(row, b)| row.iter().zip(patch).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |ch, r, col| (ch * 100 + r * 10 + col) as f64)
    }

    #[test]
    fn identity_kernel_is_passthrough() {
        let input = ramp(2, 4, 5);
        let mut w = ConvWeights::zeros(2, 2, 3, 3);
        for o in 0..2 {
            let i = w.index(o, o, 1, 1);
            w.weights[i] = 1.0;
        }
        for d in 1..4 {
            assert_eq!(conv2d_dilated(&input, &w, d).unwrap(), input);
        }
    }

    #[test]
    fn all_ones_on_constant_interior() {
        let input = FeatureMap::from_fn(1, 5, 5, |_, _, _| 2.5);
        let mut w = ConvWeights::zeros(1, 1, 3, 3);
        w.weights.fill(1.0);
        let out = conv2d_dilated(&input, &w, 1).unwrap();
        assert_eq!(out.get(0, 2, 2), 9.0 * 2.5);
        // corner sees 4 taps
        assert_eq!(out.get(0, 0, 0), 4.0 * 2.5);
    }

    #[test]
    fn conv_rejects_bad_inputs() {
        let input = ramp(1, 3, 3);
        assert!(matches!(
            conv2d_dilated(&input, &ConvWeights::zeros(1, 1, 2, 3), 1),
            Err(TensorError::EvenKernel { .. })
        ));
        assert!(matches!(
            conv2d_dilated(&input, &ConvWeights::zeros(1, 2, 3, 3), 1),
            Err(TensorError::ChannelMismatch { .. })
        ));
        assert!(conv2d_dilated(&input, &ConvWeights::zeros(1, 1, 3, 3), 0).is_err());
    }

    #[test]
    fn bilinear_basics() {
        let m = ramp(2, 3, 4);
        assert_eq!(bilinear_sample(&m, 1.5, 2.5), vec![21.0, 121.0]);
        assert_eq!(bilinear_sample(&m, 2.0, 0.5), vec![1.5, 101.5]);
        assert_eq!(bilinear_sample(&m, -10.0, 40.0), vec![0.0, 0.0]);
        // half a cell past the last centre blends with the zero padding
        assert_eq!(bilinear_sample(&m, 4.0, 0.5)[0], 0.5 * 3.0);
    }

    #[test]
    fn roi_align_single_bin_at_cell_center() {
        let m = ramp(1, 4, 4);
        let roi = BBox::from_center(2.5, 1.5, 0.7, 3.0);
        let p = roi_align(&m, &roi, 1, 1).unwrap();
        assert_eq!(p.as_slice(), &[12.0]);
        assert!(roi_align(&m, &BBox::new(1.0, 1.0, 1.0, 2.0), 3, 3).is_err());
    }

    #[test]
    fn roi_align_constant_map() {
        let m = FeatureMap::from_fn(1, 10, 10, |_, _, _| 3.0);
        let p = roi_align(&m, &BBox::new(2.2, 3.1, 6.7, 7.9), 3, 3).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn fc_layout_roundtrip_and_trivia() {
        let mut w = ConvWeights::zeros(2, 3, 3, 1);
        for (i, v) in w.weights.iter_mut().enumerate() {
            *v = i as f64;
        }
        let fc = fc_from_conv(&w);
        assert_eq!(fc.in_dim, 9);
        assert_eq!(conv_from_fc(&fc, 3, 3, 1).unwrap(), w);
        assert!(conv_from_fc(&fc, 2, 3, 1).is_err());

        let mut z = ConvWeights::zeros(2, 1, 3, 3);
        z.bias = vec![0.5, -1.5];
        let out = fc_apply(&[7.0; 9], &fc_from_conv(&z)).unwrap();
        assert_eq!(out, vec![0.5, -1.5]);

        let mut s = ConvWeights::zeros(1, 1, 1, 1);
        s.weights[0] = 3.0;
        assert_eq!(fc_apply(&[2.0], &fc_from_conv(&s)).unwrap(), vec![6.0]);
        assert!(fc_apply(&[1.0, 2.0], &fc_from_conv(&s)).is_err());
    }

    #[test]
    fn pyramid_validation() {
        let p = FeaturePyramid {
            levels: vec![
                PyramidLevel {
                    map: FeatureMap::zeros(1, 25, 13),
                    stride: 4,
                },
                PyramidLevel {
                    map: FeatureMap::zeros(1, 13, 7),
                    stride: 8,
                },
            ],
            image_width: 50,
            image_height: 100,
        };
        assert!(p.validate().is_ok());
        assert_eq!(level_dims(50, 100, 8), (13, 7));
        let mut bad = p.clone();
        bad.levels.swap(0, 1);
        assert!(bad.validate().is_err());
    }
}
