//! Synthetic scenes: random boxes plus a hand-built feature pyramid that
//! encodes where they are.
//!
//! Every cell of every level carries five signal channels computed from the
//! ground truth whose centre is nearest the cell centre, among those whose box,
//! grown by `SUPPORT` times its size, contains the cell centre. Cells no box
//! reaches read zero, like a backbone with a finite receptive field:
//!
//! | channel | value |
//! |---|---|
//! | 0 | 1 if the cell centre lies inside any box, else 0 |
//! | 1, 2 | offset from the cell centre to that box centre, over the box width and height |
//! | 3, 4 | `ln(box width / stride)` and `ln(box height / stride)`, over `LOG_NORM` |
//!
//! Any further channels are fixed random mixtures of the five signals.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SceneConfig;
use crate::geometry::BBox;
use crate::pipeline::{GroundTruth, Scene};
use crate::tensor::{level_dims, FeatureMap, FeaturePyramid, PyramidLevel};

pub const SIGNAL_CHANNELS: usize = 5;
pub const LOG_NORM: f64 = 4.0;
pub const SUPPORT: f64 = 2.0;

/// Draws scenes under one [`SceneConfig`]. The mixing matrix for the extra
/// channels is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGenerator {
    pub config: SceneConfig,
    /// `[in_channels - 5][5]`
    mixing: Vec<[f64; SIGNAL_CHANNELS]>,
}

impl SceneGenerator {
    pub fn new(config: SceneConfig, mixing_seed: u64) -> Self {
        let extra = config.in_channels.saturating_sub(SIGNAL_CHANNELS);
        let mut rng = ChaCha8Rng::seed_from_u64(mixing_seed);
        let normal = Normal::new(0.0, 1.0 / (SIGNAL_CHANNELS as f64).sqrt()).expect("valid");
        let mixing = (0..extra)
            .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
            .collect();
        Self { config, mixing }
    }

    pub fn sample_boxes<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<BBox> {
        let c = &self.config;
        let (w_img, h_img) = (c.image_width as f64, c.image_height as f64);
        let n = rng.random_range(c.boxes_min..=c.boxes_max);
        (0..n)
            .map(|_| {
                let s = log_uniform(rng, c.gt_scale_min, c.gt_scale_max);
                let a = log_uniform(rng, c.gt_aspect_min, c.gt_aspect_max);
                let w = (s * a.sqrt()).min(w_img);
                let h = (s / a.sqrt()).min(h_img);
                let x = rng.random::<f64>() * (w_img - w);
                let y = rng.random::<f64>() * (h_img - h);
                BBox::new(x, y, x + w, y + h)
            })
            .collect()
    }

    /// Feature pyramid for the given boxes. Deterministic in its inputs.
    pub fn render_features(&self, gts: &[BBox]) -> FeaturePyramid {
        let c = &self.config;
        let levels = c
            .strides
            .iter()
            .map(|&stride| {
                let (h, w) = level_dims(c.image_width, c.image_height, stride);
                let mut map = FeatureMap::zeros(c.in_channels, h, w);
                for r in 0..h {
                    for col in 0..w {
                        let px = (col as f64 + 0.5) * stride as f64;
                        let py = (r as f64 + 0.5) * stride as f64;
                        let sig = signals(gts, px, py, stride as f64);
                        for (ch, v) in sig.iter().enumerate() {
                            map.set(ch, r, col, *v);
                        }
                        for (k, row) in self.mixing.iter().enumerate() {
                            let v: f64 = row.iter().zip(&sig).map(|(a, b)| a * b).sum();
                            map.set(SIGNAL_CHANNELS + k, r, col, v);
                        }
                    }
                }
                PyramidLevel { map, stride }
            })
            .collect();
        FeaturePyramid {
            levels,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Scene {
        let boxes = self.sample_boxes(rng);
        let features = self.render_features(&boxes);
        Scene {
            width: self.config.image_width,
            height: self.config.image_height,
            gts: boxes
                .into_iter()
                .map(|bbox| GroundTruth { bbox, crowd: false })
                .collect(),
            features,
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn signals(gts: &[BBox], px: f64, py: f64, stride: f64) -> [f64; SIGNAL_CHANNELS] {
    let mut nearest: Option<(&BBox, f64)> = None;
    for g in gts {
        let (cx, cy) = g.center();
        if (cx - px).abs() > 0.5 * SUPPORT * g.width()
            || (cy - py).abs() > 0.5 * SUPPORT * g.height()
        {
            continue;
        }
        let d = (cx - px).powi(2) + (cy - py).powi(2);
        if nearest.is_none_or(|(_, b)| d < b) {
            nearest = Some((g, d));
        }
    }
    let Some((g, _)) = nearest else {
        return [0.0; SIGNAL_CHANNELS];
    };
    let (cx, cy) = g.center();
    let inside = gts.iter().any(|b| b.contains_point(px, py));
    [
        if inside { 1.0 } else { 0.0 },
        (cx - px) / g.width(),
        (cy - py) / g.height(),
        (g.width() / stride).ln() / LOG_NORM,
        (g.height() / stride).ln() / LOG_NORM,
    ]
}

/// `count` scenes from one seeded stream.
pub fn generate_scenes(gen: &SceneGenerator, seed: u64, stream: u64, count: usize) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| gen.generate(&mut rng)).collect()
}
