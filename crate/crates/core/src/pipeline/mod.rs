//! Augment-then-refine proposal pipeline.
//!
//! [`augment`] runs each head densely over the pyramid, decodes its deltas
//! against the hand-designed grid and keeps the best boxes. [`refine`] pools a
//! patch for every kept box from the level that produced it and runs the same
//! parameters in fully-connected form. Only the refinement path is ever
//! differentiated; see [`train`].

mod labels;
pub mod train;

pub use labels::{
    anchor_guided_append, assign_labels, filter_positive_redundancy, sample_minibatch, Assignment,
    Label,
};
pub use train::{compute_gradients, train_step, GradientBatch, StepOutcome, TrainRecord};

use thiserror::Error;

use crate::geometry::{
    argsort_desc, clip_to_image, decode_deltas, generate_anchor_grid, iou, nms, Anchor, AnchorSpec,
    BBox, GeometryError,
};
use crate::head::{forward_conv, forward_fc_traced, FcTrace, HeadError, HeadSet};
use crate::tensor::{roi_align, FeaturePyramid, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene has no ground-truth boxes")]
    NoGroundTruth,
    #[error("no labelled examples to sample from")]
    NoLabels,
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("proposal refers to level {level} / head {head}, which does not exist")]
    UnknownSource { level: usize, head: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub crowd: bool,
}

/// One image: its ground truth and the feature pyramid standing in for a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub gts: Vec<GroundTruth>,
    pub features: FeaturePyramid,
}

impl Scene {
    /// Non-crowd ground-truth boxes; crowd regions are skipped everywhere.
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.gts
            .iter()
            .filter(|g| !g.crowd)
            .map(|g| g.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// `(m, n)`: kernel height and width shared by every head.
    pub kernel: (usize, usize),
    /// One head per dilation.
    pub dilations: Vec<usize>,
    pub share_params: bool,
    pub pre_nms_top_k: usize,
    pub augment_nms_iou: f64,
    pub post_nms_keep: usize,
    /// Keep the global top boxes by score instead of running NMS during augmentation.
    pub single_stage_selection: bool,
    /// `None` resolves to 0.7, or 0.6 under single-stage selection.
    pub final_nms_iou: Option<f64>,
    pub eval_keep: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub positive_filter_iou: f64,
    pub anchor_guided: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kernel: (3, 3),
            dilations: vec![2, 4],
            share_params: false,
            pre_nms_top_k: 1000,
            augment_nms_iou: 0.7,
            post_nms_keep: 2000,
            single_stage_selection: false,
            final_nms_iou: None,
            eval_keep: 1000,
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch_size: 256,
            positive_fraction: 0.5,
            positive_filter_iou: 0.7,
            anchor_guided: true,
        }
    }
}

impl PipelineConfig {
    pub fn final_nms_threshold(&self) -> f64 {
        self.final_nms_iou
            .unwrap_or(if self.single_stage_selection {
                0.6
            } else {
                0.7
            })
    }

    pub fn validate(&self) -> Result<(), String> {
        let (m, n) = self.kernel;
        if m == 0 || n == 0 || m % 2 == 0 || n % 2 == 0 {
            return Err(format!("kernel {m}x{n} must have odd, positive dimensions"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err("dilations must be a non-empty list of positive integers".into());
        }
        if !(0.0 < self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(format!(
                "need 0 < neg_iou < pos_iou <= 1, got {} / {}",
                self.neg_iou, self.pos_iou
            ));
        }
        for (name, v) in [
            ("pre_nms_top_k", self.pre_nms_top_k),
            ("post_nms_keep", self.post_nms_keep),
            ("eval_keep", self.eval_keep),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        let mut unit = vec![
            ("augment_nms_iou", self.augment_nms_iou),
            ("positive_filter_iou", self.positive_filter_iou),
            ("positive_fraction", self.positive_fraction),
        ];
        if let Some(t) = self.final_nms_iou {
            unit.push(("final_nms_iou", t));
        }
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn anchor_spec(&self, dilation: usize, stride: usize) -> Result<AnchorSpec, GeometryError> {
        AnchorSpec::new(self.kernel.0, self.kernel.1, dilation, stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Augmented,
    AnchorGuided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub level: usize,
    pub head: usize,
    pub origin: Origin,
    /// Index of the box this one was refined from, when it came out of [`refine`].
    pub parent: Option<usize>,
}

/// Scored boxes, kept sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub items: Vec<Proposal>,
}

impl ProposalSet {
    /// Stable sort by descending score.
    pub fn from_unsorted(mut items: Vec<Proposal>) -> Self {
        items.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.items.iter().map(|p| p.bbox).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.items.iter().map(|p| p.score).collect()
    }

    pub fn is_sorted(&self) -> bool {
        self.items.windows(2).all(|w| w[0].score >= w[1].score)
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            items: self.items.iter().take(k).copied().collect(),
        }
    }
}

/// A hand-designed anchor with the objectness its head gave it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredAnchor {
    pub anchor: Anchor,
    pub head: usize,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    /// The augmented anchors.
    pub anchors: ProposalSet,
    /// Every hand-designed anchor, grouped by head then level, row-major.
    pub grid: Vec<ScoredAnchor>,
    /// `grid[i]` after decoding its deltas and clipping, before any selection.
    pub decoded: Vec<BBox>,
}

/// Hand-designed anchors for every head and level, in the same order as
/// [`Augmentation::grid`].
pub fn hand_designed_anchors(
    features: &FeaturePyramid,
    cfg: &PipelineConfig,
) -> Result<Vec<Anchor>, PipelineError> {
    let mut out = Vec::new();
    for &d in &cfg.dilations {
        for (li, level) in features.levels.iter().enumerate() {
            let spec = cfg.anchor_spec(d, level.stride)?;
            out.extend(generate_anchor_grid(
                &spec,
                li,
                level.map.height(),
                level.map.width(),
            ));
        }
    }
    Ok(out)
}

fn check_heads(heads: &HeadSet, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let dil: Vec<usize> = heads.bindings.iter().map(|b| b.dilation).collect();
    if dil != cfg.dilations {
        return Err(PipelineError::Config(format!(
            "heads have dilations {dil:?}, configuration expects {:?}",
            cfg.dilations
        )));
    }
    if heads.kernel() != cfg.kernel {
        return Err(PipelineError::Config(format!(
            "heads use a {:?} kernel, configuration expects {:?}",
            heads.kernel(),
            cfg.kernel
        )));
    }
    Ok(())
}

/// Gradient-free augmentation of the hand-designed anchors.
pub fn augment(
    scene: &Scene,
    heads: &HeadSet,
    cfg: &PipelineConfig,
) -> Result<Augmentation, PipelineError> {
    check_heads(heads, cfg)?;
    let mut grid = Vec::new();
    let mut all_decoded = Vec::new();
    let mut pool = Vec::new();
    for (h, binding) in heads.bindings.iter().enumerate() {
        let params = heads.params_of(h);
        for (li, level) in scene.features.levels.iter().enumerate() {
            let spec = cfg.anchor_spec(binding.dilation, level.stride)?;
            let out = forward_conv(&level.map, params, binding.dilation)?;
            let anchors = generate_anchor_grid(&spec, li, out.height, out.width);
            let mut decoded = Vec::with_capacity(anchors.len());
            let mut logits = Vec::with_capacity(anchors.len());
            for (anchor, o) in anchors.iter().zip(&out.outputs) {
                grid.push(ScoredAnchor {
                    anchor: *anchor,
                    head: h,
                    logit: o.logit,
                });
                decoded.push(clip_to_image(
                    &decode_deltas(&anchor.bbox, &o.delta),
                    scene.width,
                    scene.height,
                ));
                logits.push(o.logit);
            }
            let mut taken = 0;
            for i in argsort_desc(&logits) {
                if taken == cfg.pre_nms_top_k {
                    break;
                }
                if !decoded[i].has_positive_area() {
                    continue;
                }
                pool.push(Proposal {
                    bbox: decoded[i],
                    score: logits[i],
                    level: li,
                    head: h,
                    origin: Origin::Augmented,
                    parent: None,
                });
                taken += 1;
            }
            all_decoded.extend(decoded);
        }
    }
    let anchors = if cfg.single_stage_selection {
        ProposalSet::from_unsorted(pool).truncated(cfg.post_nms_keep)
    } else {
        let boxes: Vec<BBox> = pool.iter().map(|p| p.bbox).collect();
        let scores: Vec<f64> = pool.iter().map(|p| p.score).collect();
        let keep = nms(&boxes, &scores, cfg.augment_nms_iou, cfg.post_nms_keep)?;
        ProposalSet {
            items: keep.into_iter().map(|i| pool[i]).collect(),
        }
    };
    Ok(Augmentation {
        anchors,
        grid,
        decoded: all_decoded,
    })
}

/// Pools a patch for `p` from its source level and evaluates its head in
/// fully-connected form. `None` when the box has no area.
pub(crate) fn refine_one(
    p: &Proposal,
    scene: &Scene,
    heads: &HeadSet,
) -> Result<Option<FcTrace>, PipelineError> {
    let unknown = PipelineError::UnknownSource {
        level: p.level,
        head: p.head,
    };
    let level = scene.features.levels.get(p.level).ok_or(unknown)?;
    if p.head >= heads.len() {
        return Err(PipelineError::UnknownSource {
            level: p.level,
            head: p.head,
        });
    }
    if !p.bbox.has_positive_area() {
        return Ok(None);
    }
    let params = heads.params_of(p.head);
    let (kh, kw) = params.kernel();
    let roi = p.bbox.scaled(1.0 / level.stride as f64);
    let patch = roi_align(&level.map, &roi, kh, kw)?;
    Ok(Some(forward_fc_traced(&patch, params)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub proposals: ProposalSet,
    /// Input boxes dropped for having zero area.
    pub skipped: usize,
}

/// Refines every input box once; each output records its input index in `parent`.
pub fn refine(
    anchors: &ProposalSet,
    scene: &Scene,
    heads: &HeadSet,
) -> Result<Refinement, PipelineError> {
    let mut items = Vec::with_capacity(anchors.len());
    let mut skipped = 0;
    for (i, p) in anchors.items.iter().enumerate() {
        let Some(trace) = refine_one(p, scene, heads)? else {
            skipped += 1;
            continue;
        };
        items.push(Proposal {
            bbox: clip_to_image(
                &decode_deltas(&p.bbox, &trace.output.delta),
                scene.width,
                scene.height,
            ),
            score: trace.output.logit,
            parent: Some(i),
            ..*p
        });
    }
    Ok(Refinement {
        proposals: ProposalSet::from_unsorted(items),
        skipped,
    })
}

/// Augment, refine, final NMS, keep the best `eval_keep`.
pub fn infer(
    scene: &Scene,
    heads: &HeadSet,
    cfg: &PipelineConfig,
) -> Result<ProposalSet, PipelineError> {
    let aug = augment(scene, heads, cfg)?;
    let refined = refine(&aug.anchors, scene, heads)?.proposals;
    let keep = nms(
        &refined.boxes(),
        &refined.scores(),
        cfg.final_nms_threshold(),
        cfg.eval_keep,
    )?;
    Ok(ProposalSet {
        items: keep.into_iter().map(|i| refined.items[i]).collect(),
    })
}

/// Smallest IoU credited by [`elbo_from_proposals`].
pub const ELBO_IOU_FLOOR: f64 = 1e-6;

/// Mean over ground truths of `ln(max(best IoU, 1e-6))`.
pub fn elbo_from_proposals(proposals: &[BBox], gts: &[BBox]) -> Result<f64, PipelineError> {
    if gts.is_empty() {
        return Err(PipelineError::NoGroundTruth);
    }
    let total: f64 = gts
        .iter()
        .map(|g| {
            let best = proposals.iter().map(|p| iou(p, g)).fold(0.0, f64::max);
            best.max(ELBO_IOU_FLOOR).ln()
        })
        .sum();
    Ok(total / gts.len() as f64)
}

/// Log-IoU likelihood proxy of the inferred proposals against the scene's ground truth.
pub fn em_elbo_diagnostic(
    scene: &Scene,
    heads: &HeadSet,
    cfg: &PipelineConfig,
) -> Result<f64, PipelineError> {
    let gts = scene.gt_boxes();
    if gts.is_empty() {
        return Err(PipelineError::NoGroundTruth);
    }
    let proposals = infer(scene, heads, cfg)?;
    elbo_from_proposals(&proposals.boxes(), &gts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_threshold_follows_selection_mode() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(cfg.final_nms_threshold(), 0.7);
        cfg.single_stage_selection = true;
        assert_eq!(cfg.final_nms_threshold(), 0.6);
        cfg.final_nms_iou = Some(0.5);
        assert_eq!(cfg.final_nms_threshold(), 0.5);
    }

    #[test]
    fn validation_catches_bad_thresholds() {
        let mut cfg = PipelineConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.neg_iou = 0.8;
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            kernel: (2, 3),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig {
            dilations: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn elbo_spot_values() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(elbo_from_proposals(&[g], &[g]).unwrap(), 0.0);
        let far = BBox::new(50.0, 50.0, 60.0, 60.0);
        let v = elbo_from_proposals(&[far], &[g]).unwrap();
        assert!((v - (-13.815_510_557_964_274)).abs() < 1e-12);
        assert!(elbo_from_proposals(&[], &[]).is_err());
    }
}
