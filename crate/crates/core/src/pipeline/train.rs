//! One iteration of augment -> label -> refine -> loss -> backward -> update.

use rand::Rng;

use super::{
    anchor_guided_append, assign_labels, augment, filter_positive_redundancy, refine_one,
    sample_minibatch, Label, Origin, PipelineConfig, PipelineError, ProposalSet, Scene,
};
use crate::geometry::encode_deltas;
use crate::head::{backward, loss, HeadSet, LossBreakdown, LossConfig, RpnHeadParams, Sgd, Target};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainRecord {
    pub loss: LossBreakdown,
    pub positives: usize,
    pub negatives: usize,
    /// Boxes handed to refinement (augmented plus anchor-guided).
    pub anchors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    pub record: TrainRecord,
    /// One gradient per parameter set of the [`HeadSet`].
    pub grads: Vec<RpnHeadParams>,
}

/// Loss and parameter gradients of the refinement path for a fixed set of
/// anchors. The anchors enter only as box coordinates.
///
/// Returns `Ok(None)` when sampling leaves nothing to train on.
pub fn compute_gradients<R: Rng + ?Sized>(
    scene: &Scene,
    heads: &HeadSet,
    anchors: &ProposalSet,
    cfg: &PipelineConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<Option<GradientBatch>, PipelineError> {
    let gts = scene.gt_boxes();
    let boxes = anchors.boxes();
    let assignment = assign_labels(&boxes, &gts, cfg);
    let exempt: Vec<bool> = anchors
        .items
        .iter()
        .map(|p| p.origin == Origin::AnchorGuided)
        .collect();
    let labels = filter_positive_redundancy(&boxes, &assignment, &exempt, cfg);
    let sampled = match sample_minibatch(&labels, cfg, rng) {
        Ok(s) => s,
        Err(PipelineError::NoLabels) => return Ok(None),
        Err(e) => return Err(e),
    };

    let mut traces = Vec::with_capacity(sampled.len());
    let mut targets = Vec::with_capacity(sampled.len());
    let mut owner = Vec::with_capacity(sampled.len());
    for &i in &sampled {
        let p = &anchors.items[i];
        let Some(trace) = refine_one(p, scene, heads)? else {
            continue;
        };
        let target = match labels[i] {
            Label::Positive => {
                let gt = assignment.matched[i].expect("positives always have a match");
                Target::Positive(encode_deltas(&p.bbox, &gts[gt])?)
            }
            _ => Target::Negative,
        };
        traces.push(trace);
        targets.push(target);
        owner.push(heads.bindings[p.head].params);
    }
    if traces.is_empty() {
        return Ok(None);
    }

    let outputs: Vec<_> = traces.iter().map(|t| t.output).collect();
    let breakdown = loss(&outputs, &targets, loss_cfg)?;
    let n = traces.len();
    let mut grads = Vec::with_capacity(heads.params.len());
    for (set, params) in heads.params.iter().enumerate() {
        let examples: Vec<_> = traces
            .iter()
            .zip(&targets)
            .zip(&owner)
            .filter(|(_, &o)| o == set)
            .map(|((t, y), _)| (t, y))
            .collect();
        grads.push(backward(&examples, params, loss_cfg, n)?);
    }
    let positives = targets
        .iter()
        .filter(|t| matches!(t, Target::Positive(_)))
        .count();
    Ok(Some(GradientBatch {
        record: TrainRecord {
            loss: breakdown,
            positives,
            negatives: n - positives,
            anchors: anchors.len(),
        },
        grads,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Trained(TrainRecord),
    /// No sampled examples; parameters untouched.
    Skipped,
}

/// Augments without gradients, appends anchor-guided boxes, trains the
/// refinement path on them and applies one optimiser step.
pub fn train_step<R: Rng + ?Sized>(
    scene: &Scene,
    heads: &mut HeadSet,
    cfg: &PipelineConfig,
    loss_cfg: &LossConfig,
    optimizer: &mut Sgd,
    rng: &mut R,
) -> Result<StepOutcome, PipelineError> {
    let aug = augment(scene, heads, cfg)?;
    let anchors = if cfg.anchor_guided {
        anchor_guided_append(
            &aug.anchors,
            &aug.grid,
            &scene.gt_boxes(),
            scene.width,
            scene.height,
        )
    } else {
        aug.anchors
    };
    let Some(batch) = compute_gradients(scene, heads, &anchors, cfg, loss_cfg, rng)? else {
        return Ok(StepOutcome::Skipped);
    };
    optimizer.step(&mut heads.params, &batch.grads)?;
    Ok(StepOutcome::Trained(batch.record))
}
