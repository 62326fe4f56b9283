use rand::Rng;

use super::{Origin, PipelineConfig, PipelineError, Proposal, ProposalSet, ScoredAnchor};
use crate::geometry::{clip_to_image, iou, nms, BBox};

/// Appends, for every ground truth, the hand-designed anchor it overlaps most
/// (ties go to the lowest grid index). An anchor picked by several ground
/// truths is appended once. The result is re-sorted by score.
pub fn anchor_guided_append(
    augmented: &ProposalSet,
    grid: &[ScoredAnchor],
    gts: &[BBox],
    image_width: u32,
    image_height: u32,
) -> ProposalSet {
    let mut chosen: Vec<usize> = Vec::new();
    for g in gts {
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in grid.iter().enumerate() {
            let v = iou(&a.anchor.bbox, g);
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            if !chosen.contains(&i) {
                chosen.push(i);
            }
        }
    }
    if chosen.is_empty() {
        return augmented.clone();
    }
    let mut items = augmented.items.clone();
    items.extend(chosen.into_iter().map(|i| {
        let a = &grid[i];
        Proposal {
            bbox: clip_to_image(&a.anchor.bbox, image_width, image_height),
            score: a.logit,
            level: a.anchor.level_index,
            head: a.head,
            origin: Origin::AnchorGuided,
            parent: None,
        }
    }));
    ProposalSet::from_unsorted(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<Label>,
    /// Ground truth with the highest IoU, `None` when there are no ground truths.
    pub matched: Vec<Option<usize>>,
    pub max_iou: Vec<f64>,
}

impl Assignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Positive above `pos_iou`, negative below `neg_iou`, ignored in between.
/// Each ground truth's best anchor is forced positive.
pub fn assign_labels(anchors: &[BBox], gts: &[BBox], cfg: &PipelineConfig) -> Assignment {
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut matched = vec![None; n];
    let mut max_iou = vec![0.0; n];
    if gts.is_empty() {
        return Assignment {
            labels,
            matched,
            max_iou,
        };
    }
    let mut best_per_gt: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, g);
            if v > best.1 {
                best = (j, v);
            }
            if v > 0.0 && best_per_gt[j].is_none_or(|(_, b)| v > b) {
                best_per_gt[j] = Some((i, v));
            }
        }
        matched[i] = Some(best.0);
        max_iou[i] = best.1;
        labels[i] = if best.1 > cfg.pos_iou {
            Label::Positive
        } else if best.1 < cfg.neg_iou {
            Label::Negative
        } else {
            Label::Ignore
        };
    }
    for (i, _) in best_per_gt.into_iter().flatten() {
        labels[i] = Label::Positive;
    }
    Assignment {
        labels,
        matched,
        max_iou,
    }
}

/// Greedy NMS among positives, scored by their IoU with the matched ground
/// truth. Suppressed positives become [`Label::Ignore`]; positives flagged in
/// `exempt`, negatives and ignores are left alone.
pub fn filter_positive_redundancy(
    anchors: &[BBox],
    assignment: &Assignment,
    exempt: &[bool],
    cfg: &PipelineConfig,
) -> Vec<Label> {
    let mut labels = assignment.labels.clone();
    let candidates: Vec<usize> = (0..anchors.len())
        .filter(|&i| labels[i] == Label::Positive && !exempt.get(i).copied().unwrap_or(false))
        .collect();
    if candidates.is_empty() {
        return labels;
    }
    let boxes: Vec<BBox> = candidates.iter().map(|&i| anchors[i]).collect();
    let scores: Vec<f64> = candidates.iter().map(|&i| assignment.max_iou[i]).collect();
    let keep = nms(&boxes, &scores, cfg.positive_filter_iou, usize::MAX)
        .expect("boxes and scores built together");
    let mut survives = vec![false; candidates.len()];
    for k in keep {
        survives[k] = true;
    }
    for (&i, s) in candidates.iter().zip(survives) {
        if !s {
            labels[i] = Label::Ignore;
        }
    }
    labels
}

/// Up to `batch_size` indices, at most `positive_fraction` of them positive,
/// drawn uniformly without replacement from each pool. Returned ascending.
pub fn sample_minibatch<R: Rng + ?Sized>(
    labels: &[Label],
    cfg: &PipelineConfig,
    rng: &mut R,
) -> Result<Vec<usize>, PipelineError> {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Positive)
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Negative)
        .collect();
    if pos.is_empty() && neg.is_empty() {
        return Err(PipelineError::NoLabels);
    }
    let pos_cap = (cfg.batch_size as f64 * cfg.positive_fraction).floor() as usize;
    let n_pos = pos.len().min(pos_cap);
    let n_neg = neg.len().min(cfg.batch_size - n_pos);
    let mut out: Vec<usize> = rand::seq::index::sample(rng, pos.len(), n_pos)
        .into_iter()
        .map(|k| pos[k])
        .chain(
            rand::seq::index::sample(rng, neg.len(), n_neg)
                .into_iter()
                .map(|k| neg[k]),
        )
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchor_grid, AnchorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    fn scored_grid() -> Vec<ScoredAnchor> {
        let spec = AnchorSpec::new(3, 3, 2, 4).unwrap();
        generate_anchor_grid(&spec, 0, 4, 4)
            .into_iter()
            .enumerate()
            .map(|(i, anchor)| ScoredAnchor {
                anchor,
                head: 0,
                logit: -(i as f64),
            })
            .collect()
    }

    #[test]
    fn threshold_labels() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.8, 0.2 and 0.5 against g
        let a = BBox::new(0.0, 0.0, 10.0, 8.0);
        let b = BBox::new(0.0, 0.0, 10.0, 2.0);
        let c = BBox::new(0.0, 0.0, 10.0, 5.0);
        let asg = assign_labels(&[a, b, c], &[g], &cfg());
        assert_eq!(
            asg.labels,
            vec![Label::Positive, Label::Negative, Label::Ignore]
        );
        assert_eq!(asg.matched, vec![Some(0); 3]);

        // alone, the 0.5 box is the best anchor for g and gets forced positive
        let asg = assign_labels(&[b, c], &[g], &cfg());
        assert_eq!(asg.labels, vec![Label::Negative, Label::Positive]);
    }

    #[test]
    fn forced_argmax_rescues_low_iou_gt() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let a = BBox::new(0.0, 0.0, 10.0, 4.5); // IoU 0.45
        let far = BBox::new(40.0, 40.0, 50.0, 50.0);
        let asg = assign_labels(&[far, a], &[g], &cfg());
        assert!((asg.max_iou[1] - 0.45).abs() < 1e-12);
        assert_eq!(asg.labels, vec![Label::Negative, Label::Positive]);
    }

    #[test]
    fn no_gts_means_all_negative() {
        let asg = assign_labels(&[BBox::new(0.0, 0.0, 1.0, 1.0)], &[], &cfg());
        assert_eq!(asg.labels, vec![Label::Negative]);
        assert_eq!(asg.matched, vec![None]);
    }

    #[test]
    fn anchor_guided_cases() {
        let grid = scored_grid();
        let aug = ProposalSet::default();
        assert_eq!(anchor_guided_append(&aug, &grid, &[], 16, 16), aug);

        let exact = grid[5].anchor.bbox;
        let out = anchor_guided_append(&aug, &grid, &[exact], 100, 100);
        assert_eq!(out.len(), 1);
        assert_eq!(out.items[0].bbox, clip_to_image(&exact, 100, 100));
        assert_eq!(out.items[0].level, 0);
        assert_eq!(out.items[0].origin, Origin::AnchorGuided);

        // two gts nudged around the same anchor share one appended copy
        let g1 = BBox::new(exact.x1 + 0.5, exact.y1, exact.x2 + 0.5, exact.y2);
        let g2 = BBox::new(exact.x1, exact.y1 - 0.5, exact.x2, exact.y2 - 0.5);
        let out = anchor_guided_append(&aug, &grid, &[g1, g2], 100, 100);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn redundancy_filter() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let a = BBox::new(0.0, 0.0, 10.0, 9.0);
        let b = BBox::new(0.0, 0.0, 10.0, 9.5);
        let neg = BBox::new(50.0, 50.0, 60.0, 60.0);
        let boxes = [a, b, neg];
        let asg = assign_labels(&boxes, &[g], &cfg());
        let out = filter_positive_redundancy(&boxes, &asg, &[false; 3], &cfg());
        assert_eq!(out, vec![Label::Ignore, Label::Positive, Label::Negative]);
        let out = filter_positive_redundancy(&boxes, &asg, &[true, false, false], &cfg());
        assert_eq!(out, vec![Label::Positive, Label::Positive, Label::Negative]);

        let none = assign_labels(&[neg], &[BBox::new(0.0, 0.0, 1.0, 1.0)], &cfg());
        let mut no_pos = none.clone();
        no_pos.labels = vec![Label::Negative];
        assert_eq!(
            filter_positive_redundancy(&[neg], &no_pos, &[false], &cfg()),
            no_pos.labels
        );
    }

    #[test]
    fn sampling_counts() {
        let mut labels = vec![Label::Positive; 10];
        labels.extend(vec![Label::Negative; 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_minibatch(&labels, &cfg(), &mut rng).unwrap();
        let pos = s.iter().filter(|&&i| labels[i] == Label::Positive).count();
        assert_eq!((pos, s.len() - pos), (10, 246));

        let mut labels = vec![Label::Positive; 500];
        labels.extend(vec![Label::Negative; 500]);
        let s = sample_minibatch(&labels, &cfg(), &mut rng).unwrap();
        let pos = s.iter().filter(|&&i| labels[i] == Label::Positive).count();
        assert_eq!((pos, s.len() - pos), (128, 128));

        let a = sample_minibatch(&labels, &cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_minibatch(&labels, &cfg(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut uniq = a.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), a.len());

        assert!(sample_minibatch(&[Label::Ignore], &cfg(), &mut rng).is_err());
    }
}
