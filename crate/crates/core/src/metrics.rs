//! Proposal and anchor quality measures.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{iou, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no ground-truth boxes")]
    NoGroundTruth,
    #[error("AUC needs at least one positive and one negative (got {positives} / {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub fn of(b: &BBox) -> Self {
        let a = b.area();
        if a < SMALL_AREA {
            SizeBucket::Small
        } else if a < MEDIUM_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Greedy best-first matching at one threshold: each ground truth in turn
/// takes its highest-IoU unmatched proposal with IoU >= `threshold`.
/// Returns, per ground truth, whether it was matched.
pub fn greedy_match(ious: &[Vec<f64>], num_proposals: usize, threshold: f64) -> Vec<bool> {
    let mut used = vec![false; num_proposals];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (p, &v) in row.iter().enumerate() {
                if !used[p] && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((p, v));
                }
            }
            match best {
                Some((p, _)) => {
                    used[p] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Matched counts accumulated over any number of images.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallAccumulator {
    k: usize,
    thresholds: Vec<f64>,
    /// `[bucket][threshold]` matched counts.
    matched: [Vec<usize>; 3],
    totals: [usize; 3],
}

impl RecallAccumulator {
    pub fn new(k: usize) -> Self {
        Self::with_thresholds(k, coco_iou_thresholds())
    }

    pub fn with_thresholds(k: usize, thresholds: Vec<f64>) -> Self {
        let t = thresholds.len();
        Self {
            k,
            thresholds,
            matched: [vec![0; t], vec![0; t], vec![0; t]],
            totals: [0; 3],
        }
    }

    /// `proposals` must be sorted by descending score; only the first `k` count.
    pub fn add_image(&mut self, proposals: &[BBox], gts: &[BBox]) {
        let top = &proposals[..proposals.len().min(self.k)];
        let ious: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| top.iter().map(|p| iou(p, g)).collect())
            .collect();
        let buckets: Vec<usize> = gts.iter().map(|g| SizeBucket::of(g).index()).collect();
        for &b in &buckets {
            self.totals[b] += 1;
        }
        for (ti, &t) in self.thresholds.iter().enumerate() {
            for (hit, &b) in greedy_match(&ious, top.len(), t).iter().zip(&buckets) {
                if *hit {
                    self.matched[b][ti] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for b in 0..3 {
            self.totals[b] += other.totals[b];
            for (a, o) in self.matched[b].iter_mut().zip(&other.matched[b]) {
                *a += o;
            }
        }
    }

    fn ar_over(&self, buckets: &[usize]) -> Option<f64> {
        let total: usize = buckets.iter().map(|&b| self.totals[b]).sum();
        if total == 0 || self.thresholds.is_empty() {
            return None;
        }
        let sum: f64 = (0..self.thresholds.len())
            .map(|ti| {
                buckets.iter().map(|&b| self.matched[b][ti]).sum::<usize>() as f64 / total as f64
            })
            .sum();
        Some(sum / self.thresholds.len() as f64)
    }

    pub fn report(&self) -> RecallReport {
        let total: usize = self.totals.iter().sum();
        let recalls = self
            .thresholds
            .iter()
            .enumerate()
            .map(|(ti, &t)| {
                let m: usize = (0..3).map(|b| self.matched[b][ti]).sum();
                ThresholdRecall {
                    iou: t,
                    recall: (total > 0).then(|| m as f64 / total as f64),
                }
            })
            .collect();
        RecallReport {
            k: self.k,
            num_gts: total,
            ar: self.ar_over(&[0, 1, 2]),
            ar_small: self.ar_over(&[0]),
            ar_medium: self.ar_over(&[1]),
            ar_large: self.ar_over(&[2]),
            recalls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdRecall {
    pub iou: f64,
    pub recall: Option<f64>,
}

/// Average recall of the top-`k` proposals. Fields are `None` when there is
/// no ground truth to recall (overall or in that size bucket).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallReport {
    pub k: usize,
    pub num_gts: usize,
    pub ar: Option<f64>,
    pub ar_small: Option<f64>,
    pub ar_medium: Option<f64>,
    pub ar_large: Option<f64>,
    pub recalls: Vec<ThresholdRecall>,
}

pub fn average_recall(proposals: &[BBox], gts: &[BBox], k: usize) -> RecallReport {
    let mut acc = RecallAccumulator::new(k);
    acc.add_image(proposals, gts);
    acc.report()
}

/// Mean over ground truths of the best IoU any anchor achieves.
pub fn mean_best_iou(anchors: &[BBox], gts: &[BBox]) -> Result<f64, MetricsError> {
    if gts.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    Ok(best_ious(anchors, gts).iter().sum::<f64>() / gts.len() as f64)
}

/// Per ground truth, the best IoU over `anchors`.
pub fn best_ious(anchors: &[BBox], gts: &[BBox]) -> Vec<f64> {
    gts.iter()
        .map(|g| anchors.iter().map(|a| iou(a, g)).fold(0.0, f64::max))
        .collect()
}

/// Area under the ROC curve as the Mann-Whitney statistic:
/// `P(pos > neg) + 0.5 * P(tie)`, using mid-ranks for tied scores.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// How anchors are split into positives and negatives for separability.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum LabelingRule {
    /// Positive when the anchor centre lies inside any ground truth.
    #[default]
    CenterInsideGt,
    /// Positive above `pos`, negative below `neg`, others left out.
    ThresholdPair { pos: f64, neg: f64 },
}

/// Scores (max IoU with any ground truth) and labels under `rule`; anchors the
/// rule leaves out are skipped.
pub fn separability_samples(
    anchors: &[BBox],
    gts: &[BBox],
    rule: LabelingRule,
) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::with_capacity(anchors.len());
    let mut labels = Vec::with_capacity(anchors.len());
    for a in anchors {
        let s = gts.iter().map(|g| iou(a, g)).fold(0.0, f64::max);
        let label = match rule {
            LabelingRule::CenterInsideGt => {
                let (cx, cy) = a.center();
                Some(gts.iter().any(|g| g.contains_point(cx, cy)))
            }
            LabelingRule::ThresholdPair { pos, neg } => {
                if s > pos {
                    Some(true)
                } else if s < neg {
                    Some(false)
                } else {
                    None
                }
            }
        };
        if let Some(l) = label {
            scores.push(s);
            labels.push(l);
        }
    }
    (scores, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnchorQualityReport {
    pub mean_best_iou: f64,
    pub auc_roc: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn anchor_separability(
    anchors: &[BBox],
    gts: &[BBox],
    rule: LabelingRule,
) -> Result<AnchorQualityReport, MetricsError> {
    let mut acc = AnchorQualityAccumulator::new(rule);
    acc.add_image(anchors, gts);
    acc.report()
}

/// Pools separability samples and best IoUs over many images.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorQualityAccumulator {
    rule: LabelingRule,
    scores: Vec<f64>,
    labels: Vec<bool>,
    best: Vec<f64>,
}

impl AnchorQualityAccumulator {
    pub fn new(rule: LabelingRule) -> Self {
        Self {
            rule,
            scores: Vec::new(),
            labels: Vec::new(),
            best: Vec::new(),
        }
    }

    pub fn add_image(&mut self, anchors: &[BBox], gts: &[BBox]) {
        let (s, l) = separability_samples(anchors, gts, self.rule);
        self.scores.extend(s);
        self.labels.extend(l);
        self.best.extend(best_ious(anchors, gts));
    }

    pub fn report(&self) -> Result<AnchorQualityReport, MetricsError> {
        if self.best.is_empty() {
            return Err(MetricsError::NoGroundTruth);
        }
        let positives = self.labels.iter().filter(|&&l| l).count();
        Ok(AnchorQualityReport {
            mean_best_iou: self.best.iter().sum::<f64>() / self.best.len() as f64,
            auc_roc: auc_roc(&self.scores, &self.labels)?,
            positives,
            negatives: self.labels.len() - positives,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_spot_values() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = average_recall(&[g], &[g], 100);
        assert_eq!(r.ar, Some(1.0));
        assert_eq!(average_recall(&[], &[g], 100).ar, Some(0.0));
        let p = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert_eq!(iou(&p, &g), 0.6);
        let r = average_recall(&[p], &[g], 100);
        assert!((r.ar.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(r.ar_small, Some(r.ar.unwrap()));
        assert_eq!(r.ar_medium, None);
        let empty = average_recall(&[p], &[], 100);
        assert_eq!(empty.ar, None);
        assert!(empty.recalls.iter().all(|t| t.recall.is_none()));
    }

    #[test]
    fn thresholds_are_exact_decimals() {
        let t = coco_iou_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[2], 0.6);
        assert_eq!(t[9], 0.95);
    }

    #[test]
    fn top_k_truncation() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(average_recall(&[miss, g], &[g], 1).ar, Some(0.0));
        assert_eq!(average_recall(&[miss, g], &[g], 2).ar, Some(1.0));
    }

    #[test]
    fn size_buckets() {
        assert_eq!(
            SizeBucket::of(&BBox::new(0.0, 0.0, 31.0, 33.0)),
            SizeBucket::Small
        );
        assert_eq!(
            SizeBucket::of(&BBox::new(0.0, 0.0, 32.0, 32.0)),
            SizeBucket::Medium
        );
        assert_eq!(
            SizeBucket::of(&BBox::new(0.0, 0.0, 96.0, 96.0)),
            SizeBucket::Large
        );
    }

    #[test]
    fn auc_spot_values() {
        assert_eq!(
            auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auc_roc(&[0.5; 4], &[false, true, false, true]).unwrap(),
            0.5
        );
        assert_eq!(
            auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(),
            0.75
        );
        assert!(auc_roc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auc_roc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn mean_best_iou_cases() {
        let g = [
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(20.0, 20.0, 30.0, 30.0),
        ];
        assert_eq!(mean_best_iou(&g, &g).unwrap(), 1.0);
        assert_eq!(mean_best_iou(&[], &g).unwrap(), 0.0);
        assert!(mean_best_iou(&g, &[]).is_err());
    }

    #[test]
    fn separability_perfect_cover() {
        let g = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let anchors = [
            g[0],
            BBox::new(100.0, 100.0, 110.0, 110.0),
            BBox::new(200.0, 0.0, 210.0, 10.0),
        ];
        let r = anchor_separability(&anchors, &g, LabelingRule::CenterInsideGt).unwrap();
        assert_eq!(r.auc_roc, 1.0);
        assert_eq!((r.positives, r.negatives), (1, 2));
        let r = anchor_separability(
            &anchors,
            &g,
            LabelingRule::ThresholdPair { pos: 0.7, neg: 0.3 },
        )
        .unwrap();
        assert_eq!(r.auc_roc, 1.0);
    }
}
