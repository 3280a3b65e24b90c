//! Detection decoding, cross-branch NMS, single- and multi-scale inference,
//! and the evaluation protocol: greedy detection/GT matching, PR curves,
//! all-point interpolated AP, precision at a false-positive budget, and
//! height-banded evaluation subsets with ignore handling.

use std::collections::BTreeMap;

use crate::anchors::{decode, generate_anchors, iou, AnchorSet, BBox};
use crate::error::Result;
use crate::model::{forward, ModelConfig, ModelParams, PassStats};
use crate::tensor::{softmax_pair, Tensor};
use crate::training::preprocess;

/// A scored box in original-image pixel coordinates.
#[derive(Clone, Debug)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub branch: usize,
    pub image_id: String,
}

/// Converts per-branch (cls, reg) maps into scored boxes: face probability
/// via the pair softmax, thresholding, delta decoding against the anchors,
/// rescaling by 1/scale into original pixels, and clipping to the image.
pub fn decode_detections(
    outputs: &[(Tensor<f32>, Tensor<f32>)],
    anchor_sets: &[AnchorSet],
    score_thresh: f32,
    scale: f32,
    orig_w: f32,
    orig_h: f32,
    image_id: &str,
) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (bi, ((cls, reg), anchors)) in outputs.iter().zip(anchor_sets).enumerate() {
        let probs = softmax_pair(cls)?;
        for ai in 0..anchors.len() {
            let (gy, gx, slot) = anchors.provenance(ai);
            let p = probs.at(0, 2 * slot + 1, gy, gx);
            if p <= score_thresh {
                continue;
            }
            let t = [
                reg.at(0, 4 * slot, gy, gx),
                reg.at(0, 4 * slot + 1, gy, gx),
                reg.at(0, 4 * slot + 2, gy, gx),
                reg.at(0, 4 * slot + 3, gy, gx),
            ];
            let b = decode(&anchors.boxes[ai], t);
            let x0 = (b.x / scale).clamp(0.0, orig_w);
            let y0 = (b.y / scale).clamp(0.0, orig_h);
            let x1 = (b.right() / scale).clamp(0.0, orig_w);
            let y1 = (b.bottom() / scale).clamp(0.0, orig_h);
            if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
                continue;
            }
            dets.push(Detection {
                bbox: BBox::new(x0, y0, x1 - x0, y1 - y0),
                score: p,
                branch: bi,
                image_id: image_id.to_string(),
            });
        }
    }
    Ok(dets)
}

fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap()
        .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap())
        .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap())
        .then(a.bbox.w.partial_cmp(&b.bbox.w).unwrap())
        .then(a.bbox.h.partial_cmp(&b.bbox.h).unwrap())
        .then(a.branch.cmp(&b.branch))
}

/// Greedy NMS over the pooled detections of all branches: repeatedly keep the
/// highest-scored box (ties to smaller x, then y) and suppress everything
/// overlapping it above `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = dets.iter().collect();
    sorted.sort_by(|a, b| det_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(sorted[i].clone());
        for j in i + 1..sorted.len() {
            if !suppressed[j] && iou(&sorted[i].bbox, &sorted[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Pre-NMS stage of `detect` at one resize target.
fn detect_raw(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    max_side: usize,
    score_thresh: f32,
    image_id: &str,
) -> Result<(Vec<Detection>, PassStats)> {
    let [_, _, h, w] = image.shape();
    let (proc, _, scale) = preprocess(image, &[], max_side, false);
    let (outputs, stats) = forward(&proc, cfg, params)?;
    let anchor_sets: Vec<AnchorSet> = outputs
        .iter()
        .zip(&cfg.branches)
        .map(|((cls, _), branch)| {
            generate_anchors(
                cls.h(),
                cls.w(),
                branch.target_stride,
                &branch.anchor_sizes,
                &branch.anchor_ratios,
            )
        })
        .collect();
    let dets = decode_detections(
        &outputs,
        &anchor_sets,
        score_thresh,
        scale,
        w as f32,
        h as f32,
        image_id,
    )?;
    Ok((dets, stats))
}

pub fn detect_with_stats(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    max_side: usize,
    score_thresh: f32,
    nms_thresh: f32,
    image_id: &str,
) -> Result<(Vec<Detection>, PassStats)> {
    let (dets, stats) = detect_raw(image, cfg, params, max_side, score_thresh, image_id)?;
    Ok((nms(&dets, nms_thresh), stats))
}

/// Single-scale detection on one image.
pub fn detect(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    max_side: usize,
    score_thresh: f32,
    nms_thresh: f32,
    image_id: &str,
) -> Result<Vec<Detection>> {
    detect_with_stats(image, cfg, params, max_side, score_thresh, nms_thresh, image_id)
        .map(|(d, _)| d)
}

pub fn detect_pyramid_with_stats(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    max_side: usize,
    scales: &[f32],
    score_thresh: f32,
    nms_thresh: f32,
    image_id: &str,
) -> Result<(Vec<Detection>, PassStats)> {
    let mut pooled = Vec::new();
    let mut total = PassStats::default();
    for &s in scales {
        let side = ((max_side as f32 * s).round() as usize).max(16);
        let (dets, stats) = detect_raw(image, cfg, params, side, score_thresh, image_id)?;
        pooled.extend(dets);
        total.backbone_convs += stats.backbone_convs;
        total.backbone_passes += stats.backbone_passes;
    }
    Ok((nms(&pooled, nms_thresh), total))
}

/// Image-pyramid detection: the pre-NMS stage runs once per scale, then one
/// global NMS merges the pooled boxes. `scales = [1.0]` is exactly `detect`.
pub fn detect_pyramid(
    image: &Tensor<f32>,
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    max_side: usize,
    scales: &[f32],
    score_thresh: f32,
    nms_thresh: f32,
    image_id: &str,
) -> Result<Vec<Detection>> {
    detect_pyramid_with_stats(
        image,
        cfg,
        params,
        max_side,
        scales,
        score_thresh,
        nms_thresh,
        image_id,
    )
    .map(|(d, _)| d)
}

/// Greedy detection-to-GT matching: in score order, each detection claims
/// the unclaimed ground truth with the highest IoU if that IoU reaches
/// `iou_thresh`; every GT is claimed at most once. Flags align with the
/// input order.
pub fn match_det_gt(dets: &[Detection], gts: &[BBox], iou_thresh: f32) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| det_order(&dets[a], &dets[b]));
    let mut claimed = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    for di in order {
        let mut best = 0.0f32;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if claimed[gi] {
                continue;
            }
            let v = iou(&dets[di].bbox, gt);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            if best >= iou_thresh {
                claimed[gi] = true;
                is_tp[di] = true;
            }
        }
    }
    is_tp
}

/// Height band defining an evaluation subset: ground truths with
/// `min_h_excl < h <= max_h_incl` are evaluated, the rest become ignore
/// regions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetRule {
    pub min_h_excl: f32,
    pub max_h_incl: f32,
}

impl SubsetRule {
    pub fn easy() -> Self {
        SubsetRule { min_h_excl: 50.0, max_h_incl: f32::INFINITY }
    }
    pub fn medium() -> Self {
        SubsetRule { min_h_excl: 30.0, max_h_incl: f32::INFINITY }
    }
    pub fn hard() -> Self {
        SubsetRule { min_h_excl: 10.0, max_h_incl: f32::INFINITY }
    }
    pub fn all() -> Self {
        SubsetRule { min_h_excl: 0.0, max_h_incl: f32::INFINITY }
    }
    pub fn band(min_h_excl: f32, max_h_incl: f32) -> Self {
        SubsetRule { min_h_excl, max_h_incl }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::easy()),
            "medium" => Ok(Self::medium()),
            "hard" => Ok(Self::hard()),
            "all" => Ok(Self::all()),
            other => Err(crate::error::Error::Config(format!(
                "unknown subset '{other}' (expected easy|medium|hard|all)"
            ))),
        }
    }

    pub fn keeps(&self, gt: &BBox) -> bool {
        gt.h > self.min_h_excl && gt.h <= self.max_h_incl
    }
}

/// Splits ground truths into (kept, ignored) index lists under a subset rule.
pub fn subset_filter(gts: &[BBox], rule: SubsetRule) -> (Vec<usize>, Vec<usize>) {
    let mut kept = Vec::new();
    let mut ignored = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        if rule.keeps(gt) {
            kept.push(i);
        } else {
            ignored.push(i);
        }
    }
    (kept, ignored)
}

/// Pooled, score-sorted detection outcomes with the derived PR curve.
#[derive(Clone, Debug)]
pub struct EvalCurve {
    /// (score, is_tp), sorted by score descending, FP before TP on ties.
    pub outcomes: Vec<(f32, bool)>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub n_gt: usize,
}

/// Sorts outcomes; score ties put FP first so reported AP never exceeds the
/// value of any other tie resolution.
fn sort_outcomes(outcomes: &mut [(f32, bool)]) {
    outcomes.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
    });
}

/// All-point interpolated average precision.
pub fn build_curve(mut outcomes: Vec<(f32, bool)>, n_gt: usize) -> EvalCurve {
    sort_outcomes(&mut outcomes);
    if n_gt == 0 {
        let ap = if outcomes.is_empty() { 1.0 } else { 0.0 };
        return EvalCurve {
            precision: vec![],
            recall: vec![],
            ap,
            n_gt,
            outcomes,
        };
    }
    let mut precision = Vec::with_capacity(outcomes.len());
    let mut recall = Vec::with_capacity(outcomes.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, hit) in &outcomes {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Precision envelope from the right, integrated over recall increments.
    let mut ap = 0.0f64;
    let mut max_p = 0.0f64;
    let mut prev_recall = if recall.is_empty() { 0.0 } else { *recall.last().unwrap() };
    // Walk right-to-left accumulating sum of (r_i - r_{i-1}) * max_{j>=i} p_j.
    for i in (0..outcomes.len()).rev() {
        max_p = max_p.max(precision[i]);
        let r_prev = if i == 0 { 0.0 } else { recall[i - 1] };
        ap += (recall[i] - r_prev) * max_p;
        prev_recall = r_prev;
    }
    let _ = prev_recall;
    EvalCurve {
        outcomes,
        precision,
        recall,
        ap,
        n_gt,
    }
}

pub fn average_precision(outcomes: Vec<(f32, bool)>, n_gt: usize) -> f64 {
    build_curve(outcomes, n_gt).ap
}

/// Precision and recall at the cutoff where the `n_fp`-th false positive
/// accumulates (or the end of the list if fewer FPs exist).
pub fn precision_at_fp(outcomes: &[(f32, bool)], n_fp: usize, n_gt: usize) -> (f64, f64) {
    assert!(n_fp >= 1, "false-positive budget must be >= 1");
    let mut sorted = outcomes.to_vec();
    sort_outcomes(&mut sorted);
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &(_, hit) in &sorted {
        if hit {
            tp += 1;
        } else {
            fp += 1;
            if fp == n_fp {
                break;
            }
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    (precision, recall)
}

/// IoU threshold for counting a detection as a true positive.
pub const EVAL_IOU: f32 = 0.5;

/// Full evaluation of a detection set against ground truth under a subset
/// rule. Detections that miss every kept GT but overlap an ignored GT with
/// IoU >= 0.5 are removed from the outcome list rather than counted as
/// false positives.
pub fn evaluate(
    dets_by_image: &BTreeMap<String, Vec<Detection>>,
    gts_by_image: &BTreeMap<String, Vec<BBox>>,
    rule: SubsetRule,
) -> EvalCurve {
    let mut outcomes: Vec<(f32, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (image_id, gts) in gts_by_image {
        let (kept_idx, ignored_idx) = subset_filter(gts, rule);
        let kept: Vec<BBox> = kept_idx.iter().map(|&i| gts[i]).collect();
        let ignored: Vec<BBox> = ignored_idx.iter().map(|&i| gts[i]).collect();
        n_gt += kept.len();

        let empty = Vec::new();
        let dets = dets_by_image.get(image_id).unwrap_or(&empty);
        let tp = match_det_gt(dets, &kept, EVAL_IOU);
        for (di, det) in dets.iter().enumerate() {
            if tp[di] {
                outcomes.push((det.score, true));
            } else {
                let on_ignored = ignored.iter().any(|g| iou(&det.bbox, g) >= EVAL_IOU);
                if !on_ignored {
                    outcomes.push((det.score, false));
                }
            }
        }
    }
    build_curve(outcomes, n_gt)
}

/// Two-column `recall<TAB>precision` dump of a PR curve.
pub fn pr_curve_text(curve: &EvalCurve) -> String {
    let mut s = String::new();
    for (r, p) in curve.recall.iter().zip(&curve.precision) {
        s.push_str(&format!("{r:.6}\t{p:.6}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, y: f32, w: f32, h: f32, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, y, w, h),
            score,
            branch: 0,
            image_id: "t".to_string(),
        }
    }

    #[test]
    fn nms_reference_case() {
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(1.0, 1.0, 10.0, 10.0, 0.8),
            det(20.0, 20.0, 5.0, 5.0, 0.7),
        ];
        // Pair IoU of the first two: 81 / 119.
        assert!((iou(&dets[0].bbox, &dets[1].bbox) - 81.0 / 119.0).abs() < 1e-6);
        let kept = nms(&dets, 0.3);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_disjoint_and_single() {
        let dets = vec![
            det(0.0, 0.0, 5.0, 5.0, 0.5),
            det(10.0, 0.0, 5.0, 5.0, 0.6),
            det(20.0, 0.0, 5.0, 5.0, 0.4),
        ];
        let kept = nms(&dets, 0.3);
        assert_eq!(kept.len(), 3);
        // Scores come out non-increasing.
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));

        let one = vec![det(0.0, 0.0, 5.0, 5.0, 0.1)];
        assert_eq!(nms(&one, 0.3).len(), 1);
        assert!(nms(&[], 0.3).is_empty());
    }

    #[test]
    fn match_det_gt_greedy_claims() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(0.5, 0.5, 10.0, 10.0, 0.8),
        ];
        let tp = match_det_gt(&dets, &gts, 0.5);
        assert_eq!(tp, vec![true, false]);

        // Zero GTs: everything is a false positive.
        let tp = match_det_gt(&dets, &[], 0.5);
        assert_eq!(tp, vec![false, false]);

        // Order independence: flags follow input positions.
        let dets_rev: Vec<Detection> = dets.iter().rev().cloned().collect();
        let tp = match_det_gt(&dets_rev, &gts, 0.5);
        assert_eq!(tp, vec![false, true]);
    }

    #[test]
    fn ap_reference_fixture() {
        // TP, FP, TP with two ground truths: AP = 0.5 * 1 + 0.5 * (2/3).
        let outcomes = vec![(0.9f32, true), (0.8, false), (0.7, true)];
        let ap = average_precision(outcomes, 2);
        assert!((ap - 0.833333).abs() < 1e-6, "ap = {ap}");
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision(vec![(0.9, true), (0.8, true)], 2), 1.0);
        assert_eq!(average_precision(vec![(0.9, false), (0.8, false)], 2), 0.0);
        assert_eq!(average_precision(vec![], 0), 1.0);
        assert_eq!(average_precision(vec![(0.5, false)], 0), 0.0);
    }

    #[test]
    fn ap_is_permutation_invariant_and_tie_pessimistic() {
        let a = vec![(0.9f32, true), (0.8, false), (0.7, true), (0.6, false)];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(average_precision(a.clone(), 3), average_precision(b, 3));

        // Tied scores: the FP is ranked first.
        let tied = vec![(0.5f32, true), (0.5, false)];
        let ap = average_precision(tied, 1);
        assert!((ap - 0.5).abs() < 1e-9);
    }

    #[test]
    fn deleting_an_fp_never_lowers_ap() {
        let base = vec![(0.9f32, true), (0.8, false), (0.7, true), (0.5, false)];
        let ap0 = average_precision(base.clone(), 2);
        for drop in [1usize, 3] {
            let mut pruned = base.clone();
            pruned.remove(drop);
            assert!(average_precision(pruned, 2) >= ap0);
        }
    }

    #[test]
    fn precision_at_fp_fixtures() {
        // TP, TP, FP with budget 1: the list truncates at the FP inclusive.
        let outcomes = vec![(0.9f32, true), (0.8, true), (0.7, false)];
        let (p, r) = precision_at_fp(&outcomes, 1, 4);
        assert!((p - 2.0 / 3.0).abs() < 1e-6);
        assert!((r - 0.5).abs() < 1e-6);

        // No FPs at all: precision over the full list.
        let outcomes = vec![(0.9f32, true), (0.8, true)];
        let (p, _) = precision_at_fp(&outcomes, 1, 2);
        assert_eq!(p, 1.0);

        // First outcome is the budgeted FP.
        let outcomes = vec![(0.9f32, false), (0.8, true)];
        let (p, _) = precision_at_fp(&outcomes, 1, 1);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn subset_thresholds() {
        let gts = vec![
            BBox::new(0.0, 0.0, 40.0, 40.0),
            BBox::new(0.0, 0.0, 55.0, 55.0),
            BBox::new(0.0, 0.0, 8.0, 8.0),
        ];
        let (easy, _) = subset_filter(&gts, SubsetRule::easy());
        assert_eq!(easy, vec![1]);
        let (medium, _) = subset_filter(&gts, SubsetRule::medium());
        assert_eq!(medium, vec![0, 1]);
        let (hard, ignored) = subset_filter(&gts, SubsetRule::hard());
        assert_eq!(hard, vec![0, 1]);
        assert_eq!(ignored, vec![2]);
        // Nesting: hard >= medium >= easy.
        assert!(hard.len() >= medium.len() && medium.len() >= easy.len());
        // Exactly at a boundary: "larger than" is strict.
        let edge = vec![BBox::new(0.0, 0.0, 50.0, 50.0)];
        let (kept, _) = subset_filter(&edge, SubsetRule::easy());
        assert!(kept.is_empty());
    }

    #[test]
    fn evaluate_discards_detections_on_ignored_gts() {
        let mut gts = BTreeMap::new();
        gts.insert(
            "a".to_string(),
            vec![BBox::new(0.0, 0.0, 60.0, 60.0), BBox::new(100.0, 100.0, 8.0, 8.0)],
        );
        let mut dets = BTreeMap::new();
        dets.insert(
            "a".to_string(),
            vec![
                det(0.0, 0.0, 60.0, 60.0, 0.9),    // TP on the kept GT
                det(100.0, 100.0, 8.0, 8.0, 0.8),  // sits on the ignored GT
                det(200.0, 40.0, 10.0, 10.0, 0.7), // plain FP
            ],
        );
        let curve = evaluate(&dets, &gts, SubsetRule::hard());
        assert_eq!(curve.n_gt, 1);
        // The ignored-region hit vanished from the outcome list.
        assert_eq!(curve.outcomes.len(), 2);
        assert_eq!(curve.outcomes[0], (0.9, true));
        assert_eq!(curve.outcomes[1], (0.7, false));
    }
}
