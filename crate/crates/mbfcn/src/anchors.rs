//! Anchor grids, box geometry, regression-target coding, and the
//! positive/negative/ignore anchor assignment used during training.

use crate::error::{Error, Result};

/// Axis-aligned box: left-top corner plus width and height, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Self {
        BBox { x, y, w, h }
    }

    #[inline]
    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    #[inline]
    pub fn right(&self) -> f32 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> f32 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }
}

/// Intersection-over-union overlap; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = a.x.max(b.x);
    let iy = a.y.max(b.y);
    let ix2 = a.right().min(b.right());
    let iy2 = a.bottom().min(b.bottom());
    let iw = (ix2 - ix).max(0.0);
    let ih = (iy2 - iy).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Largest |t_w|, |t_h| accepted when decoding (ln 1000).
pub const MAX_DELTA_LOG: f32 = 6.907_755;

/// Regression target of `gt` relative to `anchor`:
/// ((gx-ax)/aw, (gy-ay)/ah, ln(gw/aw), ln(gh/ah)).
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<[f32; 4]> {
    if !gt.is_valid() {
        return Err(Error::Input(format!(
            "cannot encode degenerate box {}x{}",
            gt.w, gt.h
        )));
    }
    Ok([
        (gt.x - anchor.x) / anchor.w,
        (gt.y - anchor.y) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ])
}

/// Exact inverse of [`encode`], with the size deltas clamped to +-ln 1000.
pub fn decode(anchor: &BBox, t: [f32; 4]) -> BBox {
    let tw = t[2].clamp(-MAX_DELTA_LOG, MAX_DELTA_LOG);
    let th = t[3].clamp(-MAX_DELTA_LOG, MAX_DELTA_LOG);
    BBox {
        x: anchor.x + t[0] * anchor.w,
        y: anchor.y + t[1] * anchor.h,
        w: anchor.w * tw.exp(),
        h: anchor.h * th.exp(),
    }
}

/// The anchor grid of one branch: `map_h * map_w * slots` boxes laid out
/// cell-major with the (size, ratio) slot innermost.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub stride: usize,
    pub map_h: usize,
    pub map_w: usize,
    /// Anchors per cell: |sizes| * |ratios|.
    pub slots: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// (grid_y, grid_x, slot) provenance of anchor `idx`.
    pub fn provenance(&self, idx: usize) -> (usize, usize, usize) {
        let slot = idx % self.slots;
        let cell = idx / self.slots;
        (cell / self.map_w, cell % self.map_w, slot)
    }
}

/// Places one anchor per (cell, size, ratio): w = s*sqrt(r), h = s/sqrt(r),
/// centered at ((grid + 0.5) * stride). Border-crossing anchors are kept.
pub fn generate_anchors(
    map_h: usize,
    map_w: usize,
    stride: usize,
    sizes: &[f32],
    ratios: &[f32],
) -> AnchorSet {
    let slots = sizes.len() * ratios.len();
    let mut boxes = Vec::with_capacity(map_h * map_w * slots);
    for gy in 0..map_h {
        for gx in 0..map_w {
            let cx = (gx as f32 + 0.5) * stride as f32;
            let cy = (gy as f32 + 0.5) * stride as f32;
            for &s in sizes {
                for &r in ratios {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    boxes.push(BBox::new(cx - w / 2.0, cy - h / 2.0, w, h));
                }
            }
        }
    }
    AnchorSet {
        stride,
        map_h,
        map_w,
        slots,
        boxes,
    }
}

/// Per-anchor assignment outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignored,
}

/// Labels for every anchor plus, for positives, the assigned ground truth
/// and its encoded regression target.
#[derive(Clone, Debug)]
pub struct MatchResult {
    pub labels: Vec<Label>,
    /// Ground-truth index per anchor; meaningful only where the label is
    /// positive.
    pub gt_index: Vec<usize>,
    pub targets: Vec<[f32; 4]>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == Label::Positive)
            .map(|(i, _)| i)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Assigns anchors to ground truths: positive above `pos_iou` (argmax GT,
/// ties to the lowest GT index), negative below `neg_iou`, ignored between.
/// Each GT's single best-overlapping anchor is then forced positive if the
/// overlap is nonzero, so no reachable GT is left without a positive.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[BBox],
    pos_iou: f32,
    neg_iou: f32,
) -> MatchResult {
    let n = anchors.len();
    let mut labels = vec![Label::Negative; n];
    let mut gt_index = vec![0usize; n];
    let mut targets = vec![[0.0f32; 4]; n];

    if !gts.is_empty() {
        let mut best_per_gt: Vec<(f32, usize)> = vec![(0.0, usize::MAX); gts.len()];
        for (ai, anchor) in anchors.boxes.iter().enumerate() {
            let mut best = 0.0f32;
            let mut best_gt = 0usize;
            for (gi, gt) in gts.iter().enumerate() {
                let v = iou(anchor, gt);
                if v > best {
                    best = v;
                    best_gt = gi;
                }
                if v > best_per_gt[gi].0 {
                    best_per_gt[gi] = (v, ai);
                }
            }
            if best > pos_iou {
                labels[ai] = Label::Positive;
                gt_index[ai] = best_gt;
            } else if best < neg_iou {
                labels[ai] = Label::Negative;
            } else {
                labels[ai] = Label::Ignored;
            }
        }
        // Forced-best rule, processed in GT order so the outcome is
        // deterministic when one anchor is the best for several GTs.
        for (gi, &(v, ai)) in best_per_gt.iter().enumerate() {
            if v > 0.0 && ai != usize::MAX {
                labels[ai] = Label::Positive;
                gt_index[ai] = gi;
            }
        }
        for ai in 0..n {
            if labels[ai] == Label::Positive {
                targets[ai] = encode(&gts[gt_index[ai]], &anchors.boxes[ai])
                    .expect("ground truths validated at parse time");
            }
        }
    }

    MatchResult {
        labels,
        gt_index,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_anchor_placement() {
        let set = generate_anchors(2, 2, 16, &[32.0], &[1.0]);
        assert_eq!(set.len(), 4);
        let centers = [(8.0, 8.0), (24.0, 8.0), (8.0, 24.0), (24.0, 24.0)];
        for (b, (cx, cy)) in set.boxes.iter().zip(centers) {
            assert_eq!(b.w, 32.0);
            assert_eq!(b.h, 32.0);
            assert!((b.x + b.w / 2.0 - cx).abs() < 1e-5);
            assert!((b.y + b.h / 2.0 - cy).abs() < 1e-5);
        }
    }

    #[test]
    fn anchor_count_is_combinatorial() {
        let set = generate_anchors(3, 5, 8, &[16.0, 32.0], &[0.5, 1.0, 2.0]);
        assert_eq!(set.len(), 3 * 5 * 2 * 3);
        assert_eq!(set.slots, 6);
        // ratio 1 slots are square
        let (_, _, slot) = set.provenance(1);
        assert_eq!(slot, 1);
        assert!((set.boxes[1].w - set.boxes[1].h).abs() < 1e-5);
    }

    #[test]
    fn iou_reference_values() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
        let c = BBox::new(10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn encode_reference_and_roundtrip() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gt = BBox::new(1.0, 2.0, 20.0, 10.0);
        let t = encode(&gt, &anchor).unwrap();
        assert!((t[0] - 0.1).abs() < 1e-6);
        assert!((t[1] - 0.2).abs() < 1e-6);
        assert!((t[2] - 2.0f32.ln()).abs() < 1e-6);
        assert!(t[3].abs() < 1e-6);

        let same = encode(&anchor, &anchor).unwrap();
        assert_eq!(same, [0.0; 4]);

        let bad = BBox::new(0.0, 0.0, -1.0, 5.0);
        assert!(encode(&bad, &anchor).is_err());
    }

    #[test]
    fn match_threshold_bands() {
        // One anchor per case against a single 10x10 GT at the origin.
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let mk = |boxes: Vec<BBox>| AnchorSet {
            stride: 8,
            map_h: 1,
            map_w: boxes.len(),
            slots: 1,
            boxes,
        };

        // IoU 0.6: 100/ (100 + 100 - 60) ... use overlap 75/125 = 0.6.
        let high = mk(vec![BBox::new(0.0, 2.5, 10.0, 10.0)]);
        assert!((iou(&high.boxes[0], &gt[0]) - 0.6).abs() < 1e-6);
        let m = match_anchors(&high, &gt, 0.55, 0.35);
        assert_eq!(m.labels[0], Label::Positive);
        assert_eq!(m.gt_index[0], 0);

        // Low overlap anchor (IoU 0.2 band) is negative, but a second anchor
        // takes the forced-best slot so the GT stays learnable.
        let low = mk(vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(8.0, 8.0, 10.0, 10.0),
        ]);
        let m = match_anchors(&low, &gt, 0.55, 0.35);
        assert_eq!(m.labels[0], Label::Positive);
        assert_eq!(m.labels[1], Label::Negative);

        // Mid-band IoU 0.45-ish, not any GT's best -> ignored.
        let mid = mk(vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(0.0, 3.5, 10.0, 10.0),
        ]);
        let v = iou(&mid.boxes[1], &gt[0]);
        assert!(v > 0.35 && v < 0.55, "band check: {v}");
        let m = match_anchors(&mid, &gt, 0.55, 0.35);
        assert_eq!(m.labels[1], Label::Ignored);
    }

    #[test]
    fn empty_gts_all_negative() {
        let set = generate_anchors(4, 4, 8, &[16.0], &[1.0]);
        let m = match_anchors(&set, &[], 0.55, 0.35);
        assert!(m.labels.iter().all(|&l| l == Label::Negative));
    }

    #[test]
    fn every_overlapped_gt_gets_a_positive() {
        let set = generate_anchors(8, 8, 8, &[12.0, 24.0], &[1.0]);
        // Small GT straddling cells: thresholds alone may leave it empty.
        let gts = vec![BBox::new(13.0, 13.0, 9.0, 9.0), BBox::new(40.0, 40.0, 20.0, 20.0)];
        let m = match_anchors(&set, &gts, 0.55, 0.35);
        for gi in 0..gts.len() {
            assert!(
                m.positives().any(|ai| m.gt_index[ai] == gi),
                "gt {gi} has no positive anchor"
            );
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_translation_invariant(
            ax in -50.0f32..50.0, ay in -50.0f32..50.0,
            aw in 1.0f32..40.0, ah in 1.0f32..40.0,
            bx in -50.0f32..50.0, by in -50.0f32..50.0,
            bw in 1.0f32..40.0, bh in 1.0f32..40.0,
            dx in -20.0f32..20.0, dy in -20.0f32..20.0,
        ) {
            let a = BBox::new(ax, ay, aw, ah);
            let b = BBox::new(bx, by, bw, bh);
            let v = iou(&a, &b);
            prop_assert!((v - iou(&b, &a)).abs() < 1e-6);
            prop_assert!((0.0..=1.0).contains(&v));
            // Corner arithmetic rounds in f32, so identity holds to ~1e-5.
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-4);
            let a2 = BBox::new(ax + dx, ay + dy, aw, ah);
            let b2 = BBox::new(bx + dx, by + dy, bw, bh);
            prop_assert!((v - iou(&a2, &b2)).abs() < 1e-3);
        }

        #[test]
        fn decode_inverts_encode(
            gx in -30.0f32..30.0, gy in -30.0f32..30.0,
            gw in 1.0f32..60.0, gh in 1.0f32..60.0,
            aw in 4.0f32..64.0, ah in 4.0f32..64.0,
        ) {
            let anchor = BBox::new(0.0, 0.0, aw, ah);
            let gt = BBox::new(gx, gy, gw, gh);
            let back = decode(&anchor, encode(&gt, &anchor).unwrap());
            let scale = gw.max(gh).max(1.0);
            prop_assert!((back.x - gt.x).abs() / scale < 1e-5);
            prop_assert!((back.y - gt.y).abs() / scale < 1e-5);
            prop_assert!((back.w - gt.w).abs() / scale < 1e-5);
            prop_assert!((back.h - gt.h).abs() / scale < 1e-5);
        }
    }
}
