//! Box arithmetic: Jaccard overlap, anchor grids, offset coding,
//! anchor-to-ground-truth matching, and greedy NMS.
//!
//! Boxes are center form `(cx, cy, w, h)` in pixels. Corner form is derived
//! on demand; nothing here ever rounds to integer coordinates.

use crate::error::{CosalError, Result};
use crate::scalar::{real, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox<F> {
    pub cx: F,
    pub cy: F,
    pub w: F,
    pub h: F,
}

impl<F: Real> BBox<F> {
    pub fn new(cx: F, cy: F, w: F, h: F) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x1: F, y1: F, x2: F, y2: F) -> Self {
        let two = real::<F>(2.0);
        BBox {
            cx: (x1 + x2) / two,
            cy: (y1 + y2) / two,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2` for valid boxes.
    pub fn corners(&self) -> (F, F, F, F) {
        let two = real::<F>(2.0);
        (
            self.cx - self.w / two,
            self.cy - self.h / two,
            self.cx + self.w / two,
            self.cy + self.h / two,
        )
    }

    pub fn area(&self) -> F {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > F::zero()
            && self.h > F::zero()
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    /// Scales both center and extent, e.g. image -> feature coordinates.
    pub fn scaled(&self, sx: F, sy: F) -> Self {
        BBox {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    pub fn cast<G: Real>(&self) -> BBox<G> {
        BBox {
            cx: real(self.cx.to_f64().expect("finite")),
            cy: real(self.cy.to_f64().expect("finite")),
            w: real(self.w.to_f64().expect("finite")),
            h: real(self.h.to_f64().expect("finite")),
        }
    }
}

/// Intersection over union. Degenerate boxes contribute zero area, and an
/// empty union yields 0 rather than NaN.
pub fn jaccard<F: Real>(a: &BBox<F>, b: &BBox<F>) -> F {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(F::zero());
    let ih = (ay2.min(by2) - ay1.max(by1)).max(F::zero());
    let inter = iw * ih;
    let area_a = (ax2 - ax1).max(F::zero()) * (ay2 - ay1).max(F::zero());
    let area_b = (bx2 - bx1).max(F::zero()) * (by2 - by1).max(F::zero());
    let union = area_a + area_b - inter;
    if union > F::zero() {
        inter / union
    } else {
        F::zero()
    }
}

/// A dense anchor set over a feature map: 9 boxes per cell, 3 scales x 3
/// aspect ratios, centered on the cell. Anchor `(i·Wf + j)·9 + 3a + b` sits
/// at cell `(i, j)` with scale index `a` and ratio index `b`.
#[derive(Clone, Debug)]
pub struct AnchorGrid<F> {
    pub hf: usize,
    pub wf: usize,
    pub stride: F,
    /// Side lengths in pixels; the box area at scale `s`, ratio 1:1 is `s²`.
    pub scales: [F; 3],
    /// Height-over-width; area is preserved across ratios.
    pub ratios: [F; 3],
    pub anchors: Vec<BBox<F>>,
}

/// Builds the anchor grid. `image_extent` and `feature_extent` are `(height,
/// width)`; the stride must be integral and equal on both axes. Anchors are
/// not clipped to the image.
pub fn generate_anchors<F: Real>(
    image_extent: (usize, usize),
    feature_extent: (usize, usize),
    scales: [F; 3],
    ratios: [F; 3],
) -> Result<AnchorGrid<F>> {
    let (ih, iw) = image_extent;
    let (hf, wf) = feature_extent;
    if hf == 0 || wf == 0 || ih % hf != 0 || iw % wf != 0 || ih / hf != iw / wf {
        return Err(CosalError::InvalidArgument(format!(
            "feature extent {hf}x{wf} must divide image extent {ih}x{iw} with a common stride"
        )));
    }
    let stride = real::<F>((ih / hf) as f64);
    let half = real::<F>(0.5);
    let mut anchors = Vec::with_capacity(9 * hf * wf);
    for i in 0..hf {
        for j in 0..wf {
            let cx = (real::<F>(j as f64) + half) * stride;
            let cy = (real::<F>(i as f64) + half) * stride;
            for s in scales {
                for r in ratios {
                    let rs = r.sqrt();
                    anchors.push(BBox::new(cx, cy, s / rs, s * rs));
                }
            }
        }
    }
    Ok(AnchorGrid {
        hf,
        wf,
        stride,
        scales,
        ratios,
        anchors,
    })
}

/// Normalized center offsets and log scale ratios between a target box and an
/// anchor box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetVec<F> {
    pub tx: F,
    pub ty: F,
    pub tw: F,
    pub th: F,
}

pub fn encode<F: Real>(g: &BBox<F>, d: &BBox<F>) -> OffsetVec<F> {
    OffsetVec {
        tx: (g.cx - d.cx) / d.w,
        ty: (g.cy - d.cy) / d.h,
        tw: (g.w / d.w).ln(),
        th: (g.h / d.h).ln(),
    }
}

pub fn decode<F: Real>(t: &OffsetVec<F>, d: &BBox<F>) -> BBox<F> {
    BBox {
        cx: t.tx * d.w + d.cx,
        cy: t.ty * d.h + d.cy,
        w: d.w * t.tw.exp(),
        h: d.h * t.th.exp(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor labels plus, for positives, the matched ground-truth index.
#[derive(Clone, Debug)]
pub struct MatchAssignment {
    pub labels: Vec<AnchorLabel>,
    gt_index: Vec<usize>,
}

impl MatchAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Ground-truth index for a positive anchor; None otherwise.
    pub fn gt_of(&self, anchor: usize) -> Option<usize> {
        (self.labels[anchor] == AnchorLabel::Positive).then(|| self.gt_index[anchor])
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Positive)
            .map(|(a, _)| (a, self.gt_index[a]))
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == AnchorLabel::Negative)
            .map(|(a, _)| a)
    }

    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == AnchorLabel::Positive)
            .count()
    }

    pub fn num_negative(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == AnchorLabel::Negative)
            .count()
    }
}

/// Anchor labelling:
/// - any anchor whose best overlap exceeds `pos_threshold` is positive and
///   assigned to its best-overlap ground truth (lowest index on exact ties);
/// - every ground truth additionally forces its best-overlap anchor positive
///   even below the threshold. Ground truths are processed in index order and
///   may not reuse an anchor already forced by an earlier ground truth, so
///   each keeps at least one positive anchor;
/// - anchors with best overlap strictly below `neg_threshold` are negative;
/// - the band in between is ignored.
pub fn match_anchors<F: Real>(
    anchors: &[BBox<F>],
    gt_boxes: &[BBox<F>],
    pos_threshold: F,
    neg_threshold: F,
) -> Result<MatchAssignment> {
    if anchors.is_empty() {
        return Err(CosalError::InvalidArgument(
            "match_anchors: empty anchor set".into(),
        ));
    }
    if gt_boxes.is_empty() {
        return Err(CosalError::InvalidArgument(
            "match_anchors: at least one ground-truth box required".into(),
        ));
    }
    if gt_boxes.len() > anchors.len() {
        return Err(CosalError::InvalidArgument(format!(
            "match_anchors: {} ground truths cannot each own one of {} anchors",
            gt_boxes.len(),
            anchors.len()
        )));
    }

    let n = anchors.len();
    let m = gt_boxes.len();
    let mut overlaps = vec![F::zero(); n * m];
    for (a, anchor) in anchors.iter().enumerate() {
        for (g, gt) in gt_boxes.iter().enumerate() {
            overlaps[a * m + g] = jaccard(anchor, gt);
        }
    }

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut gt_index = vec![0usize; n];
    for a in 0..n {
        let row = &overlaps[a * m..(a + 1) * m];
        let (mut best_g, mut best) = (0usize, row[0]);
        for (g, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_g = g;
            }
        }
        if best > pos_threshold {
            labels[a] = AnchorLabel::Positive;
            gt_index[a] = best_g;
        } else if best < neg_threshold {
            labels[a] = AnchorLabel::Negative;
        }
    }

    let mut forced = vec![false; n];
    for g in 0..m {
        let mut best_a = usize::MAX;
        let mut best = -F::one();
        for a in 0..n {
            if forced[a] {
                continue;
            }
            let v = overlaps[a * m + g];
            if v > best {
                best = v;
                best_a = a;
            }
        }
        // gt_boxes.len() <= anchors.len() guarantees a free anchor remains
        forced[best_a] = true;
        labels[best_a] = AnchorLabel::Positive;
        gt_index[best_a] = g;
    }

    Ok(MatchAssignment { labels, gt_index })
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// score (ties: lower original index first); a candidate is suppressed if its
/// IoU with any already-kept box strictly exceeds `iou_threshold`. Returns
/// kept indices into the input, in visit (descending-score) order.
pub fn nms<F: Real>(boxes: &[BBox<F>], scores: &[F], iou_threshold: F) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(CosalError::InvalidArgument(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| jaccard(&boxes[i], &boxes[k]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(cx, cy, w, h)
    }

    #[test]
    fn jaccard_identity_and_disjoint() {
        let a = b(5.0, 5.0, 4.0, 4.0);
        assert_eq!(jaccard(&a, &a), 1.0);
        let far = b(100.0, 100.0, 4.0, 4.0);
        assert_eq!(jaccard(&a, &far), 0.0);
    }

    #[test]
    fn jaccard_hand_computed_overlap() {
        // corners (0,0,2,2) vs (1,1,3,3): intersection 1, union 7
        let a = BBox::<f64>::from_corners(0.0, 0.0, 2.0, 2.0);
        let c = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((jaccard(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(jaccard(&a, &c), jaccard(&c, &a));
    }

    #[test]
    fn anchor_count_and_lattice_centers() {
        let grid =
            generate_anchors::<f64>((64, 64), (8, 8), [16.0, 32.0, 64.0], [1.0, 2.0, 0.5])
                .unwrap();
        assert_eq!(grid.anchors.len(), 9 * 8 * 8);
        assert_eq!(grid.stride, 8.0);
        for (idx, a) in grid.anchors.iter().enumerate() {
            let cell = idx / 9;
            let (i, j) = (cell / 8, cell % 8);
            assert_eq!(a.cx, (j as f64 + 0.5) * 8.0);
            assert_eq!(a.cy, (i as f64 + 0.5) * 8.0);
        }
    }

    #[test]
    fn anchor_shapes_match_scale_and_ratio() {
        let grid =
            generate_anchors::<f64>((512, 512), (4, 4), [128.0, 256.0, 512.0], [1.0, 2.0, 0.5])
                .unwrap();
        // scale 128, ratio 1:1 -> w = h = 128
        let a = &grid.anchors[0];
        assert!((a.w - 128.0).abs() < 1e-9 && (a.h - 128.0).abs() < 1e-9);
        // scale 128, ratio 1:2 -> w = 128/sqrt(2), h = 128*sqrt(2), area kept
        let a = &grid.anchors[1];
        assert!((a.w - 128.0 / 2f64.sqrt()).abs() < 1e-9);
        assert!((a.h - 128.0 * 2f64.sqrt()).abs() < 1e-9);
        assert!((a.area() - 128.0 * 128.0).abs() < 1e-6);
    }

    #[test]
    fn non_integral_stride_is_rejected() {
        assert!(generate_anchors::<f64>((60, 64), (8, 8), [1.0; 3], [1.0; 3]).is_err());
        assert!(generate_anchors::<f64>((64, 64), (8, 4), [1.0; 3], [1.0; 3]).is_err());
    }

    #[test]
    fn encode_identity_and_hand_case() {
        let d = b(10.0, 10.0, 4.0, 4.0);
        let t = encode(&d, &d);
        assert_eq!((t.tx, t.ty, t.tw, t.th), (0.0, 0.0, 0.0, 0.0));
        let g = b(12.0, 10.0, 8.0, 4.0);
        let t = encode(&g, &d);
        assert_eq!(t.tx, 0.5);
        assert_eq!(t.ty, 0.0);
        assert!((t.tw - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t.th, 0.0);
    }

    #[test]
    fn decode_inverts_encode() {
        let d = b(3.0, 7.0, 5.0, 2.0);
        let g = b(4.5, 6.0, 3.0, 9.0);
        let back = decode(&encode(&g, &d), &d);
        assert!((back.cx - g.cx).abs() < 1e-12);
        assert!((back.cy - g.cy).abs() < 1e-12);
        assert!((back.w - g.w).abs() < 1e-12);
        assert!((back.h - g.h).abs() < 1e-12);
    }

    #[test]
    fn matching_forces_best_anchor_below_threshold() {
        let anchors = vec![b(1.0, 1.0, 2.0, 2.0), b(9.0, 9.0, 2.0, 2.0)];
        // overlaps best anchor at well under 0.5
        let gt = vec![b(2.0, 1.0, 2.0, 2.0)];
        let m = match_anchors(&anchors, &gt, 0.5, 0.3).unwrap();
        assert_eq!(m.labels[0], AnchorLabel::Positive);
        assert_eq!(m.gt_of(0), Some(0));
        assert_eq!(m.labels[1], AnchorLabel::Negative);
    }

    #[test]
    fn matching_band_is_ignored() {
        let anchors = vec![b(1.25, 1.0, 2.0, 2.0), b(0.0, 0.0, 1.0, 1.0)];
        let gt = vec![b(0.0, 1.0, 2.0, 2.0)];
        // anchor 0 overlap with gt: inter 0.75*2=1.5... compute: a0 corners
        // (0.25,0,2.25,2), gt corners (-1,0,1,2): iw=0.75, ih=2 -> 1.5;
        // union 8-1.5=6.5 -> 0.2308 which is < 0.3 but anchor1 is gt's best?
        let m = match_anchors(&anchors, &gt, 0.5, 0.3).unwrap();
        // gt's best anchor is forced positive, the other is negative
        let pos: Vec<_> = m.positives().collect();
        assert_eq!(pos.len(), 1);
        assert_eq!(m.num_negative(), 1);
    }

    #[test]
    fn two_gts_sharing_a_best_anchor_both_get_one() {
        let anchors = vec![b(5.0, 5.0, 4.0, 4.0), b(5.5, 5.0, 4.0, 4.0)];
        let g1 = b(5.0, 5.0, 4.0, 4.0);
        let g2 = b(5.1, 5.0, 4.0, 4.0);
        let m = match_anchors(&anchors, &[g1, g2], 0.99, 0.3).unwrap();
        let pos: Vec<_> = m.positives().collect();
        assert_eq!(pos.len(), 2);
        // gt0 takes anchor 0 (its best); gt1's best is also anchor 0 but it
        // is already owned, so gt1 falls to anchor 1
        assert!(pos.contains(&(0, 0)));
        assert!(pos.contains(&(1, 1)));
    }

    #[test]
    fn nms_keeps_best_of_identical_pair() {
        let boxes = vec![b(5.0, 5.0, 2.0, 2.0), b(5.0, 5.0, 2.0, 2.0)];
        let kept = nms(&boxes, &[0.8, 0.9], 0.5).unwrap();
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn nms_tie_breaks_by_lower_index() {
        let boxes = vec![b(5.0, 5.0, 2.0, 2.0), b(5.0, 5.0, 2.0, 2.0)];
        let kept = nms(&boxes, &[0.7, 0.7], 0.5).unwrap();
        assert_eq!(kept, vec![0]);
    }

    #[test]
    fn nms_empty_input() {
        let kept = nms::<f64>(&[], &[], 0.5).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn nms_suppresses_only_above_threshold() {
        // IoU exactly at the threshold is kept ("suppress only highly
        // overlapping": strict inequality)
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let c = BBox::from_corners(0.0, 1.0, 2.0, 3.0);
        let iou = jaccard(&a, &c);
        let kept = nms(&[a, c], &[0.9, 0.8], iou).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }
}
