//! Independent reference implementations the oracle suites compare against.
//! Everything here is deliberately naive (quadratic scans, explicit loops)
//! and shares no code with the crate under test.
#![allow(dead_code)]

use cosal::geometry::{AnchorLabel, BBox};
use cosal::Tensor;

pub fn iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0)
        + (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0)
        - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic NMS: repeatedly take the highest-scored unvisited candidate
/// (lowest index on ties) and keep it unless it overlaps a kept box beyond
/// the threshold.
pub fn nms_oracle(boxes: &[BBox<f64>], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let mut visited = vec![false; n];
    let mut kept = Vec::new();
    for _ in 0..n {
        let mut best = usize::MAX;
        for i in 0..n {
            if !visited[i] && (best == usize::MAX || scores[i] > scores[best]) {
                best = i;
            }
        }
        visited[best] = true;
        if kept.iter().all(|&k| iou(&boxes[best], &boxes[k]) <= thr) {
            kept.push(best);
        }
    }
    kept
}

pub struct MatchOracle {
    pub labels: Vec<AnchorLabel>,
    pub gt: Vec<Option<usize>>,
}

/// Exhaustive anchor labelling over the full overlap matrix, following the
/// documented rules: threshold pass first, then per-ground-truth forcing in
/// index order over anchors not already forced.
pub fn match_oracle(
    anchors: &[BBox<f64>],
    gts: &[BBox<f64>],
    pos_thr: f64,
    neg_thr: f64,
) -> MatchOracle {
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut gt = vec![None; n];
    for a in 0..n {
        let mut best_g = 0;
        for g in 1..gts.len() {
            if iou(&anchors[a], &gts[g]) > iou(&anchors[a], &gts[best_g]) {
                best_g = g;
            }
        }
        let best = iou(&anchors[a], &gts[best_g]);
        if best > pos_thr {
            labels[a] = AnchorLabel::Positive;
            gt[a] = Some(best_g);
        } else if best < neg_thr {
            labels[a] = AnchorLabel::Negative;
        }
    }
    let mut forced = vec![false; n];
    for (g, gt_box) in gts.iter().enumerate() {
        let mut best_a = usize::MAX;
        for a in 0..n {
            if forced[a] {
                continue;
            }
            if best_a == usize::MAX || iou(&anchors[a], gt_box) > iou(&anchors[best_a], gt_box) {
                best_a = a;
            }
        }
        forced[best_a] = true;
        labels[best_a] = AnchorLabel::Positive;
        gt[best_a] = Some(g);
    }
    for a in 0..n {
        if labels[a] != AnchorLabel::Positive {
            gt[a] = None;
        }
    }
    MatchOracle { labels, gt }
}

/// Bilinear read of a single plane at a continuous point; cell (i, j) holds
/// its value at (i + 0.5, j + 0.5) and everything outside the map reads 0.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let u = y - 0.5;
    let v = x - 0.5;
    let i0 = u.floor();
    let j0 = v.floor();
    let fy = u - i0;
    let fx = v - j0;
    let mut acc = 0.0;
    for di in 0..2 {
        for dj in 0..2 {
            let i = i0 as isize + di as isize;
            let j = j0 as isize + dj as isize;
            if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                continue;
            }
            let wy = if di == 0 { 1.0 - fy } else { fy };
            let wx = if dj == 0 { 1.0 - fx } else { fx };
            acc += wy * wx * plane[i as usize * w + j as usize];
        }
    }
    acc
}

/// Average-pooled RoIAlign reference: `samples`^2 bilinear reads per bin at
/// the bin's interior lattice points, averaged. Output is channel-major.
pub fn roi_align_oracle(
    feature: &Tensor<f64>,
    bx: &BBox<f64>,
    bins: (usize, usize),
    samples: usize,
) -> Vec<f64> {
    let (c, h, w) = (feature.dim(0), feature.dim(1), feature.dim(2));
    let (x1, y1, _, _) = bx.corners();
    let bin_h = bx.h / bins.0 as f64;
    let bin_w = bx.w / bins.1 as f64;
    let mut out = Vec::with_capacity(c * bins.0 * bins.1);
    for ch in 0..c {
        let plane = &feature.data()[ch * h * w..(ch + 1) * h * w];
        for bi in 0..bins.0 {
            for bj in 0..bins.1 {
                let mut acc = 0.0;
                for p in 0..samples {
                    for q in 0..samples {
                        let y = y1 + (bi as f64 + (p as f64 + 0.5) / samples as f64) * bin_h;
                        let x = x1 + (bj as f64 + (q as f64 + 0.5) / samples as f64) * bin_w;
                        acc += bilinear(plane, h, w, y, x);
                    }
                }
                out.push(acc / (samples * samples) as f64);
            }
        }
    }
    out
}

pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(p: &Tensor<f64>, y: &Tensor<f64>, t: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for k in 0..p.len() {
        let pred = p.data()[k] > t;
        let truth = y.data()[k] == 1.0;
        match (pred, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Precision/recall with the empty-set conventions: precision 1 when nothing
/// is predicted, recall 1 when the ground truth is empty.
pub fn precision_recall(c: &Confusion) -> (f64, f64) {
    let precision = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    (precision, recall)
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let b2 = 0.3;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        return 0.0;
    }
    (1.0 + b2) * precision * recall / denom
}

pub fn mae_oracle(p: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..p.len() {
        acc += (p.data()[k] - y.data()[k]).abs();
    }
    acc / p.len() as f64
}

pub fn adaptive_threshold_oracle(p: &Tensor<f64>) -> f64 {
    let mut mean = 0.0;
    for v in p.data() {
        mean += v;
    }
    mean /= p.len() as f64;
    (2.0 * mean).min(1.0)
}
