mod common;

use cosal::geometry::{decode, encode, generate_anchors, jaccard, match_anchors, nms, BBox};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box<R: Rng>(rng: &mut R) -> BBox<f64> {
    BBox::new(
        rng.gen_range(0.0..64.0),
        rng.gen_range(0.0..64.0),
        rng.gen_range(2.0..32.0),
        rng.gen_range(2.0..32.0),
    )
}

/// Scores quantized to eighths so ties are common and the tie-breaking path
/// gets exercised.
fn random_scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0..=8) as f64 / 8.0).collect()
}

#[test]
fn nms_agrees_with_quadratic_oracle_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=20);
        let mut boxes: Vec<BBox<f64>> = (0..n).map(|_| random_box(&mut rng)).collect();
        // duplicated geometry makes IoU exactly 1 for some pairs
        if n > 2 {
            boxes[n - 1] = boxes[0];
        }
        let scores = random_scores(&mut rng, n);
        let thr = [0.3, 0.5, 0.7][seed as usize % 3];
        let kept = nms(&boxes, &scores, thr).unwrap();
        assert_eq!(kept, common::nms_oracle(&boxes, &scores, thr), "seed {seed}");
    }
}

#[test]
fn match_anchors_agrees_with_exhaustive_oracle_over_50_scenes() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let grid = generate_anchors((32, 32), (4, 4), [8.0, 16.0, 32.0], [1.0, 2.0, 0.5]).unwrap();
        let gts: Vec<BBox<f64>> = (0..rng.gen_range(1..=4))
            .map(|_| {
                let w = rng.gen_range(4.0..24.0);
                let h = rng.gen_range(4.0..24.0);
                BBox::new(
                    rng.gen_range(w / 2.0..32.0 - w / 2.0),
                    rng.gen_range(h / 2.0..32.0 - h / 2.0),
                    w,
                    h,
                )
            })
            .collect();
        let got = match_anchors(&grid.anchors, &gts, 0.5, 0.3).unwrap();
        let want = common::match_oracle(&grid.anchors, &gts, 0.5, 0.3);
        assert_eq!(got.labels, want.labels, "seed {seed}");
        for a in 0..grid.anchors.len() {
            assert_eq!(got.gt_of(a), want.gt[a], "seed {seed} anchor {a}");
        }
    }
}

#[test]
fn encode_decode_roundtrip_within_1e9_over_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    for _ in 0..1000 {
        let g = random_box(&mut rng);
        let d = random_box(&mut rng);
        let back = decode(&encode(&g, &d), &d);
        for (a, b) in [(back.cx, g.cx), (back.cy, g.cy), (back.w, g.w), (back.h, g.h)] {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn anchor_grid_layout_matches_indexing_contract() {
    let scales = [8.0, 16.0, 32.0];
    let ratios = [1.0, 2.0, 0.5];
    let grid = generate_anchors((64, 64), (8, 8), scales, ratios).unwrap();
    assert_eq!(grid.anchors.len(), 8 * 8 * 9);
    assert_eq!(grid.stride, 8.0);
    for i in 0..8 {
        for j in 0..8 {
            for (s, &scale) in scales.iter().enumerate() {
                for (r, &ratio) in ratios.iter().enumerate() {
                    let a = &grid.anchors[(i * 8 + j) * 9 + 3 * s + r];
                    assert_eq!(a.cx, (j as f64 + 0.5) * 8.0);
                    assert_eq!(a.cy, (i as f64 + 0.5) * 8.0);
                    // area is preserved across ratios
                    assert!((a.w * a.h - scale * scale).abs() < 1e-9);
                    assert!((a.h / a.w - ratio).abs() < 1e-12);
                }
            }
        }
    }
}

fn arb_box() -> impl Strategy<Value = BBox<f64>> {
    (0.0..64.0f64, 0.0..64.0f64, 1.0..32.0f64, 1.0..32.0f64)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

proptest! {
    #[test]
    fn jaccard_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = jaccard(&a, &b);
        prop_assert_eq!(ab, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
    }

    #[test]
    fn decode_inverts_encode(g in arb_box(), d in arb_box()) {
        let back = decode(&encode(&g, &d), &d);
        prop_assert!((back.cx - g.cx).abs() < 1e-9);
        prop_assert!((back.cy - g.cy).abs() < 1e-9);
        prop_assert!((back.w - g.w).abs() < 1e-9);
        prop_assert!((back.h - g.h).abs() < 1e-9);
    }

    #[test]
    fn nms_output_is_mutually_separated_and_complete(
        boxes in prop::collection::vec(arb_box(), 1..16),
        raw_scores in prop::collection::vec(0..=8u8, 16),
        thr in 0.2..0.8f64,
    ) {
        let scores: Vec<f64> = raw_scores[..boxes.len()].iter().map(|&s| s as f64 / 8.0).collect();
        let kept = nms(&boxes, &scores, thr).unwrap();
        prop_assert_eq!(&kept, &common::nms_oracle(&boxes, &scores, thr));
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                prop_assert!(jaccard(&boxes[i], &boxes[j]) <= thr);
            }
        }
        // every dropped box overlaps some kept box with a score at least its own
        for i in 0..boxes.len() {
            if !kept.contains(&i) {
                prop_assert!(kept
                    .iter()
                    .any(|&k| jaccard(&boxes[i], &boxes[k]) > thr && scores[k] >= scores[i]));
            }
        }
    }

    #[test]
    fn every_ground_truth_keeps_a_positive_anchor(
        gts in prop::collection::vec(arb_box(), 1..5),
    ) {
        let grid = generate_anchors((64, 64), (8, 8), [16.0, 32.0, 64.0], [1.0, 2.0, 0.5]).unwrap();
        let m = match_anchors(&grid.anchors, &gts, 0.5, 0.3).unwrap();
        let mut owned = vec![false; gts.len()];
        for (_, g) in m.positives() {
            owned[g] = true;
        }
        prop_assert!(owned.iter().all(|&o| o));
        // negatives really sit below the negative threshold
        for a in m.negatives() {
            let best = gts.iter().map(|g| jaccard(&grid.anchors[a], g)).fold(0.0, f64::max);
            prop_assert!(best < 0.3);
        }
    }
}
