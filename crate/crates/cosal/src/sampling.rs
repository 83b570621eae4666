//! Triplet construction for the region-embedding branch: the offline
//! strategy (random jitter around ground-truth boxes) and the online
//! strategy (hard-example mining over RPN proposals).
//!
//! Gates shared by both strategies: positives overlap their matched ground
//! truth with Jaccard > 0.5 and contain exactly one salient instance;
//! negatives overlap every co-salient ground truth with Jaccard < 0.1.

use rand::Rng;

use crate::data::Sample;
use crate::error::{CosalError, Result};
use crate::geometry::{decode, jaccard, nms, BBox, OffsetVec};
use crate::scalar::{real, Real};

#[derive(Clone, Copy, Debug)]
pub struct SamplingConfig<F> {
    /// Offline positive region count per batch.
    pub positives: usize,
    /// Offline negative region count per batch.
    pub negatives: usize,
    /// Triplets drawn per batch (both strategies cap here).
    pub triplet_count: usize,
    /// Positive gate: Jaccard to the matched ground truth must exceed this.
    pub pos_iou: F,
    /// Negative gate: Jaccard to every co-salient ground truth stays below.
    pub neg_iou: F,
    /// Allowed height/width ratio of jittered regions.
    pub aspect_range: (F, F),
    /// Allowed sqrt(area) of jittered regions, as fractions of the image side.
    pub area_side_range: (F, F),
    /// sqrt(area) range for background negative draws, fractions of the side.
    pub neg_side_range: (F, F),
    /// A region "contains" an instance when it covers at least this fraction
    /// of the instance box's area. Positives must contain exactly one.
    pub containment: F,
    /// Rejection-sampling draw budget per category.
    pub retry_budget: usize,
    /// Proposal suppression threshold for online mining.
    pub nms_iou: F,
}

impl<F: Real> Default for SamplingConfig<F> {
    fn default() -> Self {
        SamplingConfig {
            positives: 32,
            negatives: 96,
            triplet_count: 128,
            pos_iou: real(0.5),
            neg_iou: real(0.1),
            aspect_range: (real(0.5), real(2.0)),
            area_side_range: (real(0.25), real(1.0)),
            neg_side_range: (real(0.15), real(0.5)),
            containment: real(0.5),
            retry_budget: 1000,
            nms_iou: real(0.7),
        }
    }
}

/// One training triplet. `anchor_gt` / `positive_gt` index the sample's
/// co-salient ground-truth boxes.
#[derive(Clone, Copy, Debug)]
pub struct Triplet<F> {
    pub anchor: BBox<F>,
    pub positive: BBox<F>,
    pub negative: BBox<F>,
    /// `jaccard(anchor, gt) * jaccard(positive, gt)`.
    pub weight: F,
    pub anchor_gt: usize,
    pub positive_gt: usize,
}

/// Offline batch: the raw region pools plus the drawn triplets. Shortfalls
/// record how many requested regions the retry budget failed to produce.
#[derive(Clone, Debug)]
pub struct TripletBatch<F> {
    pub triplets: Vec<Triplet<F>>,
    pub positives: Vec<(BBox<F>, usize)>,
    pub negatives: Vec<BBox<F>>,
    pub positive_shortfall: usize,
    pub negative_shortfall: usize,
}

/// Borrowed view of one RPN forward pass, indexed like the anchor list.
#[derive(Clone, Copy, Debug)]
pub struct RpnView<'a, F> {
    pub confidences: &'a [F],
    pub offsets: &'a [OffsetVec<F>],
}

/// Best-overlap ground truth for a region (ties: lower index).
fn matched_gt<F: Real>(region: &BBox<F>, gts: &[BBox<F>]) -> (usize, F) {
    let mut best = (0usize, F::neg_infinity());
    for (g, gt) in gts.iter().enumerate() {
        let v = jaccard(region, gt);
        if v > best.1 {
            best = (g, v);
        }
    }
    best
}

/// Fraction of `inst`'s area covered by `region`.
fn coverage<F: Real>(region: &BBox<F>, inst: &BBox<F>) -> F {
    let (rx1, ry1, rx2, ry2) = region.corners();
    let (ix1, iy1, ix2, iy2) = inst.corners();
    let iw = (rx2.min(ix2) - rx1.max(ix1)).max(F::zero());
    let ih = (ry2.min(iy2) - ry1.max(iy1)).max(F::zero());
    iw * ih / inst.area()
}

/// A positive region must contain exactly one salient instance, counting
/// both co-salient and distractor boxes. Jaccard > 0.5 to the matched ground
/// truth already forces its coverage above 0.5, so with the default 0.5
/// containment level the gate reduces to "covers no second instance".
fn contains_exactly_one<F: Real>(region: &BBox<F>, all_boxes: &[BBox<F>], tau: F) -> bool {
    all_boxes
        .iter()
        .filter(|b| coverage(region, b) >= tau)
        .count()
        == 1
}

/// Triplet weight: the product of each member's overlap with its own
/// best-matching ground truth.
pub fn triplet_weight<F: Real>(anchor: &BBox<F>, positive: &BBox<F>, gt_boxes: &[BBox<F>]) -> F {
    matched_gt(anchor, gt_boxes).1 * matched_gt(positive, gt_boxes).1
}

fn uniform<F: Real, R: Rng>(rng: &mut R, lo: F, hi: F) -> F {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draws one jittered box around `base`: center shifted by up to ±35% of the
/// extent, sides scaled in [0.7, 1.4].
fn jitter_box<F: Real, R: Rng>(base: &BBox<F>, rng: &mut R) -> BBox<F> {
    let shift = real::<F>(0.35);
    let cx = base.cx + uniform(rng, -shift, shift) * base.w;
    let cy = base.cy + uniform(rng, -shift, shift) * base.h;
    let w = base.w * uniform(rng, real(0.7), real(1.4));
    let h = base.h * uniform(rng, real(0.7), real(1.4));
    BBox::new(cx, cy, w, h)
}

fn positive_gates_pass<F: Real>(
    region: &BBox<F>,
    gts: &[BBox<F>],
    all_boxes: &[BBox<F>],
    side: F,
    cfg: &SamplingConfig<F>,
) -> Option<(usize, F)> {
    let ratio = region.h / region.w;
    if ratio < cfg.aspect_range.0 || ratio > cfg.aspect_range.1 {
        return None;
    }
    let area_side = region.area().sqrt() / side;
    if area_side < cfg.area_side_range.0 || area_side > cfg.area_side_range.1 {
        return None;
    }
    let (g, iou) = matched_gt(region, gts);
    if iou <= cfg.pos_iou {
        return None;
    }
    if !contains_exactly_one(region, all_boxes, cfg.containment) {
        return None;
    }
    Some((g, iou))
}

fn negative_gate_passes<F: Real>(region: &BBox<F>, gts: &[BBox<F>], cfg: &SamplingConfig<F>) -> bool {
    gts.iter().all(|g| jaccard(region, g) < cfg.neg_iou)
}

/// Offline strategy: 32 jittered positives, 96 background/distractor
/// negatives, 128 randomly assembled triplets (counts per config). Anchor
/// and positive may reference the same instance but are never the same box.
pub fn offline_triplets<F: Real, R: Rng>(
    sample: &Sample<F>,
    cfg: &SamplingConfig<F>,
    rng: &mut R,
) -> Result<TripletBatch<F>> {
    let gts = sample.co_salient_boxes();
    if gts.len() < 2 {
        return Err(CosalError::InvalidArgument(format!(
            "offline_triplets: sample {} has {} co-salient instances, need >= 2",
            sample.id,
            gts.len()
        )));
    }
    let distractors = sample.distractor_boxes();
    let all_boxes: Vec<BBox<F>> = gts.iter().chain(distractors.iter()).copied().collect();
    let side = real::<F>(sample.side() as f64);

    let mut positives: Vec<(BBox<F>, usize)> = Vec::with_capacity(cfg.positives);
    for _ in 0..cfg.retry_budget {
        if positives.len() == cfg.positives {
            break;
        }
        let base = &gts[rng.gen_range(0..gts.len())];
        let region = jitter_box(base, rng);
        if let Some((g, _)) = positive_gates_pass(&region, &gts, &all_boxes, side, cfg) {
            positives.push((region, g));
        }
    }

    let mut negatives: Vec<BBox<F>> = Vec::with_capacity(cfg.negatives);
    for _ in 0..cfg.retry_budget {
        if negatives.len() == cfg.negatives {
            break;
        }
        let region = if !distractors.is_empty() && rng.gen_bool(0.5) {
            jitter_box(&distractors[rng.gen_range(0..distractors.len())], rng)
        } else {
            let s = side * uniform(rng, cfg.neg_side_range.0, cfg.neg_side_range.1);
            let r = uniform(rng, cfg.aspect_range.0, cfg.aspect_range.1);
            let (w, h) = (s / r.sqrt(), s * r.sqrt());
            let two = real::<F>(2.0);
            let cx = uniform(rng, w / two, side - w / two);
            let cy = uniform(rng, h / two, side - h / two);
            BBox::new(cx, cy, w, h)
        };
        if region.is_valid() && negative_gate_passes(&region, &gts, cfg) {
            negatives.push(region);
        }
    }

    let mut triplets = Vec::with_capacity(cfg.triplet_count);
    if positives.len() >= 2 && !negatives.is_empty() {
        for _ in 0..cfg.triplet_count {
            let a = rng.gen_range(0..positives.len());
            // distinct second index with a single draw
            let p = (a + 1 + rng.gen_range(0..positives.len() - 1)) % positives.len();
            let n = rng.gen_range(0..negatives.len());
            let (abox, agt) = positives[a];
            let (pbox, pgt) = positives[p];
            triplets.push(Triplet {
                anchor: abox,
                positive: pbox,
                negative: negatives[n],
                weight: jaccard(&abox, &gts[agt]) * jaccard(&pbox, &gts[pgt]),
                anchor_gt: agt,
                positive_gt: pgt,
            });
        }
    }

    Ok(TripletBatch {
        positive_shortfall: cfg.positives - positives.len(),
        negative_shortfall: cfg.negatives - negatives.len(),
        triplets,
        positives,
        negatives,
    })
}

/// Online strategy: decode every scored proposal, rank by loss (hardest
/// first), suppress near-duplicates with NMS, gate the survivors, and pair
/// ordered hard-positive pairs with randomly drawn hard negatives.
///
/// `per_region_losses` must align with `anchors`; entries < 0 mark anchors
/// that contributed no loss (the ignore band) and are skipped as candidates.
pub fn online_triplets<F: Real, R: Rng>(
    sample: &Sample<F>,
    rpn: RpnView<'_, F>,
    anchors: &[BBox<F>],
    per_region_losses: &[F],
    cfg: &SamplingConfig<F>,
    rng: &mut R,
) -> Result<Vec<Triplet<F>>> {
    if rpn.offsets.len() != anchors.len()
        || rpn.confidences.len() != anchors.len()
        || per_region_losses.len() != anchors.len()
    {
        return Err(CosalError::InvalidArgument(format!(
            "online_triplets: anchors {}, confidences {}, offsets {}, losses {} must align",
            anchors.len(),
            rpn.confidences.len(),
            rpn.offsets.len(),
            per_region_losses.len()
        )));
    }
    let gts = sample.co_salient_boxes();
    if gts.len() < 2 {
        return Err(CosalError::InvalidArgument(format!(
            "online_triplets: sample {} has {} co-salient instances, need >= 2",
            sample.id,
            gts.len()
        )));
    }
    let distractors = sample.distractor_boxes();
    let all_boxes: Vec<BBox<F>> = gts.iter().chain(distractors.iter()).copied().collect();
    let side = real::<F>(sample.side() as f64);
    let two_sides = side + side;

    let mut boxes = Vec::new();
    let mut losses = Vec::new();
    for a in 0..anchors.len() {
        let loss = per_region_losses[a];
        if loss < F::zero() {
            continue;
        }
        let bx = decode(&rpn.offsets[a], &anchors[a]);
        // drop numerically wild decodes (early training can explode exp())
        let sane = bx.is_valid()
            && bx.w <= two_sides
            && bx.h <= two_sides
            && bx.cx >= F::zero()
            && bx.cx <= side
            && bx.cy >= F::zero()
            && bx.cy <= side;
        if sane {
            boxes.push(bx);
            losses.push(loss);
        }
    }
    let kept = nms(&boxes, &losses, cfg.nms_iou)?;

    let mut positives: Vec<(BBox<F>, usize)> = Vec::new();
    let mut negatives: Vec<BBox<F>> = Vec::new();
    for &k in &kept {
        let region = boxes[k];
        let (g, iou) = matched_gt(&region, &gts);
        if iou > cfg.pos_iou {
            if contains_exactly_one(&region, &all_boxes, cfg.containment) {
                positives.push((region, g));
            }
        } else if negative_gate_passes(&region, &gts, cfg) {
            negatives.push(region);
        }
    }

    let mut triplets = Vec::new();
    if positives.len() < 2 || negatives.is_empty() {
        return Ok(triplets);
    }
    'outer: for j in 1..positives.len() {
        for i in 0..j {
            for (a, p) in [(i, j), (j, i)] {
                if triplets.len() == cfg.triplet_count {
                    break 'outer;
                }
                let (abox, agt) = positives[a];
                let (pbox, pgt) = positives[p];
                let negative = negatives[rng.gen_range(0..negatives.len())];
                triplets.push(Triplet {
                    anchor: abox,
                    positive: pbox,
                    negative,
                    weight: jaccard(&abox, &gts[agt]) * jaccard(&pbox, &gts[pgt]),
                    anchor_gt: agt,
                    positive_gt: pgt,
                });
            }
        }
    }
    Ok(triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BinaryMask, Instance};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_instance(s: usize, i0: usize, j0: usize, len: usize, co: bool) -> Instance<f64> {
        let mut m = BinaryMask::new(s, s);
        for i in i0..i0 + len {
            for j in j0..j0 + len {
                m.set(i, j, true);
            }
        }
        Instance {
            bbox: m.tight_bbox().unwrap(),
            mask: m,
            co_salient: co,
        }
    }

    fn scene() -> Sample<f64> {
        let s = 64;
        let instances = vec![
            square_instance(s, 6, 6, 20, true),
            square_instance(s, 36, 36, 20, true),
            square_instance(s, 8, 40, 16, false),
        ];
        let mut sample = Sample {
            id: "scene".into(),
            image: Tensor::zeros(&[3, s, s]),
            y: Tensor::zeros(&[s, s]),
            instances,
        };
        sample.derive_y();
        sample
    }

    #[test]
    fn offline_composition_and_gates() {
        let sample = scene();
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let batch = offline_triplets(&sample, &cfg, &mut rng).unwrap();
        assert_eq!(batch.positives.len(), 32, "shortfall {}", batch.positive_shortfall);
        assert_eq!(batch.negatives.len(), 96);
        assert_eq!(batch.triplets.len(), 128);
        let gts = sample.co_salient_boxes();
        for (region, g) in &batch.positives {
            assert!(jaccard(region, &gts[*g]) > 0.5);
        }
        for region in &batch.negatives {
            for g in &gts {
                assert!(jaccard(region, g) < 0.1);
            }
        }
        for t in &batch.triplets {
            assert!(t.weight > 0.25 && t.weight <= 1.0);
            assert!(t.anchor != t.positive);
        }
    }

    #[test]
    fn offline_is_seed_deterministic() {
        let sample = scene();
        let cfg = SamplingConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            offline_triplets(&sample, &cfg, &mut rng).unwrap()
        };
        let (a, b) = (run(7), run(7));
        assert_eq!(a.triplets.len(), b.triplets.len());
        for (x, y) in a.triplets.iter().zip(&b.triplets) {
            assert_eq!(x.anchor, y.anchor);
            assert_eq!(x.positive, y.positive);
            assert_eq!(x.negative, y.negative);
            assert_eq!(x.weight, y.weight);
        }
        let c = run(8);
        assert!(a
            .triplets
            .iter()
            .zip(&c.triplets)
            .any(|(x, y)| x.anchor != y.anchor));
    }

    #[test]
    fn weight_is_overlap_product() {
        // nested boxes: IoU equals the area ratio
        let gt = BBox::<f64>::new(10.0, 10.0, 10.0, 10.0);
        let a = BBox::new(10.0, 10.0, 10.0, 6.0); // IoU 0.6
        let p = BBox::new(10.0, 10.0, 10.0, 5.0); // IoU 0.5
        let w = triplet_weight(&a, &p, &[gt]);
        assert!((w - 0.30).abs() < 1e-12);
        assert_eq!(triplet_weight(&gt, &gt, &[gt]), 1.0);
    }

    #[test]
    fn region_covering_two_instances_fails_containment() {
        let sample = scene();
        let gts = sample.co_salient_boxes();
        let all: Vec<_> = gts
            .iter()
            .chain(sample.distractor_boxes().iter())
            .copied()
            .collect();
        // a huge box over everything covers more than one instance
        let big = BBox::new(32.0, 32.0, 64.0, 64.0);
        assert!(!contains_exactly_one(&big, &all, 0.5));
        // a tight box over one instance passes
        assert!(contains_exactly_one(&gts[0], &all, 0.5));
    }

    fn zero_offsets(n: usize) -> Vec<OffsetVec<f64>> {
        vec![
            OffsetVec {
                tx: 0.0,
                ty: 0.0,
                tw: 0.0,
                th: 0.0,
            };
            n
        ]
    }

    #[test]
    fn online_identical_proposals_collapse_to_one() {
        let sample = scene();
        let gts = sample.co_salient_boxes();
        // anchors: many copies over gt0, one over gt1, two background
        let mut anchors = vec![gts[0]; 5];
        anchors.push(gts[1]);
        anchors.push(BBox::new(60.0, 8.0, 6.0, 6.0));
        anchors.push(BBox::new(33.0, 12.0, 7.0, 7.0));
        let n = anchors.len();
        let conf = vec![0.5; n];
        let offsets = zero_offsets(n);
        let losses = vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let triplets = online_triplets(
            &sample,
            RpnView {
                confidences: &conf,
                offsets: &offsets,
            },
            &anchors,
            &losses,
            &SamplingConfig::default(),
            &mut rng,
        )
        .unwrap();
        // the 5 duplicates collapse, leaving 2 positives and 2 negatives:
        // ordered pairs of 2 positives = 2 triplets
        assert_eq!(triplets.len(), 2);
        let firsts: Vec<_> = triplets.iter().map(|t| t.anchor).collect();
        assert!(firsts.contains(&gts[0]) && firsts.contains(&gts[1]));
    }

    #[test]
    fn online_ignore_band_and_negative_losses_are_excluded() {
        let sample = scene();
        let gts = sample.co_salient_boxes();
        // a proposal overlapping gt0 at IoU ~0.4 sits in the gate band
        let banded = BBox::new(gts[0].cx + 8.0, gts[0].cy, 20.0, 20.0);
        assert!(jaccard(&banded, &gts[0]) > 0.1 && jaccard(&banded, &gts[0]) < 0.5);
        let anchors = vec![gts[0], gts[1], banded, BBox::new(60.0, 60.0, 6.0, 6.0)];
        let conf = vec![0.5; 4];
        let offsets = zero_offsets(4);
        // last anchor is marked ignored via negative loss
        let losses = vec![0.9, 0.8, 0.7, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let triplets = online_triplets(
            &sample,
            RpnView {
                confidences: &conf,
                offsets: &offsets,
            },
            &anchors,
            &losses,
            &SamplingConfig::default(),
            &mut rng,
        )
        .unwrap();
        // two positives but zero negatives (band box is neither, ignored box
        // is excluded) -> no triplets
        assert!(triplets.is_empty());
    }

    #[test]
    fn online_orders_hard_examples_first() {
        let sample = scene();
        let gts = sample.co_salient_boxes();
        let anchors = vec![
            gts[0], // easy: low loss
            gts[1], // occluded: high loss
            BBox::new(60.0, 8.0, 6.0, 6.0),
        ];
        let conf = vec![0.5; 3];
        let offsets = zero_offsets(3);
        let losses = vec![0.1, 2.0, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let triplets = online_triplets(
            &sample,
            RpnView {
                confidences: &conf,
                offsets: &offsets,
            },
            &anchors,
            &losses,
            &SamplingConfig::default(),
            &mut rng,
        )
        .unwrap();
        // hardest positive (gt1's proposal) anchors the first triplet
        assert_eq!(triplets[0].anchor, gts[1]);
    }

    #[test]
    fn online_same_seed_reproduces() {
        let sample = scene();
        let gts = sample.co_salient_boxes();
        let anchors = vec![gts[0], gts[1], BBox::new(60.0, 8.0, 6.0, 6.0)];
        let conf = vec![0.5; 3];
        let offsets = zero_offsets(3);
        let losses = vec![0.4, 0.6, 0.2];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            online_triplets(
                &sample,
                RpnView {
                    confidences: &conf,
                    offsets: &offsets,
                },
                &anchors,
                &losses,
                &SamplingConfig::default(),
                &mut rng,
            )
            .unwrap()
        };
        let (a, b) = (run(11), run(11));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.negative, y.negative);
        }
    }
}
