//! Training-time augmentation: multi-scale rescaling, border clipping, and
//! random occlusion. Each op fires independently with probability 0.5;
//! image, instance masks, boxes, and Y move together. If fewer than two
//! co-salient instances stay sufficiently visible, the whole augmentation
//! rolls back and the input is returned unchanged.

use rand::Rng;

use super::{BinaryMask, Instance, Sample};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

const RESCALE_RANGE: (f64, f64) = (0.75, 1.25);
const MAX_BORDER_CROP: f64 = 0.25;
const MAX_OCCLUSION_AREA: f64 = 0.15;
const MIN_VISIBLE_FRACTION: f64 = 0.25;

fn src_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
}

pub(crate) fn resize_image<F: Real>(img: &Tensor<F>, nh: usize, nw: usize) -> Tensor<F> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let mut out = Tensor::zeros(&[c, nh, nw]);
    for ch in 0..c {
        for i in 0..nh {
            let si = src_index(i, nh, h);
            for j in 0..nw {
                out.set3(ch, i, j, img.at3(ch, si, src_index(j, nw, w)));
            }
        }
    }
    out
}

pub(crate) fn resize_map<F: Real>(map: &Tensor<F>, nh: usize, nw: usize) -> Tensor<F> {
    let (h, w) = (map.dim(0), map.dim(1));
    let mut out = Tensor::zeros(&[nh, nw]);
    for i in 0..nh {
        let si = src_index(i, nh, h);
        for j in 0..nw {
            out.set2(i, j, map.at2(si, src_index(j, nw, w)));
        }
    }
    out
}

fn resize_mask(m: &BinaryMask, nh: usize, nw: usize) -> BinaryMask {
    let (h, w) = (m.height(), m.width());
    let mut out = BinaryMask::new(nh, nw);
    for i in 0..nh {
        let si = src_index(i, nh, h);
        for j in 0..nw {
            if m.get(si, src_index(j, nw, w)) {
                out.set(i, j, true);
            }
        }
    }
    out
}

fn crop_image<F: Real>(img: &Tensor<F>, i0: usize, j0: usize, h: usize, w: usize) -> Tensor<F> {
    let c = img.dim(0);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.set3(ch, i, j, img.at3(ch, i0 + i, j0 + j));
            }
        }
    }
    out
}

fn crop_mask(m: &BinaryMask, i0: usize, j0: usize, h: usize, w: usize) -> BinaryMask {
    let mut out = BinaryMask::new(h, w);
    for i in 0..h {
        for j in 0..w {
            if m.get(i0 + i, j0 + j) {
                out.set(i, j, true);
            }
        }
    }
    out
}

fn fill_background<F: Real, R: Rng>(img: &mut Tensor<F>, i0: usize, j0: usize, h: usize, w: usize, rng: &mut R) {
    for i in i0..i0 + h {
        for j in j0..j0 + w {
            let v: f64 = rng.gen_range(0.05..0.22);
            for c in 0..3 {
                let n: f64 = rng.gen_range(-0.015..0.015);
                img.set3(c, i, j, real::<F>((v + n).clamp(0.0, 1.0)));
            }
        }
    }
}

/// Rescales by `factor`, then crops (factor > 1, origin `(oi, oj)`) or pads
/// (factor < 1, placing the scaled content at `(oi, oj)` over background
/// fill) back to the original side.
fn rescale_op<F: Real, R: Rng>(
    img: &Tensor<F>,
    masks: &[BinaryMask],
    factor: f64,
    oi: usize,
    oj: usize,
    rng: &mut R,
) -> (Tensor<F>, Vec<BinaryMask>) {
    let s = img.dim(1);
    let n = ((s as f64 * factor).round() as usize).max(1);
    let rimg = resize_image(img, n, n);
    let rmasks: Vec<BinaryMask> = masks.iter().map(|m| resize_mask(m, n, n)).collect();
    if n == s {
        return (rimg, rmasks);
    }
    if n > s {
        let img2 = crop_image(&rimg, oi, oj, s, s);
        let masks2 = rmasks.iter().map(|m| crop_mask(m, oi, oj, s, s)).collect();
        (img2, masks2)
    } else {
        let mut img2 = Tensor::zeros(&[3, s, s]);
        fill_background(&mut img2, 0, 0, s, s, rng);
        for c in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    img2.set3(c, oi + i, oj + j, rimg.at3(c, i, j));
                }
            }
        }
        let masks2 = rmasks
            .iter()
            .map(|m| {
                let mut big = BinaryMask::new(s, s);
                for i in 0..n {
                    for j in 0..n {
                        if m.get(i, j) {
                            big.set(oi + i, oj + j, true);
                        }
                    }
                }
                big
            })
            .collect();
        (img2, masks2)
    }
}

/// Removes `pixels` rows/columns from one border (0 top, 1 bottom, 2 left,
/// 3 right) and stretches the remainder back to the full side.
fn border_crop_op<F: Real>(
    img: &Tensor<F>,
    masks: &[BinaryMask],
    border: usize,
    pixels: usize,
) -> (Tensor<F>, Vec<BinaryMask>) {
    let s = img.dim(1);
    if pixels == 0 {
        return (img.clone(), masks.to_vec());
    }
    let (i0, j0, h, w) = match border {
        0 => (pixels, 0, s - pixels, s),
        1 => (0, 0, s - pixels, s),
        2 => (0, pixels, s, s - pixels),
        _ => (0, 0, s, s - pixels),
    };
    let cimg = crop_image(img, i0, j0, h, w);
    let cmasks: Vec<BinaryMask> = masks.iter().map(|m| crop_mask(m, i0, j0, h, w)).collect();
    let rimg = resize_image(&cimg, s, s);
    let rmasks = cmasks.iter().map(|m| resize_mask(m, s, s)).collect();
    (rimg, rmasks)
}

/// Overwrites a rectangle with background texture and removes it from every
/// mask.
fn occlude_op<F: Real, R: Rng>(
    img: &mut Tensor<F>,
    masks: &mut [BinaryMask],
    i0: usize,
    j0: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) {
    fill_background(img, i0, j0, h, w, rng);
    for m in masks.iter_mut() {
        for i in i0..i0 + h {
            for j in j0..j0 + w {
                m.set(i, j, false);
            }
        }
    }
}

pub fn augment<F: Real, R: Rng>(sample: &Sample<F>, rng: &mut R) -> Sample<F> {
    let s = sample.side();
    let mut image = sample.image.clone();
    let mut masks: Vec<BinaryMask> = sample.instances.iter().map(|i| i.mask.clone()).collect();
    let original_areas: Vec<usize> = masks.iter().map(|m| m.area()).collect();

    if rng.gen_bool(0.5) {
        let factor = rng.gen_range(RESCALE_RANGE.0..RESCALE_RANGE.1);
        let n = ((s as f64 * factor).round() as usize).max(1);
        let span = n.abs_diff(s);
        let oi = if span == 0 { 0 } else { rng.gen_range(0..=span) };
        let oj = if span == 0 { 0 } else { rng.gen_range(0..=span) };
        let (img2, masks2) = rescale_op(&image, &masks, factor, oi, oj, rng);
        image = img2;
        masks = masks2;
    }
    if rng.gen_bool(0.5) {
        let border = rng.gen_range(0..4);
        let pixels = (rng.gen_range(0.0..MAX_BORDER_CROP) * s as f64).round() as usize;
        let (img2, masks2) = border_crop_op(&image, &masks, border, pixels.min(s - 1));
        image = img2;
        masks = masks2;
    }
    if rng.gen_bool(0.5) {
        let max_area = MAX_OCCLUSION_AREA * (s * s) as f64;
        let (h, w) = loop {
            let h = (rng.gen_range(0.10..0.40) * s as f64).round() as usize;
            let w = (rng.gen_range(0.10..0.40) * s as f64).round() as usize;
            if h >= 1 && w >= 1 && (h * w) as f64 <= max_area {
                break (h, w);
            }
        };
        let i0 = rng.gen_range(0..=s - h);
        let j0 = rng.gen_range(0..=s - w);
        occlude_op(&mut image, &mut masks, i0, j0, h, w, rng);
    }

    let mut instances: Vec<Instance<F>> = Vec::new();
    for ((inst, mask), &orig_area) in sample.instances.iter().zip(masks).zip(&original_areas) {
        if orig_area == 0 || (mask.area() as f64) < MIN_VISIBLE_FRACTION * orig_area as f64 {
            continue;
        }
        match mask.tight_bbox() {
            Some(bbox) => instances.push(Instance {
                bbox,
                mask,
                co_salient: inst.co_salient,
            }),
            None => continue,
        }
    }
    if instances.iter().filter(|i| i.co_salient).count() < 2 {
        return sample.clone();
    }
    let mut out = Sample {
        id: sample.id.clone(),
        image,
        y: Tensor::zeros(&[s, s]),
        instances,
    };
    out.derive_y();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_generate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenes(n: usize, seed: u64) -> Vec<Sample<f64>> {
        synth_generate(n, 64, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_draw_returns_the_input_unchanged() {
        let sample = &scenes(1, 1)[0];
        // find a seed whose first three coin flips are all false
        let seed = (0..200u64)
            .find(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                !r.gen_bool(0.5) && !r.gen_bool(0.5) && !r.gen_bool(0.5)
            })
            .unwrap();
        let out = augment(sample, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(out.image.data(), sample.image.data());
        assert_eq!(out.y.data(), sample.y.data());
        assert_eq!(out.instances.len(), sample.instances.len());
    }

    #[test]
    fn outputs_always_satisfy_sample_invariants() {
        for (k, sample) in scenes(20, 2).iter().enumerate() {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
                let out = augment(sample, &mut rng);
                out.validate().unwrap_or_else(|e| panic!("scene {k} seed {seed}: {e}"));
                assert!(out.num_co_salient() >= 2);
            }
        }
    }

    #[test]
    fn rescale_up_maps_centers_by_the_factor_before_the_crop() {
        let sample = &scenes(1, 3)[0];
        let factor = 1.25;
        let s = sample.side();
        let n = (s as f64 * factor).round() as usize;
        for inst in &sample.instances {
            let after = resize_mask(&inst.mask, n, n).tight_bbox::<f64>().unwrap();
            // nearest-neighbor discretization allows ~1 px slack
            assert!(
                (after.cx - inst.bbox.cx * factor).abs() <= 1.5,
                "{} vs {}",
                after.cx,
                inst.bbox.cx * factor
            );
            assert!((after.cy - inst.bbox.cy * factor).abs() <= 1.5);
        }
    }

    #[test]
    fn occlusion_clears_masks_and_respects_the_area_cap() {
        let mut sample = scenes(1, 4).remove(0);
        let mut masks: Vec<BinaryMask> =
            sample.instances.iter().map(|i| i.mask.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        occlude_op(&mut sample.image, &mut masks, 10, 10, 9, 9, &mut rng);
        for m in &masks {
            for i in 10..19 {
                for j in 10..19 {
                    assert!(!m.get(i, j));
                }
            }
        }
    }

    #[test]
    fn heavy_loss_of_instances_rolls_back() {
        // occlude almost everything by hand: simulate by a sample whose
        // augmentation drops below two co-salient instances; rolled-back
        // output must equal the input
        let sample = &scenes(1, 5)[0];
        let mut any_rollback = false;
        for seed in 0..300u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(sample, &mut rng);
            if out.image.data() == sample.image.data()
                && out.instances.len() == sample.instances.len()
            {
                any_rollback = true;
            }
            assert!(out.num_co_salient() >= 2);
        }
        // plenty of identity draws exist among 300 seeds
        assert!(any_rollback);
    }
}
