//! Synthetic scene generator: each image carries 2-4 co-salient instances of
//! one shape class (shared color, mild scale jitter) over a dark textured
//! background, optionally disturbed by distractor shapes of a different
//! class and color. Masks and boxes are exact by construction.
//!
//! Scenes derive per-sample seeds from the caller's rng, so generation can
//! be reordered or parallelized without changing any scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, Instance, Sample};
use crate::error::{CosalError, Result};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeClass {
    Square,
    Disk,
    Diamond,
    Triangle,
}

const CLASSES: [ShapeClass; 4] = [
    ShapeClass::Square,
    ShapeClass::Disk,
    ShapeClass::Diamond,
    ShapeClass::Triangle,
];

/// Instance sides as fractions of the image side. The lower bound keeps
/// jittered boxes above the offline sampler's area gate.
const MIN_SIDE_FRAC: f64 = 0.26;
const MAX_SIDE_FRAC: f64 = 0.42;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 1.0;
    d.min(1.0 - d)
}

/// Renders a shape of extent `side` centered at continuous `(cx, cy)`.
/// A pixel belongs to the shape when its center does.
fn render_mask(image_side: usize, class: ShapeClass, cx: f64, cy: f64, side: f64) -> BinaryMask {
    let mut m = BinaryMask::new(image_side, image_side);
    let half = side / 2.0;
    let i0 = ((cy - half).floor().max(0.0)) as usize;
    let i1 = ((cy + half).ceil().min(image_side as f64)) as usize;
    let j0 = ((cx - half).floor().max(0.0)) as usize;
    let j1 = ((cx + half).ceil().min(image_side as f64)) as usize;
    for i in i0..i1 {
        for j in j0..j1 {
            let y = i as f64 + 0.5 - cy;
            let x = j as f64 + 0.5 - cx;
            let inside = match class {
                ShapeClass::Square => x.abs() <= half && y.abs() <= half,
                ShapeClass::Disk => x * x + y * y <= half * half,
                ShapeClass::Diamond => x.abs() + y.abs() <= half,
                ShapeClass::Triangle => {
                    // apex up, base down
                    y.abs() <= half && x.abs() <= (y + half) / 2.0
                }
            };
            if inside {
                m.set(i, j, true);
            }
        }
    }
    m
}

struct Placement {
    cx: f64,
    cy: f64,
    side: f64,
}

/// Disjointness in box terms with a 1 px gap, which keeps masks disjoint too.
fn overlaps(a: &Placement, b: &Placement) -> bool {
    let gap = 1.0;
    (a.cx - b.cx).abs() < (a.side + b.side) / 2.0 + gap
        && (a.cy - b.cy).abs() < (a.side + b.side) / 2.0 + gap
}

fn try_place<R: Rng>(
    rng: &mut R,
    image_side: usize,
    shape_side: f64,
    placed: &[Placement],
) -> Option<Placement> {
    let s = image_side as f64;
    let half = shape_side / 2.0;
    for _ in 0..60 {
        let cx = rng.gen_range(half + 1.0..s - half - 1.0);
        let cy = rng.gen_range(half + 1.0..s - half - 1.0);
        let cand = Placement {
            cx,
            cy,
            side: shape_side,
        };
        if placed.iter().all(|p| !overlaps(p, &cand)) {
            return Some(cand);
        }
    }
    None
}

fn generate_one<F: Real>(id: String, side: usize, seed: u64) -> Result<Sample<F>> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;

    let (co_class, placements, classes, hues) = loop {
        let n_co: usize = rng.gen_range(2..=4);
        let n_dis = [0usize, 1, 1, 2][rng.gen_range(0..4)];
        let total = n_co + n_dis;
        let upper = (MAX_SIDE_FRAC - 0.025 * total as f64).max(MIN_SIDE_FRAC + 0.01);
        let base = s * rng.gen_range(MIN_SIDE_FRAC..upper);

        let co_class = CLASSES[rng.gen_range(0..CLASSES.len())];
        let co_hue: f64 = rng.gen_range(0.0..1.0);
        let dis_class = loop {
            let c = CLASSES[rng.gen_range(0..CLASSES.len())];
            if c != co_class {
                break c;
            }
        };
        let dis_hue = loop {
            let h = rng.gen_range(0.0..1.0);
            if hue_distance(h, co_hue) >= 0.15 {
                break h;
            }
        };

        let mut placements: Vec<Placement> = Vec::new();
        let mut classes: Vec<ShapeClass> = Vec::new();
        let mut hues: Vec<f64> = Vec::new();
        let mut co_placed = 0usize;
        for _ in 0..n_co {
            let shape_side =
                (base * rng.gen_range(0.8..1.2)).clamp(MIN_SIDE_FRAC * s, upper * s);
            if let Some(p) = try_place(rng, side, shape_side, &placements) {
                placements.push(p);
                classes.push(co_class);
                hues.push(co_hue);
                co_placed += 1;
            }
        }
        for _ in 0..n_dis {
            let shape_side =
                (base * rng.gen_range(0.8..1.2)).clamp(MIN_SIDE_FRAC * s, upper * s);
            if let Some(p) = try_place(rng, side, shape_side, &placements) {
                placements.push(p);
                classes.push(dis_class);
                hues.push(dis_hue);
            }
        }
        if co_placed >= 2 {
            break (co_class, placements, classes, hues);
        }
    };

    let sat: f64 = rng.gen_range(0.6..0.95);
    let val: f64 = rng.gen_range(0.6..0.95);

    let mut instances: Vec<Instance<F>> = Vec::new();
    for (k, p) in placements.iter().enumerate() {
        let mask = render_mask(side, classes[k], p.cx, p.cy, p.side);
        let bbox = mask.tight_bbox().ok_or_else(|| {
            CosalError::Dataset(format!("{id}: degenerate synthetic instance {k}"))
        })?;
        instances.push(Instance {
            bbox,
            mask,
            co_salient: classes[k] == co_class,
        });
    }

    // dark, low-saturation, gently textured background
    let base_v: f64 = rng.gen_range(0.06..0.22);
    let fx: f64 = rng.gen_range(0.02..0.09);
    let fy: f64 = rng.gen_range(0.02..0.09);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut image = Tensor::zeros(&[3, side, side]);
    for i in 0..side {
        for j in 0..side {
            let covering = (0..instances.len()).find(|&k| instances[k].mask.get(i, j));
            let rgb = match covering {
                Some(k) => {
                    let c = hsv_to_rgb(hues[k], sat, val);
                    [
                        c[0] + rng.gen_range(-0.04..0.04),
                        c[1] + rng.gen_range(-0.04..0.04),
                        c[2] + rng.gen_range(-0.04..0.04),
                    ]
                }
                None => {
                    let wave = 0.03
                        * (std::f64::consts::TAU * (fx * j as f64 + fy * i as f64) + phase).sin();
                    let v = base_v + wave + rng.gen_range(-0.04..0.04);
                    [
                        v + rng.gen_range(-0.015..0.015),
                        v + rng.gen_range(-0.015..0.015),
                        v + rng.gen_range(-0.015..0.015),
                    ]
                }
            };
            for (c, v) in rgb.iter().enumerate() {
                // quantize to 8-bit steps so disk roundtrips are exact
                let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                image.set3(c, i, j, real::<F>(q));
            }
        }
    }

    let mut sample = Sample {
        id,
        image,
        y: Tensor::zeros(&[side, side]),
        instances,
    };
    sample.derive_y();
    sample.validate()?;
    Ok(sample)
}

/// Generates `count` scenes. Each scene is produced from its own seed drawn
/// up front from `rng`, so scene `k` is independent of how the others are
/// consumed.
pub fn synth_generate<F: Real, R: Rng>(
    count: usize,
    side: usize,
    rng: &mut R,
) -> Result<Vec<Sample<F>>> {
    if side < 32 {
        return Err(CosalError::InvalidArgument(format!(
            "synth_generate: side {side} below minimum 32"
        )));
    }
    let seeds: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    seeds
        .into_iter()
        .enumerate()
        .map(|(k, seed)| generate_one(format!("synth_{k:05}"), side, seed))
        .collect()
}
