//! RoIAlign: pools an arbitrary box on a feature map into a fixed grid of
//! bins using exact bilinear interpolation, with no coordinate rounding.
//!
//! Coordinate convention: feature cell `(i, j)` holds its value at the
//! continuous point `(i + 0.5, j + 0.5)` (y down, x right). Boxes are given
//! in feature coordinates; callers rescale image-space boxes by
//! (feature extent / image extent) per axis first.

use crate::error::{CosalError, Result};
use crate::geometry::BBox;
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiAggregation {
    Average,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub struct RoiSpec {
    /// Output bins `(rows, cols)`.
    pub bins: (usize, usize),
    /// Sample points per bin along each axis (2 gives the classic 2x2 grid
    /// at the bin's quarter points).
    pub samples: usize,
    pub aggregation: RoiAggregation,
}

impl Default for RoiSpec {
    fn default() -> Self {
        RoiSpec {
            bins: (7, 7),
            samples: 2,
            aggregation: RoiAggregation::Average,
        }
    }
}

impl RoiSpec {
    fn validate(&self) -> Result<()> {
        if self.bins.0 == 0 || self.bins.1 == 0 || self.samples == 0 {
            return Err(CosalError::InvalidArgument(
                "roi_align: bins and samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The four bilinear taps for a continuous point, as (row, col, weight).
/// Taps outside the map are dropped; dropped taps interpolate against zero.
fn taps<F: Real>(y: F, x: F, h: usize, w: usize) -> [(isize, isize, F); 4] {
    let half = real::<F>(0.5);
    let u = y - half;
    let v = x - half;
    let i0 = u.floor();
    let j0 = v.floor();
    let fy = u - i0;
    let fx = v - j0;
    let (i0, j0) = (
        i0.to_f64().unwrap_or(f64::MAX) as isize,
        j0.to_f64().unwrap_or(f64::MAX) as isize,
    );
    let one = F::one();
    let mut out = [
        (i0, j0, (one - fy) * (one - fx)),
        (i0, j0 + 1, (one - fy) * fx),
        (i0 + 1, j0, fy * (one - fx)),
        (i0 + 1, j0 + 1, fy * fx),
    ];
    for t in &mut out {
        if t.0 < 0 || t.0 >= h as isize || t.1 < 0 || t.1 >= w as isize {
            t.2 = F::zero();
        }
    }
    out
}

fn check_box<F: Real>(feature: &[usize], bx: &BBox<F>) -> Result<()> {
    if feature.len() != 3 || feature.iter().any(|&d| d == 0) {
        return Err(CosalError::shape_mismatch(
            "roi_align",
            "non-empty [channels, height, width]",
            feature,
        ));
    }
    if !(bx.w > F::zero() && bx.h > F::zero()) {
        return Err(CosalError::InvalidArgument(format!(
            "roi_align: degenerate box w={:?} h={:?}",
            bx.w.to_f64(),
            bx.h.to_f64()
        )));
    }
    Ok(())
}

pub fn roi_align<F: Real>(
    feature: &Tensor<F>,
    bx: &BBox<F>,
    spec: &RoiSpec,
) -> Result<Tensor<F>> {
    spec.validate()?;
    check_box(feature.shape(), bx)?;
    let (c, h, w) = (feature.dim(0), feature.dim(1), feature.dim(2));
    let (bh, bw) = spec.bins;
    let s = spec.samples;
    let (x1, y1, _, _) = bx.corners();
    let sh = bx.h / real::<F>(bh as f64);
    let sw = bx.w / real::<F>(bw as f64);
    let sn = real::<F>(s as f64);
    let half = real::<F>(0.5);

    let mut out = Tensor::zeros(&[c, bh, bw]);
    for bi in 0..bh {
        for bj in 0..bw {
            // sample lattice for this bin, shared across channels
            let mut points = Vec::with_capacity(s * s);
            for p in 0..s {
                for q in 0..s {
                    let y = y1 + (real::<F>(bi as f64) + (real::<F>(p as f64) + half) / sn) * sh;
                    let x = x1 + (real::<F>(bj as f64) + (real::<F>(q as f64) + half) / sn) * sw;
                    points.push(taps(y, x, h, w));
                }
            }
            for ch in 0..c {
                let plane = &feature.data()[ch * h * w..(ch + 1) * h * w];
                let mut agg = match spec.aggregation {
                    RoiAggregation::Average => F::zero(),
                    RoiAggregation::Max => F::neg_infinity(),
                };
                for tp in &points {
                    let mut v = F::zero();
                    for &(i, j, wt) in tp {
                        if wt != F::zero() {
                            v = v + wt * plane[i as usize * w + j as usize];
                        }
                    }
                    match spec.aggregation {
                        RoiAggregation::Average => agg = agg + v,
                        RoiAggregation::Max => agg = agg.max(v),
                    }
                }
                if spec.aggregation == RoiAggregation::Average {
                    agg = agg / real::<F>((s * s) as f64);
                }
                out.set3(ch, bi, bj, agg);
            }
        }
    }
    Ok(out)
}

/// Backward pass for average aggregation: each sample point scatters its
/// share of the upstream gradient to its four taps with bilinear weights.
///
/// Max aggregation has no backward here: the chosen signature carries only
/// the feature shape, not the values, so the argmax is unrecoverable. The
/// training path only ever pools with average.
pub fn roi_align_backward<F: Real>(
    feature_shape: &[usize],
    bx: &BBox<F>,
    spec: &RoiSpec,
    upstream: &Tensor<F>,
) -> Result<Tensor<F>> {
    spec.validate()?;
    check_box(feature_shape, bx)?;
    if spec.aggregation == RoiAggregation::Max {
        return Err(CosalError::InvalidArgument(
            "roi_align_backward: max aggregation is not differentiable here; use average".into(),
        ));
    }
    let (c, h, w) = (feature_shape[0], feature_shape[1], feature_shape[2]);
    let (bh, bw) = spec.bins;
    if upstream.shape() != [c, bh, bw] {
        return Err(CosalError::shape_mismatch(
            "roi_align_backward",
            &format!("[{c}, {bh}, {bw}]"),
            upstream.shape(),
        ));
    }
    let s = spec.samples;
    let (x1, y1, _, _) = bx.corners();
    let sh = bx.h / real::<F>(bh as f64);
    let sw = bx.w / real::<F>(bw as f64);
    let sn = real::<F>(s as f64);
    let half = real::<F>(0.5);
    let inv_samples = F::one() / real::<F>((s * s) as f64);

    let mut grad = Tensor::zeros(feature_shape);
    for bi in 0..bh {
        for bj in 0..bw {
            let mut points = Vec::with_capacity(s * s);
            for p in 0..s {
                for q in 0..s {
                    let y = y1 + (real::<F>(bi as f64) + (real::<F>(p as f64) + half) / sn) * sh;
                    let x = x1 + (real::<F>(bj as f64) + (real::<F>(q as f64) + half) / sn) * sw;
                    points.push(taps(y, x, h, w));
                }
            }
            for ch in 0..c {
                let g = upstream.at3(ch, bi, bj) * inv_samples;
                let plane = &mut grad.data_mut()[ch * h * w..(ch + 1) * h * w];
                for tp in &points {
                    for &(i, j, wt) in tp {
                        if wt != F::zero() {
                            let idx = i as usize * w + j as usize;
                            plane[idx] = plane[idx] + g * wt;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}
