//! Dataset model: instance-annotated co-saliency samples, plus synthetic
//! generation ([`synth`]), augmentation ([`augment`]) and disk I/O ([`io`]).
//!
//! A sample's ground truth `Y` is the pixel-wise OR of its co-salient
//! instance masks; distractor instances are annotated but excluded from `Y`.

pub mod augment;
pub mod io;
pub mod synth;

use crate::error::{CosalError, Result};
use crate::geometry::BBox;
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

/// Dense binary mask covering the full image extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(CosalError::Dataset(format!(
                "mask bits length {} does not match {h}x{w}",
                bits.len()
            )));
        }
        Ok(BinaryMask { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.w + j] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn or_into(&self, other: &mut BinaryMask) {
        for (o, s) in other.bits.iter_mut().zip(&self.bits) {
            *o |= *s;
        }
    }

    /// Tight bounding box of the set pixels; pixel `(i, j)` occupies the unit
    /// square `[j, j+1) x [i, i+1)` in continuous coordinates.
    pub fn tight_bbox<F: Real>(&self) -> Option<BBox<F>> {
        let (mut i0, mut j0, mut i1, mut j1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) {
                    any = true;
                    i0 = i0.min(i);
                    j0 = j0.min(j);
                    i1 = i1.max(i);
                    j1 = j1.max(j);
                }
            }
        }
        any.then(|| {
            BBox::from_corners(
                real(j0 as f64),
                real(i0 as f64),
                real((j1 + 1) as f64),
                real((i1 + 1) as f64),
            )
        })
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_vec(
            &[self.h, self.w],
            self.bits
                .iter()
                .map(|b| if *b { F::one() } else { F::zero() })
                .collect(),
        )
        .expect("mask dims")
    }
}

#[derive(Clone, Debug)]
pub struct Instance<F> {
    pub bbox: BBox<F>,
    pub mask: BinaryMask,
    pub co_salient: bool,
}

#[derive(Clone, Debug)]
pub struct Sample<F> {
    pub id: String,
    /// `[3, S, S]`, values in `[0, 1]`.
    pub image: Tensor<F>,
    /// `[S, S]`, binary; OR of the co-salient instance masks.
    pub y: Tensor<F>,
    pub instances: Vec<Instance<F>>,
}

impl<F: Real> Sample<F> {
    pub fn side(&self) -> usize {
        self.image.dim(1)
    }

    pub fn co_salient_boxes(&self) -> Vec<BBox<F>> {
        self.instances
            .iter()
            .filter(|i| i.co_salient)
            .map(|i| i.bbox)
            .collect()
    }

    pub fn distractor_boxes(&self) -> Vec<BBox<F>> {
        self.instances
            .iter()
            .filter(|i| !i.co_salient)
            .map(|i| i.bbox)
            .collect()
    }

    pub fn num_co_salient(&self) -> usize {
        self.instances.iter().filter(|i| i.co_salient).count()
    }

    /// Checks every structural invariant; returns the violated rule by name.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str, detail: String| {
            Err(CosalError::Dataset(format!(
                "sample {}: invariant '{rule}' violated: {detail}",
                self.id
            )))
        };
        if self.image.rank() != 3 || self.image.dim(0) != 3 || self.image.dim(1) != self.image.dim(2)
        {
            return fail("image-shape", format!("{:?}", self.image.shape()));
        }
        let s = self.side();
        if self.y.shape() != [s, s] {
            return fail("mask-shape", format!("{:?}", self.y.shape()));
        }
        if !self
            .image
            .data()
            .iter()
            .all(|v| *v >= F::zero() && *v <= F::one())
        {
            return fail("image-range", "pixel outside [0,1]".into());
        }
        if !self
            .y
            .data()
            .iter()
            .all(|v| *v == F::zero() || *v == F::one())
        {
            return fail("mask-binary", "Y has a non-binary value".into());
        }
        if self.num_co_salient() < 2 {
            return fail(
                "co-salient-count",
                format!("{} < 2", self.num_co_salient()),
            );
        }
        let tol = real::<F>(1e-6);
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.mask.height() != s || inst.mask.width() != s {
                return fail(
                    "instance-mask-shape",
                    format!(
                        "instance {k}: {}x{}",
                        inst.mask.height(),
                        inst.mask.width()
                    ),
                );
            }
            if inst.mask.is_empty() {
                return fail("instance-nonempty", format!("instance {k}"));
            }
            if !inst.bbox.is_valid() {
                return fail("box-valid", format!("instance {k}: {:?}", inst.bbox));
            }
            let (x1, y1, x2, y2) = inst.bbox.corners();
            for i in 0..s {
                for j in 0..s {
                    if inst.mask.get(i, j) {
                        let (jx, iy) = (real::<F>(j as f64), real::<F>(i as f64));
                        let inside = jx >= x1 - tol
                            && jx + F::one() <= x2 + tol
                            && iy >= y1 - tol
                            && iy + F::one() <= y2 + tol;
                        if !inside {
                            return fail(
                                "mask-inside-box",
                                format!("instance {k}: pixel ({i},{j}) outside {:?}", inst.bbox),
                            );
                        }
                    }
                }
            }
        }
        let mut union = BinaryMask::new(s, s);
        for inst in self.instances.iter().filter(|i| i.co_salient) {
            inst.mask.or_into(&mut union);
        }
        for i in 0..s {
            for j in 0..s {
                let expect = if union.get(i, j) { F::one() } else { F::zero() };
                if self.y.at2(i, j) != expect {
                    return fail("y-is-union", format!("pixel ({i},{j})"));
                }
            }
        }
        Ok(())
    }

    /// Rebuilds `Y` from the co-salient instance masks.
    pub fn derive_y(&mut self) {
        let s = self.side();
        let mut union = BinaryMask::new(s, s);
        for inst in self.instances.iter().filter(|i| i.co_salient) {
            inst.mask.or_into(&mut union);
        }
        self.y = union.to_tensor();
    }
}
