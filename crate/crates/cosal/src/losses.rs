//! Training losses: pixel-wise decoder BCE, RPN confidence + localization,
//! the weighted region-embedding triplet loss, and their weighted total.
//!
//! Every loss has a hand-written gradient helper next to it; the composite
//! finite-difference suite exercises them end to end through the network.

use crate::error::{CosalError, Result};
use crate::geometry::{encode, BBox, MatchAssignment, OffsetVec};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LossConfig<F> {
    /// Decoder term weight in the total loss.
    pub alpha: F,
    /// RPN term weight in the total loss.
    pub beta: F,
    /// Region-embedding term weight in the total loss.
    pub gamma: F,
    /// Localization weight inside the RPN loss (distinct from `alpha`).
    pub alpha_loc: F,
    /// Triplet margin on unnormalized embeddings.
    pub margin: F,
    /// Probability clamp for cross-entropies.
    pub bce_epsilon: F,
}

impl<F: Real> Default for LossConfig<F> {
    fn default() -> Self {
        LossConfig {
            alpha: F::one(),
            beta: F::one(),
            gamma: F::one(),
            alpha_loc: F::one(),
            margin: F::one(),
            bce_epsilon: real(1e-7),
        }
    }
}

impl<F: Real> LossConfig<F> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= F::zero()
            && self.beta >= F::zero()
            && self.gamma >= F::zero()
            && self.alpha_loc >= F::zero()
            && self.margin > F::zero()
            && self.bce_epsilon > F::zero();
        if ok {
            Ok(())
        } else {
            Err(CosalError::InvalidConfig(
                "loss weights must be >= 0, margin and epsilon > 0".into(),
            ))
        }
    }
}

fn clamp<F: Real>(p: F, eps: F) -> F {
    p.max(eps).min(F::one() - eps)
}

/// Mean binary cross-entropy of a probability map against a binary mask,
/// with probabilities clamped to `[eps, 1-eps]`.
pub fn bce_loss<F: Real>(p: &Tensor<F>, y: &Tensor<F>, eps: F) -> Result<F> {
    if !p.same_shape(y) {
        return Err(CosalError::shape_mismatch("bce_loss", p.shape(), y.shape()));
    }
    if p.is_empty() {
        return Err(CosalError::InvalidArgument("bce_loss: empty map".into()));
    }
    let mut acc = F::zero();
    for (pv, yv) in p.data().iter().zip(y.data()) {
        let c = clamp(*pv, eps);
        acc = acc + *yv * c.ln() + (F::one() - *yv) * (F::one() - c).ln();
    }
    Ok(-acc / real::<F>(p.len() as f64))
}

/// Gradient of `bce_loss` taken with respect to the *pre-sigmoid logits*
/// whose sigmoid is `p`: the numerically stable `(p - y) / N`.
pub fn bce_grad_wrt_logits<F: Real>(p: &Tensor<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
    if !p.same_shape(y) {
        return Err(CosalError::shape_mismatch("bce_loss", p.shape(), y.shape()));
    }
    let inv_n = F::one() / real::<F>(p.len() as f64);
    let mut g = Tensor::zeros(p.shape());
    for ((gv, pv), yv) in g.data_mut().iter_mut().zip(p.data()).zip(y.data()) {
        *gv = (*pv - *yv) * inv_n;
    }
    Ok(g)
}

pub fn smooth_l1<F: Real>(x: F) -> F {
    let half = real::<F>(0.5);
    if x.abs() < F::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Derivative of `smooth_l1`; the two branches agree (+-1) at `|x| = 1`.
pub fn smooth_l1_grad<F: Real>(x: F) -> F {
    if x.abs() < F::one() {
        x
    } else if x > F::zero() {
        F::one()
    } else {
        -F::one()
    }
}

/// The three reported parts of the RPN loss. `conf` and `loc` are raw sums
/// over the counted anchors; `total` carries the `1/N` normalization with
/// `N` = positive (matched) anchor count.
#[derive(Clone, Copy, Debug)]
pub struct RpnLossParts<F> {
    pub total: F,
    pub conf: F,
    pub loc: F,
}

fn rpn_check<F: Real>(
    assignment: &MatchAssignment,
    confidences: &[F],
    offset_preds: &[OffsetVec<F>],
    anchors: &[BBox<F>],
) -> Result<usize> {
    let n = assignment.len();
    if confidences.len() != n || offset_preds.len() != n || anchors.len() != n {
        return Err(CosalError::InvalidArgument(format!(
            "rpn_loss: assignment covers {n} anchors but got {} confidences, {} offsets, {} anchors",
            confidences.len(),
            offset_preds.len(),
            anchors.len()
        )));
    }
    let pos = assignment.num_positive();
    if pos == 0 {
        return Err(CosalError::InvalidArgument(
            "rpn_loss: no positive anchors".into(),
        ));
    }
    Ok(pos)
}

/// Confidence BCE over positive and negative anchors (ignored anchors are
/// skipped) plus smooth-L1 over the four offset components of each positive
/// anchor against the encoded ground truth.
pub fn rpn_loss<F: Real>(
    assignment: &MatchAssignment,
    confidences: &[F],
    offset_preds: &[OffsetVec<F>],
    gt_boxes: &[BBox<F>],
    anchors: &[BBox<F>],
    config: &LossConfig<F>,
) -> Result<RpnLossParts<F>> {
    let pos = rpn_check(assignment, confidences, offset_preds, anchors)?;
    let eps = config.bce_epsilon;
    let mut conf = F::zero();
    for (a, c) in confidences.iter().enumerate() {
        let t = match assignment.labels[a] {
            crate::geometry::AnchorLabel::Positive => F::one(),
            crate::geometry::AnchorLabel::Negative => F::zero(),
            crate::geometry::AnchorLabel::Ignore => continue,
        };
        let cc = clamp(*c, eps);
        conf = conf - (t * cc.ln() + (F::one() - t) * (F::one() - cc).ln());
    }
    let mut loc = F::zero();
    for (a, g) in assignment.positives() {
        let target = encode(&gt_boxes[g], &anchors[a]);
        let p = &offset_preds[a];
        loc = loc
            + smooth_l1(p.tx - target.tx)
            + smooth_l1(p.ty - target.ty)
            + smooth_l1(p.tw - target.tw)
            + smooth_l1(p.th - target.th);
    }
    let n = real::<F>(pos as f64);
    Ok(RpnLossParts {
        total: (conf + config.alpha_loc * loc) / n,
        conf,
        loc,
    })
}

/// Gradients of [`rpn_loss`]'s `total` with respect to the pre-sigmoid
/// confidence logits and the predicted offsets. Entries for ignored anchors
/// are zero.
pub fn rpn_grads<F: Real>(
    assignment: &MatchAssignment,
    confidences: &[F],
    offset_preds: &[OffsetVec<F>],
    gt_boxes: &[BBox<F>],
    anchors: &[BBox<F>],
    config: &LossConfig<F>,
) -> Result<(Vec<F>, Vec<OffsetVec<F>>)> {
    let pos = rpn_check(assignment, confidences, offset_preds, anchors)?;
    let inv_n = F::one() / real::<F>(pos as f64);
    let zero = OffsetVec {
        tx: F::zero(),
        ty: F::zero(),
        tw: F::zero(),
        th: F::zero(),
    };
    let mut conf_logit_grads = vec![F::zero(); confidences.len()];
    let mut offset_grads = vec![zero; offset_preds.len()];
    for (a, c) in confidences.iter().enumerate() {
        let t = match assignment.labels[a] {
            crate::geometry::AnchorLabel::Positive => F::one(),
            crate::geometry::AnchorLabel::Negative => F::zero(),
            crate::geometry::AnchorLabel::Ignore => continue,
        };
        conf_logit_grads[a] = (*c - t) * inv_n;
    }
    let scale = config.alpha_loc * inv_n;
    for (a, g) in assignment.positives() {
        let target = encode(&gt_boxes[g], &anchors[a]);
        let p = &offset_preds[a];
        offset_grads[a] = OffsetVec {
            tx: scale * smooth_l1_grad(p.tx - target.tx),
            ty: scale * smooth_l1_grad(p.ty - target.ty),
            tw: scale * smooth_l1_grad(p.tw - target.tw),
            th: scale * smooth_l1_grad(p.th - target.th),
        };
    }
    Ok((conf_logit_grads, offset_grads))
}

fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .fold(F::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y))
}

/// Margin hinge on squared Euclidean distances:
/// `max(d(a,p) - d(a,n) + margin, 0)`.
pub fn triplet_loss<F: Real>(va: &[F], vp: &[F], vn: &[F], margin: F) -> Result<F> {
    if va.len() != vp.len() || va.len() != vn.len() {
        return Err(CosalError::InvalidArgument(format!(
            "triplet_loss: embedding lengths differ ({}, {}, {})",
            va.len(),
            vp.len(),
            vn.len()
        )));
    }
    Ok((sq_dist(va, vp) - sq_dist(va, vn) + margin).max(F::zero()))
}

/// Gradients of [`triplet_loss`] for all three embeddings. The hinge
/// subgradient at the boundary is zero (the inactive branch).
pub fn triplet_grads<F: Real>(
    va: &[F],
    vp: &[F],
    vn: &[F],
    margin: F,
) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    let active = triplet_loss(va, vp, vn, margin)? > F::zero();
    let k = va.len();
    let (mut ga, mut gp, mut gn) = (vec![F::zero(); k], vec![F::zero(); k], vec![F::zero(); k]);
    if active {
        let two = real::<F>(2.0);
        for i in 0..k {
            ga[i] = two * (vn[i] - vp[i]);
            gp[i] = two * (vp[i] - va[i]);
            gn[i] = two * (va[i] - vn[i]);
        }
    }
    Ok((ga, gp, gn))
}

/// Weighted mean of per-triplet losses: `sum(beta_i * L_i) / max(1, count)`.
/// `triples` holds (anchor, positive, negative) embedding slices.
pub fn rfm_loss<F: Real>(
    betas: &[F],
    triples: &[(&[F], &[F], &[F])],
    margin: F,
) -> Result<F> {
    if betas.len() != triples.len() {
        return Err(CosalError::InvalidArgument(format!(
            "rfm_loss: {} weights for {} triples",
            betas.len(),
            triples.len()
        )));
    }
    let mut acc = F::zero();
    for (b, (va, vp, vn)) in betas.iter().zip(triples) {
        acc = acc + *b * triplet_loss(va, vp, vn, margin)?;
    }
    Ok(acc / real::<F>(betas.len().max(1) as f64))
}

/// Per-triple gradients matching [`rfm_loss`]'s normalization: each triple's
/// embedding gradients scaled by `beta_i / max(1, count)`.
pub fn rfm_grads<F: Real>(
    betas: &[F],
    triples: &[(&[F], &[F], &[F])],
    margin: F,
) -> Result<Vec<(Vec<F>, Vec<F>, Vec<F>)>> {
    if betas.len() != triples.len() {
        return Err(CosalError::InvalidArgument(format!(
            "rfm_loss: {} weights for {} triples",
            betas.len(),
            triples.len()
        )));
    }
    let inv = F::one() / real::<F>(betas.len().max(1) as f64);
    let mut out = Vec::with_capacity(triples.len());
    for (b, (va, vp, vn)) in betas.iter().zip(triples) {
        let (mut ga, mut gp, mut gn) = triplet_grads(va, vp, vn, margin)?;
        let s = *b * inv;
        for v in ga.iter_mut().chain(gp.iter_mut()).chain(gn.iter_mut()) {
            *v = *v * s;
        }
        out.push((ga, gp, gn));
    }
    Ok(out)
}

/// Weighted sum of the three component losses.
pub fn total_loss<F: Real>(decoder: F, rpn: F, rfm: F, config: &LossConfig<F>) -> F {
    config.alpha * decoder + config.beta * rpn + config.gamma * rfm
}
