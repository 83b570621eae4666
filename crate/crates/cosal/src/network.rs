//! The assembled model: encoder-decoder backbone with skip connections, the
//! Feature-Sensitive block, the RPN and RFM training branches, the training
//! step, and the evaluation-phase predictor.
//!
//! Evaluation runs the backbone only; the two branches exist purely to
//! supervise the sensitive features during training.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::diffcore::{
    concat_backward, concat_forward, conv1x1_backward, conv1x1_forward, conv3x3_backward,
    conv3x3_forward, fc_backward, fc_forward, load_checkpoint, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, save_checkpoint, sgd_step, sigmoid_forward,
    upsample2_backward, upsample2_forward, LayerParams,
};
use crate::error::{CosalError, Result};
use crate::geometry::{
    encode, generate_anchors, match_anchors, AnchorGrid, AnchorLabel, BBox, MatchAssignment,
    OffsetVec,
};
use crate::losses::{
    bce_grad_wrt_logits, bce_loss, rfm_grads, rfm_loss, rpn_grads, rpn_loss, smooth_l1,
    total_loss, LossConfig,
};
use crate::roialign::{roi_align, roi_align_backward, RoiSpec};
use crate::sampling::{offline_triplets, online_triplets, RpnView, SamplingConfig, Triplet};
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NetworkConfig<F> {
    /// Input images are `side x side` RGB.
    pub side: usize,
    /// One conv per encoder level; each level halves the spatial extent.
    pub encoder_channels: Vec<usize>,
    /// Channel width of the three sensitive-block convs (and of R).
    pub sensitive_channels: usize,
    pub embedding_len: usize,
    pub rfm_hidden: usize,
    /// Anchor side lengths as fractions of the image side.
    pub anchor_scales: [F; 3],
    /// Anchor height-over-width ratios.
    pub anchor_ratios: [F; 3],
    pub roi: RoiSpec,
}

impl<F: Real> Default for NetworkConfig<F> {
    fn default() -> Self {
        NetworkConfig {
            side: 64,
            encoder_channels: vec![8, 16, 32],
            sensitive_channels: 32,
            embedding_len: 32,
            rfm_hidden: 64,
            anchor_scales: [real(0.25), real(0.5), real(1.0)],
            anchor_ratios: [real(1.0), real(2.0), real(0.5)],
            roi: RoiSpec::default(),
        }
    }
}

impl<F: Real> NetworkConfig<F> {
    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial side of H and R: the input side after one halving per level.
    pub fn feature_side(&self) -> usize {
        self.side >> self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CosalError::InvalidConfig(m));
        let l = self.levels();
        if l == 0 {
            return bad("network: at least one encoder level required".into());
        }
        if self.side == 0 || self.side % (1 << l) != 0 {
            return bad(format!(
                "network: side {} must be a positive multiple of 2^levels = {}",
                self.side,
                1 << l
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) || self.sensitive_channels == 0 {
            return bad("network: channel widths must be positive".into());
        }
        if self.embedding_len < 2 {
            return bad(format!(
                "network: embedding length {} must be >= 2",
                self.embedding_len
            ));
        }
        if self.rfm_hidden == 0 {
            return bad("network: rfm hidden width must be positive".into());
        }
        let finite_pos = |v: &F| v.is_finite() && *v > F::zero();
        if !self.anchor_scales.iter().all(finite_pos) || !self.anchor_ratios.iter().all(finite_pos)
        {
            return bad("network: anchor scales and ratios must be positive".into());
        }
        Ok(())
    }

    /// Channels produced by the decoder conv at level `l`.
    fn dec_out(&self, l: usize) -> usize {
        self.encoder_channels[l.saturating_sub(1)]
    }

    /// Channels entering the decoder conv at level `l` (upsampled features
    /// concatenated with the level's skip).
    fn dec_in(&self, l: usize) -> usize {
        let up = if l + 1 == self.levels() {
            self.sensitive_channels
        } else {
            self.dec_out(l + 1)
        };
        up + self.encoder_channels[l]
    }
}

/// Fixed-length region descriptor produced by the RFM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<F> {
    pub values: Vec<F>,
}

/// Everything forward_backbone computed, kept for the backward pass.
/// Decoder vectors run in execution order (deepest level first).
#[derive(Clone, Debug)]
pub struct BackboneTrace<F> {
    r: Tensor<F>,
    p: Tensor<F>,
    skips: Vec<Tensor<F>>,
    enc_in: Vec<Tensor<F>>,
    enc_pre: Vec<Tensor<F>>,
    fs_in: Vec<Tensor<F>>,
    fs_pre: Vec<Tensor<F>>,
    dec_up_in: Vec<Tensor<F>>,
    dec_up_out: Vec<Tensor<F>>,
    dec_cat: Vec<Tensor<F>>,
    dec_pre: Vec<Tensor<F>>,
    out_in: Tensor<F>,
}

impl<F: Real> BackboneTrace<F> {
    /// Deepest pooled encoder activation.
    pub fn h(&self) -> &Tensor<F> {
        &self.fs_in[0]
    }

    /// Sensitive-block output.
    pub fn r(&self) -> &Tensor<F> {
        &self.r
    }

    /// Saliency map, `[side, side]`, values in (0, 1).
    pub fn p(&self) -> &Tensor<F> {
        &self.p
    }

    /// Pre-pool encoder activations, one per level.
    pub fn skips(&self) -> &[Tensor<F>] {
        &self.skips
    }
}

/// RPN head activations plus the flattened per-anchor outputs.
#[derive(Clone, Debug)]
pub struct RpnTrace<F> {
    /// Sigmoid confidences in anchor order.
    pub confidences: Vec<F>,
    /// Predicted offsets in anchor order.
    pub offsets: Vec<OffsetVec<F>>,
    r_in: Tensor<F>,
    conv_pre: Tensor<F>,
    act: Tensor<F>,
}

/// RFM head activations for one region.
#[derive(Clone, Debug)]
pub struct RfmTrace<F> {
    pub embedding: Embedding<F>,
    box_feature: BBox<F>,
    pooled: Tensor<F>,
    fc1_pre: Tensor<F>,
    act: Tensor<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    Offline,
    Online,
}

#[derive(Clone, Debug)]
pub struct TrainConfig<F> {
    pub loss: LossConfig<F>,
    pub sampling: SamplingConfig<F>,
    pub mode: SamplingMode,
    pub learning_rate: F,
    pub weight_decay: F,
    /// Anchor-matching thresholds for RPN supervision.
    pub match_pos_iou: F,
    pub match_neg_iou: F,
}

impl<F: Real> Default for TrainConfig<F> {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            sampling: SamplingConfig::default(),
            mode: SamplingMode::Offline,
            learning_rate: real(1e-5),
            weight_decay: real(1e-4),
            match_pos_iou: real(0.5),
            match_neg_iou: real(0.3),
        }
    }
}

/// Component losses of one step. `total` always equals
/// `alpha * decoder + beta * rpn + gamma * rfm` exactly; a component that was
/// skipped (zero weight) reports 0. `triplet_count` is 0 when no valid
/// triplet existed, in which case the rfm term is 0 for the step.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub decoder: F,
    pub rpn: F,
    pub rfm: F,
    pub triplet_count: usize,
}

#[derive(Clone, Debug)]
pub struct Network<F> {
    config: NetworkConfig<F>,
    anchors: AnchorGrid<F>,
    enc: Vec<LayerParams<F>>,
    fs: Vec<LayerParams<F>>,
    dec: Vec<LayerParams<F>>,
    out: LayerParams<F>,
    rpn_conv: LayerParams<F>,
    rpn_conf: LayerParams<F>,
    rpn_loc: LayerParams<F>,
    rfm_fc1: LayerParams<F>,
    rfm_fc2: LayerParams<F>,
}

fn add_into<F: Real>(acc: &mut Tensor<F>, rhs: &Tensor<F>) {
    debug_assert!(acc.same_shape(rhs));
    for (a, b) in acc.data_mut().iter_mut().zip(rhs.data()) {
        *a = *a + *b;
    }
}

/// Collapses the boxes referenced by a triplet batch to their distinct
/// values (first-seen order) and rewrites each triplet as indices into that
/// pool, so every region is pooled through the RFM exactly once.
fn dedupe_triplet_boxes<F: Real>(
    triplets: &[Triplet<F>],
) -> (Vec<BBox<F>>, Vec<(usize, usize, usize)>) {
    let mut unique: Vec<BBox<F>> = Vec::new();
    let index_of = |b: &BBox<F>, unique: &mut Vec<BBox<F>>| match unique
        .iter()
        .position(|u| u == b)
    {
        Some(i) => i,
        None => {
            unique.push(*b);
            unique.len() - 1
        }
    };
    let members = triplets
        .iter()
        .map(|t| {
            (
                index_of(&t.anchor, &mut unique),
                index_of(&t.positive, &mut unique),
                index_of(&t.negative, &mut unique),
            )
        })
        .collect();
    (unique, members)
}

impl<F: Real> Network<F> {
    pub fn new<R: Rng>(config: NetworkConfig<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let l = config.levels();
        let fside = config.feature_side();
        let sens = config.sensitive_channels;

        let mut enc = Vec::with_capacity(l);
        let mut in_c = 3;
        for &out_c in &config.encoder_channels {
            enc.push(LayerParams::conv3x3(in_c, out_c, rng));
            in_c = out_c;
        }
        let mut fs = Vec::with_capacity(3);
        let mut c = *config.encoder_channels.last().expect("validated");
        for _ in 0..3 {
            fs.push(LayerParams::conv3x3(c, sens, rng));
            c = sens;
        }
        let mut dec = Vec::with_capacity(l);
        for lv in 0..l {
            dec.push(LayerParams::conv3x3(config.dec_in(lv), config.dec_out(lv), rng));
        }
        let out = LayerParams::conv1x1(config.dec_out(0), 1, rng);
        let rpn_conv = LayerParams::conv3x3(sens, sens, rng);
        let rpn_conf = LayerParams::conv1x1(sens, 9, rng);
        let rpn_loc = LayerParams::conv1x1(sens, 36, rng);
        let roi_len = sens * config.roi.bins.0 * config.roi.bins.1;
        let rfm_fc1 = LayerParams::fully_connected(roi_len, config.rfm_hidden, rng);
        let rfm_fc2 = LayerParams::fully_connected(config.rfm_hidden, config.embedding_len, rng);

        let side_f = real::<F>(config.side as f64);
        let scales = config.anchor_scales.map(|s| s * side_f);
        let anchors = generate_anchors(
            (config.side, config.side),
            (fside, fside),
            scales,
            config.anchor_ratios,
        )?;

        Ok(Network {
            config,
            anchors,
            enc,
            fs,
            dec,
            out,
            rpn_conv,
            rpn_conf,
            rpn_loc,
            rfm_fc1,
            rfm_fc2,
        })
    }

    pub fn config(&self) -> &NetworkConfig<F> {
        &self.config
    }

    pub fn anchor_grid(&self) -> &AnchorGrid<F> {
        &self.anchors
    }

    /// All parameters with their stable names, in enumeration order.
    pub fn params(&self) -> Vec<(String, &LayerParams<F>)> {
        let mut v: Vec<(String, &LayerParams<F>)> = Vec::new();
        for (i, p) in self.enc.iter().enumerate() {
            v.push((format!("enc{i}"), p));
        }
        for (i, p) in self.fs.iter().enumerate() {
            v.push((format!("fs{i}"), p));
        }
        for (i, p) in self.dec.iter().enumerate() {
            v.push((format!("dec{i}"), p));
        }
        v.push(("out".into(), &self.out));
        v.push(("rpn.conv".into(), &self.rpn_conv));
        v.push(("rpn.conf".into(), &self.rpn_conf));
        v.push(("rpn.loc".into(), &self.rpn_loc));
        v.push(("rfm.fc1".into(), &self.rfm_fc1));
        v.push(("rfm.fc2".into(), &self.rfm_fc2));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut LayerParams<F>)> {
        let mut v: Vec<(String, &mut LayerParams<F>)> = Vec::new();
        for (i, p) in self.enc.iter_mut().enumerate() {
            v.push((format!("enc{i}"), p));
        }
        for (i, p) in self.fs.iter_mut().enumerate() {
            v.push((format!("fs{i}"), p));
        }
        for (i, p) in self.dec.iter_mut().enumerate() {
            v.push((format!("dec{i}"), p));
        }
        v.push(("out".into(), &mut self.out));
        v.push(("rpn.conv".into(), &mut self.rpn_conv));
        v.push(("rpn.conf".into(), &mut self.rpn_conf));
        v.push(("rpn.loc".into(), &mut self.rpn_loc));
        v.push(("rfm.fc1".into(), &mut self.rfm_fc1));
        v.push(("rfm.fc2".into(), &mut self.rfm_fc2));
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.param_count()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grads();
        }
    }

    pub fn forward_backbone(&self, image: &Tensor<F>) -> Result<BackboneTrace<F>> {
        let s = self.config.side;
        if image.shape() != [3, s, s] {
            return Err(CosalError::shape_mismatch(
                "backbone",
                &format!("[3, {s}, {s}]"),
                image.shape(),
            ));
        }
        let l = self.config.levels();

        let mut x = image.clone();
        let mut enc_in = Vec::with_capacity(l);
        let mut enc_pre = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l);
        for lv in 0..l {
            let z = conv3x3_forward(&self.enc[lv], &x)?;
            let a = relu_forward(&z);
            let pooled = maxpool2_forward(&a)?;
            enc_in.push(std::mem::replace(&mut x, pooled));
            enc_pre.push(z);
            skips.push(a);
        }

        let mut fs_in = Vec::with_capacity(3);
        let mut fs_pre = Vec::with_capacity(3);
        for k in 0..3 {
            let z = conv3x3_forward(&self.fs[k], &x)?;
            let a = relu_forward(&z);
            fs_in.push(std::mem::replace(&mut x, a));
            fs_pre.push(z);
        }
        let r = x.clone();

        let mut dec_up_in = Vec::with_capacity(l);
        let mut dec_up_out = Vec::with_capacity(l);
        let mut dec_cat = Vec::with_capacity(l);
        let mut dec_pre = Vec::with_capacity(l);
        for lv in (0..l).rev() {
            let up = upsample2_forward(&x)?;
            let cat = concat_forward(&up, &skips[lv])?;
            let z = conv3x3_forward(&self.dec[lv], &cat)?;
            let a = relu_forward(&z);
            dec_up_in.push(std::mem::replace(&mut x, a));
            dec_up_out.push(up);
            dec_cat.push(cat);
            dec_pre.push(z);
        }

        let out_in = x;
        let logits = conv1x1_forward(&self.out, &out_in)?;
        let p = sigmoid_forward(&logits).reshaped(&[s, s])?;

        Ok(BackboneTrace {
            r,
            p,
            skips,
            enc_in,
            enc_pre,
            fs_in,
            fs_pre,
            dec_up_in,
            dec_up_out,
            dec_cat,
            dec_pre,
            out_in,
        })
    }

    /// Saliency prediction. Runs the backbone only; RPN and RFM parameters
    /// are never read on this path.
    pub fn predict(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self.forward_backbone(image)?.p)
    }

    /// Accumulates gradients from the saliency-map logits (shape `[1, S, S]`)
    /// and, optionally, an extra gradient flowing into R from the branches.
    pub fn backbone_backward(
        &mut self,
        trace: &BackboneTrace<F>,
        g_logits: &Tensor<F>,
        g_r_extra: Option<&Tensor<F>>,
    ) -> Result<()> {
        let l = self.config.levels();
        let mut g = conv1x1_backward(&mut self.out, &trace.out_in, g_logits)?;

        let mut g_skips: Vec<Option<Tensor<F>>> = vec![None; l];
        for k in (0..l).rev() {
            let lv = l - 1 - k;
            g = relu_backward(&trace.dec_pre[k], &g)?;
            g = conv3x3_backward(&mut self.dec[lv], &trace.dec_cat[k], &g)?;
            let (g_up, g_skip) = concat_backward(&trace.dec_up_out[k], &trace.skips[lv], &g)?;
            g_skips[lv] = Some(g_skip);
            g = upsample2_backward(&trace.dec_up_in[k], &g_up)?;
        }

        if let Some(extra) = g_r_extra {
            if !g.same_shape(extra) {
                return Err(CosalError::shape_mismatch(
                    "backbone",
                    g.shape(),
                    extra.shape(),
                ));
            }
            add_into(&mut g, extra);
        }

        for k in (0..3).rev() {
            g = relu_backward(&trace.fs_pre[k], &g)?;
            g = conv3x3_backward(&mut self.fs[k], &trace.fs_in[k], &g)?;
        }

        for lv in (0..l).rev() {
            let mut g_act = maxpool2_backward(&trace.skips[lv], &g)?;
            if let Some(gs) = &g_skips[lv] {
                add_into(&mut g_act, gs);
            }
            let g_pre = relu_backward(&trace.enc_pre[lv], &g_act)?;
            g = conv3x3_backward(&mut self.enc[lv], &trace.enc_in[lv], &g_pre)?;
        }
        Ok(())
    }

    pub fn forward_rpn(&self, r: &Tensor<F>) -> Result<RpnTrace<F>> {
        let z = conv3x3_forward(&self.rpn_conv, r)?;
        let act = relu_forward(&z);
        let conf_logits = conv1x1_forward(&self.rpn_conf, &act)?;
        let loc = conv1x1_forward(&self.rpn_loc, &act)?;
        let conf = sigmoid_forward(&conf_logits);

        let (hf, wf) = (conf.dim(1), conf.dim(2));
        let n = 9 * hf * wf;
        let mut confidences = vec![F::zero(); n];
        let zero = OffsetVec {
            tx: F::zero(),
            ty: F::zero(),
            tw: F::zero(),
            th: F::zero(),
        };
        let mut offsets = vec![zero; n];
        for i in 0..hf {
            for j in 0..wf {
                for k in 0..9 {
                    let a = (i * wf + j) * 9 + k;
                    confidences[a] = conf.at3(k, i, j);
                    offsets[a] = OffsetVec {
                        tx: loc.at3(4 * k, i, j),
                        ty: loc.at3(4 * k + 1, i, j),
                        tw: loc.at3(4 * k + 2, i, j),
                        th: loc.at3(4 * k + 3, i, j),
                    };
                }
            }
        }
        Ok(RpnTrace {
            confidences,
            offsets,
            r_in: r.clone(),
            conv_pre: z,
            act,
        })
    }

    /// Accumulates RPN head gradients and returns the gradient with respect
    /// to R. `g_conf_logits` are gradients at the pre-sigmoid confidences;
    /// both inputs are in anchor order and get scaled by `scale`.
    pub fn rpn_backward(
        &mut self,
        trace: &RpnTrace<F>,
        g_conf_logits: &[F],
        g_offsets: &[OffsetVec<F>],
        scale: F,
    ) -> Result<Tensor<F>> {
        let (hf, wf) = (trace.act.dim(1), trace.act.dim(2));
        let n = 9 * hf * wf;
        if g_conf_logits.len() != n || g_offsets.len() != n {
            return Err(CosalError::InvalidArgument(format!(
                "rpn backward: expected {n} per-anchor gradients, got {} and {}",
                g_conf_logits.len(),
                g_offsets.len()
            )));
        }
        let mut gc = Tensor::zeros(&[9, hf, wf]);
        let mut gl = Tensor::zeros(&[36, hf, wf]);
        for i in 0..hf {
            for j in 0..wf {
                for k in 0..9 {
                    let a = (i * wf + j) * 9 + k;
                    gc.set3(k, i, j, g_conf_logits[a] * scale);
                    let o = &g_offsets[a];
                    gl.set3(4 * k, i, j, o.tx * scale);
                    gl.set3(4 * k + 1, i, j, o.ty * scale);
                    gl.set3(4 * k + 2, i, j, o.tw * scale);
                    gl.set3(4 * k + 3, i, j, o.th * scale);
                }
            }
        }
        let mut g_act = conv1x1_backward(&mut self.rpn_conf, &trace.act, &gc)?;
        let g_act_loc = conv1x1_backward(&mut self.rpn_loc, &trace.act, &gl)?;
        add_into(&mut g_act, &g_act_loc);
        let g_pre = relu_backward(&trace.conv_pre, &g_act)?;
        conv3x3_backward(&mut self.rpn_conv, &trace.r_in, &g_pre)
    }

    /// Embeds one region: the box (image coordinates) is rescaled to feature
    /// coordinates, pooled with RoIAlign, and passed through the FC stack.
    pub fn forward_rfm(&self, r: &Tensor<F>, bx: &BBox<F>) -> Result<RfmTrace<F>> {
        if !bx.is_valid() {
            return Err(CosalError::InvalidArgument(format!(
                "rfm: degenerate box {bx:?}"
            )));
        }
        let side = real::<F>(self.config.side as f64);
        let fh = real::<F>(r.dim(1) as f64);
        let fw = real::<F>(r.dim(2) as f64);
        let box_feature = bx.scaled(fw / side, fh / side);
        let pooled = roi_align(r, &box_feature, &self.config.roi)?;
        let fc1_pre = fc_forward(&self.rfm_fc1, &pooled)?;
        let act = relu_forward(&fc1_pre);
        let emb = fc_forward(&self.rfm_fc2, &act)?;
        Ok(RfmTrace {
            embedding: Embedding {
                values: emb.data().to_vec(),
            },
            box_feature,
            pooled,
            fc1_pre,
            act,
        })
    }

    /// Accumulates RFM head gradients for one region and returns the gradient
    /// with respect to R. `g_embedding` is scaled by `scale`.
    pub fn rfm_backward(
        &mut self,
        trace: &RfmTrace<F>,
        g_embedding: &[F],
        scale: F,
    ) -> Result<Tensor<F>> {
        let gy = Tensor::from_vec(
            &[self.config.embedding_len],
            g_embedding.iter().map(|&v| v * scale).collect(),
        )?;
        let g_act = fc_backward(&mut self.rfm_fc2, &trace.act, &gy)?;
        let g_pre = relu_backward(&trace.fc1_pre, &g_act)?;
        let g_pooled = fc_backward(&mut self.rfm_fc1, &trace.pooled, &g_pre)?;
        let sens = self.config.sensitive_channels;
        let fside = self.config.feature_side();
        roi_align_backward(
            &[sens, fside, fside],
            &trace.box_feature,
            &self.config.roi,
            &g_pooled,
        )
    }

    fn match_rpn(
        &self,
        gts: &[BBox<F>],
        cfg: &TrainConfig<F>,
    ) -> Result<MatchAssignment> {
        match_anchors(
            &self.anchors.anchors,
            gts,
            cfg.match_pos_iou,
            cfg.match_neg_iou,
        )
    }

    /// Per-anchor contribution to the RPN loss, used to rank proposals for
    /// online mining. Ignored anchors get -1 (excluded by convention).
    fn per_anchor_losses(
        &self,
        assignment: &MatchAssignment,
        rpn: &RpnTrace<F>,
        gts: &[BBox<F>],
        loss: &LossConfig<F>,
    ) -> Vec<F> {
        let eps = loss.bce_epsilon;
        let one = F::one();
        (0..assignment.len())
            .map(|a| match assignment.labels[a] {
                AnchorLabel::Ignore => -one,
                AnchorLabel::Negative => {
                    let c = rpn.confidences[a].max(eps).min(one - eps);
                    -(one - c).ln()
                }
                AnchorLabel::Positive => {
                    let c = rpn.confidences[a].max(eps).min(one - eps);
                    let g = assignment.gt_of(a).expect("positive");
                    let t = encode(&gts[g], &self.anchors.anchors[a]);
                    let p = &rpn.offsets[a];
                    let loc = smooth_l1(p.tx - t.tx)
                        + smooth_l1(p.ty - t.ty)
                        + smooth_l1(p.tw - t.tw)
                        + smooth_l1(p.th - t.th);
                    -c.ln() + loss.alpha_loc * loc
                }
            })
            .collect()
    }

    fn check_sample(&self, sample: &Sample<F>) -> Result<()> {
        if sample.side() != self.config.side {
            return Err(CosalError::InvalidArgument(format!(
                "sample {} side {} does not match network side {}",
                sample.id,
                sample.side(),
                self.config.side
            )));
        }
        Ok(())
    }

    /// Draws this step's triplets according to the configured strategy.
    pub fn draw_triplets<R: Rng>(
        &self,
        sample: &Sample<F>,
        cfg: &TrainConfig<F>,
        rng: &mut R,
    ) -> Result<Vec<Triplet<F>>> {
        self.check_sample(sample)?;
        match cfg.mode {
            SamplingMode::Offline => Ok(offline_triplets(sample, &cfg.sampling, rng)?.triplets),
            SamplingMode::Online => {
                let trace = self.forward_backbone(&sample.image)?;
                let rpn = self.forward_rpn(&trace.r)?;
                let gts = sample.co_salient_boxes();
                let assignment = self.match_rpn(&gts, cfg)?;
                let losses = self.per_anchor_losses(&assignment, &rpn, &gts, &cfg.loss);
                online_triplets(
                    sample,
                    RpnView {
                        confidences: &rpn.confidences,
                        offsets: &rpn.offsets,
                    },
                    &self.anchors.anchors,
                    &losses,
                    &cfg.sampling,
                    rng,
                )
            }
        }
    }

    /// Forward pass over all active loss components with a fixed triplet set;
    /// no gradients. The finite-difference oracle for the composite gradient
    /// rests on this being a pure function of the parameters.
    pub fn total_loss_value(
        &self,
        sample: &Sample<F>,
        cfg: &TrainConfig<F>,
        triplets: &[Triplet<F>],
    ) -> Result<F> {
        self.check_sample(sample)?;
        let trace = self.forward_backbone(&sample.image)?;
        let decoder = bce_loss(&trace.p, &sample.y, cfg.loss.bce_epsilon)?;
        let gts = sample.co_salient_boxes();

        let mut rpn_part = F::zero();
        if cfg.loss.beta > F::zero() {
            let rpn = self.forward_rpn(&trace.r)?;
            let assignment = self.match_rpn(&gts, cfg)?;
            rpn_part = rpn_loss(
                &assignment,
                &rpn.confidences,
                &rpn.offsets,
                &gts,
                &self.anchors.anchors,
                &cfg.loss,
            )?
            .total;
        }

        let mut rfm_part = F::zero();
        if cfg.loss.gamma > F::zero() && !triplets.is_empty() {
            let (unique, members) = dedupe_triplet_boxes(triplets);
            let mut embeddings = Vec::with_capacity(unique.len());
            for bx in &unique {
                embeddings.push(self.forward_rfm(&trace.r, bx)?.embedding);
            }
            let betas: Vec<F> = triplets.iter().map(|t| t.weight).collect();
            let triples: Vec<(&[F], &[F], &[F])> = members
                .iter()
                .map(|&(a, p, n)| {
                    (
                        &embeddings[a].values[..],
                        &embeddings[p].values[..],
                        &embeddings[n].values[..],
                    )
                })
                .collect();
            rfm_part = rfm_loss(&betas, &triples, cfg.loss.margin)?;
        }

        Ok(total_loss(decoder, rpn_part, rfm_part, &cfg.loss))
    }

    /// One full forward/backward pass with the given triplets: gradients are
    /// zeroed, recomputed, and left in the parameter accumulators.
    pub fn accumulate_with_triplets(
        &mut self,
        sample: &Sample<F>,
        cfg: &TrainConfig<F>,
        triplets: &[Triplet<F>],
    ) -> Result<LossBreakdown<F>> {
        self.check_sample(sample)?;
        cfg.loss.validate()?;
        self.zero_grads();

        let trace = self.forward_backbone(&sample.image)?;
        let decoder = bce_loss(&trace.p, &sample.y, cfg.loss.bce_epsilon)?;
        let s = self.config.side;
        let g_logits = bce_grad_wrt_logits(&trace.p, &sample.y)?
            .map(|v| v * cfg.loss.alpha)
            .reshaped(&[1, s, s])?;
        let gts = sample.co_salient_boxes();

        let mut g_r: Option<Tensor<F>> = None;
        let mut rpn_part = F::zero();
        if cfg.loss.beta > F::zero() {
            let rpn = self.forward_rpn(&trace.r)?;
            let assignment = self.match_rpn(&gts, cfg)?;
            let parts = rpn_loss(
                &assignment,
                &rpn.confidences,
                &rpn.offsets,
                &gts,
                &self.anchors.anchors,
                &cfg.loss,
            )?;
            rpn_part = parts.total;
            let (gc, go) = rpn_grads(
                &assignment,
                &rpn.confidences,
                &rpn.offsets,
                &gts,
                &self.anchors.anchors,
                &cfg.loss,
            )?;
            g_r = Some(self.rpn_backward(&rpn, &gc, &go, cfg.loss.beta)?);
        }

        let mut rfm_part = F::zero();
        let mut triplet_count = 0;
        if cfg.loss.gamma > F::zero() && !triplets.is_empty() {
            triplet_count = triplets.len();
            // triplets reuse regions heavily; pool each distinct box once
            let (unique, members) = dedupe_triplet_boxes(triplets);
            let mut traces = Vec::with_capacity(unique.len());
            for bx in &unique {
                traces.push(self.forward_rfm(&trace.r, bx)?);
            }
            let betas: Vec<F> = triplets.iter().map(|t| t.weight).collect();
            let triples: Vec<(&[F], &[F], &[F])> = members
                .iter()
                .map(|&(a, p, n)| {
                    (
                        &traces[a].embedding.values[..],
                        &traces[p].embedding.values[..],
                        &traces[n].embedding.values[..],
                    )
                })
                .collect();
            rfm_part = rfm_loss(&betas, &triples, cfg.loss.margin)?;
            let grads = rfm_grads(&betas, &triples, cfg.loss.margin)?;
            drop(triples);
            let emb = self.config.embedding_len;
            let mut g_emb = vec![vec![F::zero(); emb]; unique.len()];
            for ((ga, gp, gn), &(a, p, n)) in grads.iter().zip(&members) {
                for k in 0..emb {
                    g_emb[a][k] = g_emb[a][k] + ga[k];
                    g_emb[p][k] = g_emb[p][k] + gp[k];
                    g_emb[n][k] = g_emb[n][k] + gn[k];
                }
            }
            let mut acc = g_r.take().unwrap_or_else(|| {
                Tensor::zeros(&[
                    self.config.sensitive_channels,
                    self.config.feature_side(),
                    self.config.feature_side(),
                ])
            });
            for (t, g) in traces.iter().zip(&g_emb) {
                add_into(&mut acc, &self.rfm_backward(t, g, cfg.loss.gamma)?);
            }
            g_r = Some(acc);
        }

        self.backbone_backward(&trace, &g_logits, g_r.as_ref())?;

        Ok(LossBreakdown {
            total: total_loss(decoder, rpn_part, rfm_part, &cfg.loss),
            decoder,
            rpn: rpn_part,
            rfm: rfm_part,
            triplet_count,
        })
    }

    /// Draws triplets and accumulates gradients; no parameter update.
    pub fn accumulate_gradients<R: Rng>(
        &mut self,
        sample: &Sample<F>,
        cfg: &TrainConfig<F>,
        rng: &mut R,
    ) -> Result<LossBreakdown<F>> {
        let triplets = if cfg.loss.gamma > F::zero() {
            self.draw_triplets(sample, cfg, rng)?
        } else {
            Vec::new()
        };
        self.accumulate_with_triplets(sample, cfg, &triplets)
    }

    /// Applies one SGD update to every parameter.
    pub fn sgd_all(&mut self, learning_rate: F, weight_decay: F) -> Result<()> {
        for (name, p) in self.params_mut() {
            sgd_step(&name, p, learning_rate, weight_decay)?;
        }
        Ok(())
    }

    /// One complete training step: sample triplets, accumulate gradients,
    /// update parameters.
    pub fn train_step<R: Rng>(
        &mut self,
        sample: &Sample<F>,
        cfg: &TrainConfig<F>,
        rng: &mut R,
    ) -> Result<LossBreakdown<F>> {
        let breakdown = self.accumulate_gradients(sample, cfg, rng)?;
        self.sgd_all(cfg.learning_rate, cfg.weight_decay)?;
        Ok(breakdown)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let named = self.params();
        let mut records: Vec<(String, &Tensor<F>)> = Vec::with_capacity(named.len() * 2);
        for (name, p) in &named {
            records.push((format!("{name}.weight"), &p.weights));
            records.push((format!("{name}.bias"), &p.bias));
        }
        let borrowed: Vec<(&str, &Tensor<F>)> =
            records.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        save_checkpoint(path, &borrowed)
    }

    /// Restores a network from a checkpoint. Backbone parameters are
    /// mandatory; missing RPN/RFM parameters are tolerated (inference-only
    /// checkpoints) and keep deterministic fresh-init values.
    pub fn load<P: AsRef<Path>>(config: NetworkConfig<F>, path: P) -> Result<Self> {
        let records = load_checkpoint(path)?;
        let mut net = Network::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut lookup: std::collections::HashMap<String, Tensor<f32>> =
            records.into_iter().collect();
        for (name, p) in net.params_mut() {
            for (suffix, slot) in [("weight", &mut p.weights), ("bias", &mut p.bias)] {
                let key = format!("{name}.{suffix}");
                match lookup.remove(&key) {
                    Some(t) => {
                        if t.shape() != slot.shape() {
                            return Err(CosalError::CheckpointFormat(format!(
                                "{key}: stored shape {:?} does not match configured {:?}",
                                t.shape(),
                                slot.shape()
                            )));
                        }
                        *slot = t.cast();
                    }
                    None if name.starts_with("rpn.") || name.starts_with("rfm.") => {}
                    None => {
                        return Err(CosalError::CheckpointFormat(format!(
                            "checkpoint is missing backbone parameter {key}"
                        )));
                    }
                }
            }
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(CosalError::CheckpointFormat(format!(
                "checkpoint contains unknown parameter {extra}"
            )));
        }
        Ok(net)
    }
}
