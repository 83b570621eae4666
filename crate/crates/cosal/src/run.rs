//! Run orchestration behind the CLI: the TOML config schema, the
//! checkpointed training loop, parallel batch prediction, directory
//! evaluation, and the finite-difference verification suite.
//!
//! Determinism contract: every draw an iteration makes (image pick,
//! augmentation, triplet sampling) comes from a ChaCha stream numbered by
//! that iteration, so a run resumed from any checkpoint replays exactly the
//! rows an uninterrupted run would have produced.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, resize_image, resize_map};
use crate::data::io::{load_gray_png, load_image_png, save_gray_png};
use crate::data::Sample;
use crate::diffcore::{grad_check, LayerKind, LayerParams};
use crate::error::{CosalError, Result};
use crate::geometry::{match_anchors, BBox, OffsetVec};
use crate::losses::{
    bce_grad_wrt_logits, bce_loss, rfm_grads, rfm_loss, rpn_grads, rpn_loss, smooth_l1,
    smooth_l1_grad, triplet_grads, triplet_loss, LossConfig,
};
use crate::metrics::{evaluate_dataset, EvalReport};
use crate::network::{Network, NetworkConfig, SamplingMode, TrainConfig};
use crate::roialign::{roi_align, roi_align_backward, RoiAggregation, RoiSpec};
use crate::sampling::SamplingConfig;
use crate::scalar::{real, Real};
use crate::tensor::Tensor;

pub const LOSS_LOG_NAME: &str = "loss_log.csv";
pub const LOSS_LOG_HEADER: &str = "iteration,decoder,rpn,rfm,total";

/// Triplet sampling strategy selector as it appears in config files and on
/// the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Online,
}

impl Mode {
    pub fn sampling(self) -> SamplingMode {
        match self {
            Mode::Offline => SamplingMode::Offline,
            Mode::Online => SamplingMode::Online,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = CosalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(CosalError::InvalidArgument(format!(
                "mode must be 'offline' or 'online', got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            train_data: "data/train".into(),
            eval_data: "data/eval".into(),
            out: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub side: usize,
    pub encoder_channels: Vec<usize>,
    pub sensitive_channels: usize,
    pub embedding_len: usize,
    pub rfm_hidden: usize,
    pub anchor_scales: [f64; 3],
    pub anchor_ratios: [f64; 3],
    pub roi_bins: [usize; 2],
    pub roi_samples: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::<f64>::default();
        NetworkSection {
            side: d.side,
            encoder_channels: d.encoder_channels,
            sensitive_channels: d.sensitive_channels,
            embedding_len: d.embedding_len,
            rfm_hidden: d.rfm_hidden,
            anchor_scales: d.anchor_scales,
            anchor_ratios: d.anchor_ratios,
            roi_bins: [d.roi.bins.0, d.roi.bins.1],
            roi_samples: d.roi.samples,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Iterations beyond this one use `dropped_learning_rate`.
    pub lr_drop_iteration: u64,
    pub dropped_learning_rate: f64,
    pub max_iterations: u64,
    pub checkpoint_every: u64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: 1e-5,
            weight_decay: 1e-4,
            lr_drop_iteration: 30_000,
            dropped_learning_rate: 1e-6,
            max_iterations: 80_000,
            checkpoint_every: 1_000,
        }
    }
}

impl OptimizerSection {
    pub fn learning_rate_at(&self, iteration: u64) -> f64 {
        if iteration > self.lr_drop_iteration {
            self.dropped_learning_rate
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub alpha_loc: f64,
    pub margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::<f64>::default();
        LossSection {
            alpha: d.alpha,
            beta: d.beta,
            gamma: d.gamma,
            alpha_loc: d.alpha_loc,
            margin: d.margin,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub positives: usize,
    pub negatives: usize,
    pub triplet_count: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub match_pos_iou: f64,
    pub match_neg_iou: f64,
    pub nms_iou: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let d = SamplingConfig::<f64>::default();
        let t = TrainConfig::<f64>::default();
        SamplingSection {
            positives: d.positives,
            negatives: d.negatives,
            triplet_count: d.triplet_count,
            pos_iou: d.pos_iou,
            neg_iou: d.neg_iou,
            match_pos_iou: t.match_pos_iou,
            match_neg_iou: t.match_neg_iou,
            nms_iou: d.nms_iou,
        }
    }
}

/// One run, fully described: a TOML file with these sections drives every
/// subcommand. Defaults are the published hyperparameters; the desk preset
/// shrinks the schedule to laptop scale.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Option<Mode>,
    pub paths: PathsSection,
    pub network: NetworkSection,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub sampling: SamplingSection,
}

impl RunConfig {
    /// Laptop-scale preset: 2,000 iterations over a small synthetic set with
    /// a learning rate matched to that schedule.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.mode = Some(Mode::Online);
        c.optimizer.max_iterations = 2_000;
        c.optimizer.checkpoint_every = 500;
        c.optimizer.learning_rate = 1.5e-2;
        c.optimizer.lr_drop_iteration = 1_500;
        c.optimizer.dropped_learning_rate = 3.75e-3;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CosalError::InvalidConfig(format!("config: {e}")))
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| CosalError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or(Mode::Offline)
    }

    pub fn network_config<F: Real>(&self) -> NetworkConfig<F> {
        let n = &self.network;
        NetworkConfig {
            side: n.side,
            encoder_channels: n.encoder_channels.clone(),
            sensitive_channels: n.sensitive_channels,
            embedding_len: n.embedding_len,
            rfm_hidden: n.rfm_hidden,
            anchor_scales: n.anchor_scales.map(real::<F>),
            anchor_ratios: n.anchor_ratios.map(real::<F>),
            roi: RoiSpec {
                bins: (n.roi_bins[0], n.roi_bins[1]),
                samples: n.roi_samples,
                aggregation: RoiAggregation::Average,
            },
        }
    }

    pub fn train_config<F: Real>(&self) -> TrainConfig<F> {
        let s = &self.sampling;
        let l = &self.loss;
        TrainConfig {
            loss: LossConfig {
                alpha: real(l.alpha),
                beta: real(l.beta),
                gamma: real(l.gamma),
                alpha_loc: real(l.alpha_loc),
                margin: real(l.margin),
                ..LossConfig::default()
            },
            sampling: SamplingConfig {
                positives: s.positives,
                negatives: s.negatives,
                triplet_count: s.triplet_count,
                pos_iou: real(s.pos_iou),
                neg_iou: real(s.neg_iou),
                nms_iou: real(s.nms_iou),
                ..SamplingConfig::default()
            },
            mode: self.mode().sampling(),
            learning_rate: real(self.optimizer.learning_rate),
            weight_decay: real(self.optimizer.weight_decay),
            match_pos_iou: real(s.match_pos_iou),
            match_neg_iou: real(s.match_neg_iou),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub decoder: f32,
    pub rpn: f32,
    pub rfm: f32,
    pub total: f32,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.decoder, self.rpn, self.rfm, self.total
        )
    }

    pub fn from_csv(line: &str) -> Option<LogRow> {
        let mut it = line.split(',');
        let row = LogRow {
            iteration: it.next()?.parse().ok()?,
            decoder: it.next()?.parse().ok()?,
            rpn: it.next()?.parse().ok()?,
            rfm: it.next()?.parse().ok()?,
            total: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(row)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:06}.csk"))
}

/// Highest-numbered checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    if !dir.is_dir() {
        return Ok(None);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        let digits = match name
            .strip_prefix("checkpoint-")
            .and_then(|r| r.strip_suffix(".csk"))
        {
            Some(d) => d,
            None => continue,
        };
        if let Ok(it) = digits.parse::<u64>() {
            if best.as_ref().is_none_or(|(b, _)| it > *b) {
                best = Some((it, path));
            }
        }
    }
    Ok(best)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub network: Network<f32>,
    /// Every logged row, including rows retained across a resume.
    pub log: Vec<LogRow>,
    pub resumed_from: Option<u64>,
    pub final_checkpoint: PathBuf,
}

fn read_log_rows(path: &Path, up_to: u64) -> Vec<LogRow> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(LogRow::from_csv)
        .filter(|r| r.iteration <= up_to)
        .collect()
}

/// Trains for `optimizer.max_iterations`, one augmented image per iteration,
/// writing `loss_log.csv` and periodic checkpoints under `out_dir`. An
/// existing checkpoint in `out_dir` is resumed from automatically, with
/// iteration numbering (and the log) continuing as if uninterrupted.
pub fn train(config: &RunConfig, samples: &[Sample<f32>], out_dir: &Path) -> Result<TrainSummary> {
    let net_cfg = config.network_config::<f32>();
    net_cfg.validate()?;
    let opt = &config.optimizer;
    if opt.max_iterations == 0 || opt.checkpoint_every == 0 {
        return Err(CosalError::InvalidConfig(
            "optimizer: max_iterations and checkpoint_every must be positive".into(),
        ));
    }
    if samples.is_empty() {
        return Err(CosalError::Dataset("training set is empty".into()));
    }
    for s in samples {
        if s.side() != net_cfg.side {
            return Err(CosalError::Dataset(format!(
                "sample {} is {} px but the network expects {}",
                s.id,
                s.side(),
                net_cfg.side
            )));
        }
    }
    fs::create_dir_all(out_dir)?;

    let resume = latest_checkpoint(out_dir)?;
    let log_path = out_dir.join(LOSS_LOG_NAME);
    let (mut net, start, mut log) = match &resume {
        Some((it, path)) => (
            Network::load(net_cfg.clone(), path)?,
            *it,
            read_log_rows(&log_path, *it),
        ),
        None => (
            Network::new(net_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?,
            0,
            Vec::new(),
        ),
    };

    let mut file = BufWriter::new(File::create(&log_path)?);
    writeln!(file, "{LOSS_LOG_HEADER}")?;
    for row in &log {
        writeln!(file, "{}", row.to_csv())?;
    }
    file.flush()?;

    let base = config.train_config::<f32>();
    let mut final_checkpoint = resume
        .as_ref()
        .map(|(_, p)| p.clone())
        .unwrap_or_else(|| checkpoint_path(out_dir, opt.max_iterations));
    for iteration in start + 1..=opt.max_iterations {
        // every random choice this iteration makes lives on its own stream
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(iteration);
        let pick = rng.gen_range(0..samples.len());
        let sample = augment(&samples[pick], &mut rng);
        let mut tc = base.clone();
        tc.learning_rate = opt.learning_rate_at(iteration) as f32;
        let b = net.train_step(&sample, &tc, &mut rng)?;
        let row = LogRow {
            iteration,
            decoder: b.decoder,
            rpn: b.rpn,
            rfm: b.rfm,
            total: b.total,
        };
        writeln!(file, "{}", row.to_csv())?;
        file.flush()?;
        log.push(row);
        if iteration % opt.checkpoint_every == 0 || iteration == opt.max_iterations {
            let path = checkpoint_path(out_dir, iteration);
            net.save(&path)?;
            final_checkpoint = path;
        }
    }

    Ok(TrainSummary {
        network: net,
        log,
        resumed_from: resume.map(|(it, _)| it),
        final_checkpoint,
    })
}

/// Worker pool for per-file parallelism, capped by `COSAL_THREADS`.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("COSAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
    {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CosalError::InvalidConfig(format!("thread pool: {e}")))
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                names.push(name.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Predicts one image of any size: nearest-neighbor resize to the network
/// side, forward pass, resize back, write `round(255 P)` grayscale.
pub fn predict_file(net: &Network<f32>, input: &Path, output: &Path) -> Result<()> {
    let image = load_image_png::<f32>(input)?;
    let (h, w) = (image.dim(1), image.dim(2));
    let side = net.config().side;
    let resized;
    let x = if (h, w) == (side, side) {
        &image
    } else {
        resized = resize_image(&image, side, side);
        &resized
    };
    let p = net.predict(x)?;
    let p = if (h, w) == (side, side) {
        p
    } else {
        resize_map(&p, h, w)
    };
    save_gray_png(output, &p)
}

/// Predicts every PNG in `in_dir` into `out_dir` (same file names), in
/// parallel. Returns the processed names.
pub fn predict_dir(net: &Network<f32>, in_dir: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let names = png_names(in_dir)?;
    fs::create_dir_all(out_dir)?;
    thread_pool()?.install(|| {
        names
            .par_iter()
            .try_for_each(|name| predict_file(net, &in_dir.join(name), &out_dir.join(name)))
    })?;
    Ok(names)
}

/// Evaluates a prediction directory against a ground-truth directory. File
/// sets must agree by name; ground truths binarize at 0.5.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = png_names(pred_dir)?;
    let gts = png_names(gt_dir)?;
    if preds != gts {
        let missing_gt: Vec<&String> = preds.iter().filter(|n| !gts.contains(n)).collect();
        let missing_pred: Vec<&String> = gts.iter().filter(|n| !preds.contains(n)).collect();
        return Err(CosalError::Dataset(format!(
            "prediction/ground-truth mismatch: no ground truth for {missing_gt:?}, no prediction for {missing_pred:?}"
        )));
    }
    if preds.is_empty() {
        return Err(CosalError::Dataset("no PNG pairs to evaluate".into()));
    }
    let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = thread_pool()?.install(|| {
        preds
            .par_iter()
            .map(|name| {
                let p = load_gray_png::<f64>(&pred_dir.join(name))?;
                let y = load_gray_png::<f64>(&gt_dir.join(name))?
                    .map(|v| if v > 0.5 { 1.0 } else { 0.0 });
                Ok((p, y))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (ps, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    evaluate_dataset(&ps, &ys)
}

/// Writes `report.json`, `report.txt`, and `pr_curve.csv` under `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| CosalError::InvalidArgument(format!("report: {e}")))?;
    fs::write(dir.join("report.json"), json + "\n")?;
    fs::write(dir.join("report.txt"), report.render_text())?;
    fs::write(dir.join("pr_curve.csv"), report.pr_curve_csv())?;
    Ok(())
}

// --- finite-difference verification suite ---

const FD_STEP: f64 = 1e-5;
const FD_SEEDS: u64 = 20;
pub const LAYER_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

/// One named check of the verification suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }

    fn new(name: &str, tol: f64) -> Self {
        SuiteEntry {
            name: name.into(),
            max_rel_err: 0.0,
            tol,
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self
            .max_rel_err
            .max((analytic - numeric).abs() / numeric.abs().max(1.0));
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let dist = Uniform::new(-1.0f64, 1.0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

fn layer_entries() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let kinds = [
        LayerKind::Conv3x3,
        LayerKind::Conv1x1,
        LayerKind::FullyConnected,
        LayerKind::Relu,
        LayerKind::Sigmoid,
        LayerKind::MaxPool2,
        LayerKind::Upsample2,
        LayerKind::Concat,
    ];
    for kind in kinds {
        let mut entry = SuiteEntry::new(kind.name(), LAYER_TOL);
        for seed in 0..FD_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(0x51DE * (seed + 1));
            let (params, inputs): (Option<LayerParams<f64>>, Vec<Tensor<f64>>) = match kind {
                LayerKind::Conv3x3 => (
                    Some(LayerParams::conv3x3(3, 2, &mut rng)),
                    vec![random_tensor(&[3, 5, 5], &mut rng)],
                ),
                LayerKind::Conv1x1 => (
                    Some(LayerParams::conv1x1(3, 4, &mut rng)),
                    vec![random_tensor(&[3, 5, 5], &mut rng)],
                ),
                LayerKind::FullyConnected => (
                    Some(LayerParams::fully_connected(18, 5, &mut rng)),
                    vec![random_tensor(&[2, 3, 3], &mut rng)],
                ),
                LayerKind::Concat => (
                    None,
                    vec![
                        random_tensor(&[2, 3, 3], &mut rng),
                        random_tensor(&[1, 3, 3], &mut rng),
                    ],
                ),
                _ => (None, vec![random_tensor(&[2, 4, 4], &mut rng)]),
            };
            let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
            let report = grad_check(kind, params.as_ref(), &refs, FD_STEP, LAYER_TOL, seed)?;
            entry.checked += report.checked;
            entry.max_rel_err = entry.max_rel_err.max(report.max_rel_err);
        }
        out.push(entry);
    }
    Ok(out)
}

fn roialign_entry() -> Result<SuiteEntry> {
    let spec = RoiSpec {
        bins: (2, 2),
        samples: 2,
        aggregation: RoiAggregation::Average,
    };
    let mut entry = SuiteEntry::new("roi_align", LAYER_TOL);
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA11 + seed);
        let mut feature = random_tensor(&[2, 4, 4], &mut rng);
        let bx = BBox::new(
            rng.gen_range(1.2..2.8),
            rng.gen_range(1.2..2.8),
            rng.gen_range(0.8..2.2),
            rng.gen_range(0.8..2.2),
        );
        let y0 = roi_align(&feature, &bx, &spec)?;
        let u = random_tensor(y0.shape(), &mut rng);
        let analytic = roi_align_backward(feature.shape(), &bx, &spec, &u)?;
        let objective = |f: &Tensor<f64>| -> Result<f64> {
            let y = roi_align(f, &bx, &spec)?;
            Ok(y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum())
        };
        for k in 0..feature.len() {
            let base = feature.data()[k];
            feature.data_mut()[k] = base + FD_STEP;
            let jp = objective(&feature)?;
            feature.data_mut()[k] = base - FD_STEP;
            let jm = objective(&feature)?;
            feature.data_mut()[k] = base;
            entry.record(analytic.data()[k], (jp - jm) / (2.0 * FD_STEP));
        }
    }
    Ok(entry)
}

fn bce_entry() -> Result<SuiteEntry> {
    let mut entry = SuiteEntry::new("bce", LAYER_TOL);
    let eps = LossConfig::<f64>::default().bce_epsilon;
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBCE + seed);
        let n = 12;
        let mut z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = Tensor::from_vec(
            &[n],
            (0..n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let prob = |z: &[f64]| -> Result<Tensor<f64>> {
            Tensor::from_vec(&[n], z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect())
        };
        let analytic = bce_grad_wrt_logits(&prob(&z)?, &y)?;
        for k in 0..n {
            let base = z[k];
            z[k] = base + FD_STEP;
            let jp = bce_loss(&prob(&z)?, &y, eps)?;
            z[k] = base - FD_STEP;
            let jm = bce_loss(&prob(&z)?, &y, eps)?;
            z[k] = base;
            entry.record(analytic.data()[k], (jp - jm) / (2.0 * FD_STEP));
        }
    }
    Ok(entry)
}

fn smooth_l1_entry() -> SuiteEntry {
    let mut entry = SuiteEntry::new("smooth_l1", LAYER_TOL);
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x511 + seed);
        for _ in 0..10 {
            let x: f64 = rng.gen_range(-3.0..3.0);
            let numeric = (smooth_l1(x + FD_STEP) - smooth_l1(x - FD_STEP)) / (2.0 * FD_STEP);
            entry.record(smooth_l1_grad(x), numeric);
        }
    }
    entry
}

/// Draws embeddings until the hinge argument keeps a safe margin from its
/// kink, where central differences would straddle the non-smooth point.
fn safe_triple(rng: &mut ChaCha8Rng, k: usize, margin: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    loop {
        let mut draw = || -> Vec<f64> { (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let (va, vp, vn) = (draw(), draw(), draw());
        let d = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        if (d(&va, &vp) - d(&va, &vn) + margin).abs() > 1e-3 {
            return (va, vp, vn);
        }
    }
}

fn triplet_entry() -> Result<SuiteEntry> {
    let mut entry = SuiteEntry::new("triplet", LAYER_TOL);
    let margin = 1.0;
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x391 + seed);
        let (va, vp, vn) = safe_triple(&mut rng, 6, margin);
        let (ga, gp, gn) = triplet_grads(&va, &vp, &vn, margin)?;
        let mut vecs = [va, vp, vn];
        let grads = [ga, gp, gn];
        for w in 0..3 {
            for k in 0..6 {
                let base = vecs[w][k];
                vecs[w][k] = base + FD_STEP;
                let jp = triplet_loss(&vecs[0], &vecs[1], &vecs[2], margin)?;
                vecs[w][k] = base - FD_STEP;
                let jm = triplet_loss(&vecs[0], &vecs[1], &vecs[2], margin)?;
                vecs[w][k] = base;
                entry.record(grads[w][k], (jp - jm) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(entry)
}

fn triple_member(t: &mut (Vec<f64>, Vec<f64>, Vec<f64>), w: usize) -> &mut Vec<f64> {
    match w {
        0 => &mut t.0,
        1 => &mut t.1,
        _ => &mut t.2,
    }
}

fn rfm_entry() -> Result<SuiteEntry> {
    let mut entry = SuiteEntry::new("rfm", LAYER_TOL);
    let margin = 1.0;
    let k = 4;
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4F1 + seed);
        let mut triples_owned: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
            (0..3).map(|_| safe_triple(&mut rng, k, margin)).collect();
        let betas: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
        let loss_of = |t: &[(Vec<f64>, Vec<f64>, Vec<f64>)]| -> Result<f64> {
            let slices: Vec<(&[f64], &[f64], &[f64])> =
                t.iter().map(|(a, p, n)| (&a[..], &p[..], &n[..])).collect();
            rfm_loss(&betas, &slices, margin)
        };
        let analytic = {
            let slices: Vec<(&[f64], &[f64], &[f64])> = triples_owned
                .iter()
                .map(|(a, p, n)| (&a[..], &p[..], &n[..]))
                .collect();
            rfm_grads(&betas, &slices, margin)?
        };
        for ti in 0..3 {
            for w in 0..3 {
                for j in 0..k {
                    let base = triple_member(&mut triples_owned[ti], w)[j];
                    triple_member(&mut triples_owned[ti], w)[j] = base + FD_STEP;
                    let jp = loss_of(&triples_owned)?;
                    triple_member(&mut triples_owned[ti], w)[j] = base - FD_STEP;
                    let jm = loss_of(&triples_owned)?;
                    triple_member(&mut triples_owned[ti], w)[j] = base;
                    let g = match w {
                        0 => &analytic[ti].0,
                        1 => &analytic[ti].1,
                        _ => &analytic[ti].2,
                    };
                    entry.record(g[j], (jp - jm) / (2.0 * FD_STEP));
                }
            }
        }
    }
    Ok(entry)
}

fn offset_field(o: &mut OffsetVec<f64>, c: usize) -> &mut f64 {
    match c {
        0 => &mut o.tx,
        1 => &mut o.ty,
        2 => &mut o.tw,
        _ => &mut o.th,
    }
}

fn rpn_entry() -> Result<SuiteEntry> {
    let mut entry = SuiteEntry::new("rpn", LAYER_TOL);
    let config = LossConfig::<f64>::default();
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4214 + seed);
        let anchors = vec![
            BBox::new(10.0, 10.0, 8.0, 8.0),
            BBox::new(30.0, 10.0, 8.0, 8.0),
            BBox::new(10.0, 30.0, 8.0, 8.0),
            BBox::new(30.0, 30.0, 6.0, 10.0),
        ];
        let jitter = |b: &BBox<f64>, rng: &mut ChaCha8Rng| {
            BBox::new(
                b.cx + rng.gen_range(-0.5..0.5),
                b.cy + rng.gen_range(-0.5..0.5),
                b.w * rng.gen_range(0.9..1.1),
                b.h * rng.gen_range(0.9..1.1),
            )
        };
        let gts = vec![jitter(&anchors[0], &mut rng), jitter(&anchors[3], &mut rng)];
        let assignment = match_anchors(&anchors, &gts, 0.5, 0.3)?;
        let mut logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut offsets: Vec<OffsetVec<f64>> = (0..4)
            .map(|_| OffsetVec {
                tx: rng.gen_range(-0.8..0.8),
                ty: rng.gen_range(-0.8..0.8),
                tw: rng.gen_range(-0.8..0.8),
                th: rng.gen_range(-0.8..0.8),
            })
            .collect();
        let total = |logits: &[f64], offsets: &[OffsetVec<f64>]| -> Result<f64> {
            let conf: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
            Ok(rpn_loss(&assignment, &conf, offsets, &gts, &anchors, &config)?.total)
        };
        let conf: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let (g_logit, g_off) = rpn_grads(&assignment, &conf, &offsets, &gts, &anchors, &config)?;
        for k in 0..logits.len() {
            let base = logits[k];
            logits[k] = base + FD_STEP;
            let jp = total(&logits, &offsets)?;
            logits[k] = base - FD_STEP;
            let jm = total(&logits, &offsets)?;
            logits[k] = base;
            entry.record(g_logit[k], (jp - jm) / (2.0 * FD_STEP));
        }
        for a in 0..offsets.len() {
            for c in 0..4 {
                let base = *offset_field(&mut offsets[a], c);
                *offset_field(&mut offsets[a], c) = base + FD_STEP;
                let jp = total(&logits, &offsets)?;
                *offset_field(&mut offsets[a], c) = base - FD_STEP;
                let jm = total(&logits, &offsets)?;
                *offset_field(&mut offsets[a], c) = base;
                let g = match c {
                    0 => g_off[a].tx,
                    1 => g_off[a].ty,
                    2 => g_off[a].tw,
                    _ => g_off[a].th,
                };
                entry.record(g, (jp - jm) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(entry)
}

/// 16 px sample with two co-salient squares, matching the composite check's
/// tiny network.
fn composite_sample() -> Sample<f64> {
    use crate::data::{BinaryMask, Instance};
    let s = 16;
    let build = |i0: usize, j0: usize| -> Instance<f64> {
        let mut mask = BinaryMask::new(s, s);
        for i in i0..i0 + 6 {
            for j in j0..j0 + 6 {
                mask.set(i, j, true);
            }
        }
        Instance {
            bbox: mask.tight_bbox().expect("nonempty"),
            mask,
            co_salient: true,
        }
    };
    let instances = vec![build(1, 1), build(9, 9)];
    let mut image = Tensor::zeros(&[3, s, s]);
    for (k, v) in image.data_mut().iter_mut().enumerate() {
        *v = (k % 17) as f64 / 17.0;
    }
    let mut sample = Sample {
        id: "composite".into(),
        image,
        y: Tensor::zeros(&[s, s]),
        instances,
    };
    sample.derive_y();
    sample
}

fn composite_entry() -> Result<SuiteEntry> {
    let cfg = NetworkConfig::<f64> {
        side: 16,
        encoder_channels: vec![4],
        sensitive_channels: 8,
        embedding_len: 4,
        rfm_hidden: 8,
        roi: RoiSpec {
            bins: (3, 3),
            samples: 2,
            aggregation: RoiAggregation::Average,
        },
        ..NetworkConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut net = Network::new(cfg, &mut rng)?;
    let sample = composite_sample();
    let tc = TrainConfig::<f64> {
        sampling: SamplingConfig {
            positives: 8,
            negatives: 8,
            triplet_count: 12,
            ..SamplingConfig::default()
        },
        ..TrainConfig::default()
    };
    let triplets = net.draw_triplets(&sample, &tc, &mut rng)?;
    net.accumulate_with_triplets(&sample, &tc, &triplets)?;
    let analytic: Vec<(Tensor<f64>, Tensor<f64>)> = net
        .params()
        .iter()
        .map(|(_, p)| (p.weight_grad.clone(), p.bias_grad.clone()))
        .collect();

    let mut entry = SuiteEntry::new("composite", COMPOSITE_TOL);
    let n_params = analytic.len();
    for pi in 0..n_params {
        for which in 0..2 {
            let len = if which == 0 {
                analytic[pi].0.len()
            } else {
                analytic[pi].1.len()
            };
            for k in 0..len {
                let set = |net: &mut Network<f64>, v: f64| {
                    let mut params = net.params_mut();
                    let slot = if which == 0 {
                        &mut params[pi].1.weights
                    } else {
                        &mut params[pi].1.bias
                    };
                    let old = slot.data()[k];
                    slot.data_mut()[k] = v;
                    old
                };
                let base = set(&mut net, 0.0);
                set(&mut net, base + FD_STEP);
                let jp = net.total_loss_value(&sample, &tc, &triplets)?;
                set(&mut net, base - FD_STEP);
                let jm = net.total_loss_value(&sample, &tc, &triplets)?;
                set(&mut net, base);
                let g = if which == 0 {
                    analytic[pi].0.data()[k]
                } else {
                    analytic[pi].1.data()[k]
                };
                entry.record(g, (jp - jm) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(entry)
}

/// The full verification sweep: every layer kind, RoIAlign, every loss, and
/// a whole-network composite against central differences.
pub fn gradcheck_suite() -> Result<Vec<SuiteEntry>> {
    let mut entries = layer_entries()?;
    entries.push(roialign_entry()?);
    entries.push(bce_entry()?);
    entries.push(smooth_l1_entry());
    entries.push(triplet_entry()?);
    entries.push(rfm_entry()?);
    entries.push(rpn_entry()?);
    entries.push(composite_entry()?);
    Ok(entries)
}
