//! Two-phase training: detector pretraining on synthetic shapes with
//! analytic corner labels, then Siamese descriptor training with a triplet
//! loss over homography-related pairs. Also provides
//! homographic-adaptation pseudo-labels for unlabeled rasters and the Adam
//! optimizer both phases share.

mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticSample};

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bayer::{mosaic, BayerImage};
use crate::evalmatch::{
    extract_keypoints, sample_descriptors, sample_descriptors_bilinear, DescMatrix, DetectionParams, Keypoint,
};
use crate::geometry::{sample_training_homography, warp_bayer, warp_plane, warp_rgb, Homography, TrainingRanges};
use crate::network::{forward, Bound, ForwardMode, NetworkConfig, ParamStore};
use crate::tensor::{GradTape, TensorId};
use crate::{Error, Result};

/// Aggregated keypoint-probability map built from many warped forward
/// passes.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub height: usize,
    pub width: usize,
    /// Per-pixel probabilities in [0, 1].
    pub s_pse: Vec<f32>,
    /// Number of homographies aggregated.
    pub n_used: usize,
}

/// Runs the detector under each homography and averages the un-warped
/// score maps: the image is warped by H, scored, and the score map pulled
/// back through H so every contribution lives in the original frame. Each
/// pixel is divided by the number of homographies whose projection of that
/// pixel stayed in frame.
pub fn homographic_adaptation_with(
    config: &NetworkConfig,
    params: &ParamStore,
    image: &BayerImage,
    homographies: &[Homography],
) -> Result<PseudoLabel> {
    if homographies.is_empty() {
        return Err(Error::Config("homographic adaptation needs at least one homography".into()));
    }
    let (h, w) = (image.height, image.width);
    let mut acc = vec![0f64; h * w];
    let mut count = vec![0u32; h * w];
    for hom in homographies {
        let warped = warp_bayer(image, hom)?;
        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let out = forward(&mut tape, config, &bound, &warped, ForwardMode::Detector)?;
        let score = tape.data(out.score);
        // Pull the score map back into the original frame.
        let unwarped = warp_plane(score, h, w, &hom.inverse()?)?;
        for y in 0..h {
            for x in 0..w {
                if let Some((px, py)) = hom.apply(x as f64, y as f64) {
                    if px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64 {
                        acc[y * w + x] += f64::from(unwarped[y * w + x]);
                        count[y * w + x] += 1;
                    }
                }
            }
        }
    }
    let s_pse: Vec<f32> = acc
        .iter()
        .zip(&count)
        .map(|(&a, &c)| if c == 0 { 0.0 } else { (a / f64::from(c)).clamp(0.0, 1.0) as f32 })
        .collect();
    Ok(PseudoLabel { height: h, width: w, s_pse, n_used: homographies.len() })
}

/// Homographic adaptation over `n` transforms: the identity plus `n - 1`
/// draws from the training distribution.
pub fn homographic_adaptation(
    config: &NetworkConfig,
    params: &ParamStore,
    image: &BayerImage,
    n: usize,
    seed: u64,
    ranges: &TrainingRanges,
) -> Result<PseudoLabel> {
    if n == 0 {
        return Err(Error::Config("homographic adaptation needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut homs = vec![Homography::identity()];
    while homs.len() < n {
        homs.push(sample_training_homography(&mut rng, image.width, image.height, ranges)?);
    }
    homographic_adaptation_with(config, params, image, &homs)
}

/// Gaussian corner label: 1.0 at every corner, decaying with sigma = 1 px
/// (maximum over corners, so values never exceed 1).
pub fn corner_label(height: usize, width: usize, corners: &[(usize, usize)]) -> Vec<f32> {
    let mut label = vec![0f32; height * width];
    let radius = 4isize;
    for &(cx, cy) in corners {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let y = cy as isize + dy;
                let x = cx as isize + dx;
                if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                let v = (-d2 / 2.0).exp() as f32;
                let cell = &mut label[y as usize * width + x as usize];
                *cell = cell.max(v);
            }
        }
    }
    label
}

/// Anchor/positive/negative sampling locations for one image pair.
#[derive(Debug, Clone)]
pub struct TripletPlan {
    /// Integer keypoint locations in image 1, by descending score.
    pub anchors: Vec<(usize, usize)>,
    /// Homography projections of the anchors into image 2.
    pub positives: Vec<(f32, f32)>,
    /// Projected location of a different anchor, at least 8 px away from
    /// the row's own positive.
    pub negatives: Vec<(f32, f32)>,
    /// How many rows were requested (the plan shrinks when fewer valid
    /// projections exist).
    pub requested: usize,
}

impl TripletPlan {
    pub fn rows(&self) -> usize {
        self.anchors.len()
    }

    pub fn shrunk(&self) -> bool {
        self.rows() < self.requested
    }
}

/// Minimum separation between a row's positive and its negative location.
pub const NEGATIVE_EXCLUSION_PX: f64 = 8.0;

/// Chooses up to `k` triplet rows: the top-scoring keypoints of image 1
/// whose projection lands inside image 2 become anchors/positives; each
/// negative is a uniformly chosen other row's positive location at least
/// 8 px away. Deterministic under `seed`.
pub fn plan_triplets(
    score1: &[f32],
    height: usize,
    width: usize,
    frame2: (usize, usize),
    h: &Homography,
    k: usize,
    seed: u64,
    det: &DetectionParams,
) -> Result<TripletPlan> {
    let kps = extract_keypoints(score1, height, width, det);
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for kp in &kps {
        if anchors.len() == k {
            break;
        }
        if let Some((px, py)) = h.apply(kp.x as f64, kp.y as f64) {
            if px >= 0.0 && py >= 0.0 && px <= frame2.0 as f64 - 1.0 && py <= frame2.1 as f64 - 1.0 {
                anchors.push((kp.x, kp.y));
                positives.push((px as f32, py as f32));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..anchors.len() {
        let candidates: Vec<usize> = (0..anchors.len())
            .filter(|&j| {
                j != i && {
                    let dx = f64::from(positives[j].0) - f64::from(positives[i].0);
                    let dy = f64::from(positives[j].1) - f64::from(positives[i].1);
                    (dx * dx + dy * dy).sqrt() >= NEGATIVE_EXCLUSION_PX
                }
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let j = candidates[rng.gen_range(0..candidates.len())];
        keep.push(i);
        negatives.push(positives[j]);
    }
    Ok(TripletPlan {
        anchors: keep.iter().map(|&i| anchors[i]).collect(),
        positives: keep.iter().map(|&i| positives[i]).collect(),
        negatives,
        requested: k,
    })
}

/// Places the plan's descriptor rows on the tape: anchors by exact pixel
/// lookup, positives and negatives by bilinear sampling re-normalized to
/// unit length. Returns (anchors, positives, negatives), each `[K, C]`.
pub fn triplet_rows(
    tape: &mut GradTape,
    desc1: TensorId,
    desc2: TensorId,
    plan: &TripletPlan,
) -> Result<(TensorId, TensorId, TensorId)> {
    let anchors = tape.gather_pixels(desc1, &plan.anchors)?;
    let pos = tape.sample_bilinear_pixels(desc2, &plan.positives)?;
    let pos = tape.l2_normalize_rows(pos, 1e-12)?;
    let neg = tape.sample_bilinear_pixels(desc2, &plan.negatives)?;
    let neg = tape.l2_normalize_rows(neg, 1e-12)?;
    Ok((anchors, pos, neg))
}

/// Mean hinge over rows: `[ ||a - p||^2 - ||a - n||^2 + margin ]_+`.
pub fn triplet_loss(
    tape: &mut GradTape,
    anchors: TensorId,
    positives: TensorId,
    negatives: TensorId,
    margin: f32,
) -> Result<TensorId> {
    let d_pos = tape.rows_squared_distance(anchors, positives)?;
    let d_neg = tape.rows_squared_distance(anchors, negatives)?;
    let diff = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Plain-matrix triplet rows for reference computations.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: DescMatrix,
    pub positives: DescMatrix,
    pub negatives: DescMatrix,
    pub margin: f32,
}

/// Direct per-row evaluation of the triplet hinge (reference oracle).
pub fn triplet_loss_reference(batch: &TripletBatch) -> f64 {
    let k = batch.anchors.rows;
    if k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..k {
        let a = batch.anchors.row(i);
        let p = batch.positives.row(i);
        let n = batch.negatives.row(i);
        let d2 = |u: &[f32], v: &[f32]| -> f64 {
            u.iter().zip(v).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
        };
        total += (d2(a, p) - d2(a, n) + f64::from(batch.margin)).max(0.0);
    }
    total / k as f64
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter first/second moment buffers mirroring the
/// parameter shapes. Parameters without gradients (frozen leaves) are
/// untouched.
pub struct Adam {
    pub opts: AdamOptions,
    step: usize,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(opts: AdamOptions) -> Self {
        Self { opts, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over every parameter that accumulated a gradient.
    pub fn step(&mut self, store: &mut ParamStore, tape: &GradTape, bound: &Bound) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = vec![None; store.entries.len()];
        }
        if self.moments.len() != store.entries.len() {
            return Err(Error::Config("optimizer bound to a different parameter store".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.opts.beta1;
        let b2 = self.opts.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (i, entry) in store.entries.iter_mut().enumerate() {
            let Some(grad) = tape.grad(bound.ids[i]) else { continue };
            let (m, v) = self.moments[i]
                .get_or_insert_with(|| (vec![0.0; entry.data.len()], vec![0.0; entry.data.len()]));
            for (j, value) in entry.data.iter_mut().enumerate() {
                let g = f64::from(grad[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *value = (f64::from(*value) - self.opts.lr * m_hat / (v_hat.sqrt() + self.opts.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Shared training knobs.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub adam: AdamOptions,
    /// Weight of the dissipation-peak term in the detector loss.
    pub lambda_peak: f32,
    /// Odd window size of the peak blocks.
    pub peak_block: usize,
    /// Triplet margin.
    pub margin: f32,
    /// Triplet rows requested per pair.
    pub triplet_k: usize,
    /// Keypoint extraction for triplet anchoring.
    pub detection: DetectionParams,
    /// Homography distribution for pair construction.
    pub ranges: TrainingRanges,
    /// Apply a random exposure gain to the warped partner image.
    pub exposure_jitter: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamOptions::default(),
            lambda_peak: 0.1,
            peak_block: 5,
            margin: 1.0,
            triplet_k: 32,
            detection: DetectionParams::default(),
            ranges: TrainingRanges::default(),
            exposure_jitter: true,
            seed: 0,
        }
    }
}

/// Per-epoch loss means; unused losses are zero.
#[derive(Debug, Clone)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub bce: f64,
    pub peak: f64,
    pub triplet: f64,
    pub wall_seconds: f64,
}

impl TrainEpoch {
    /// Tab-separated log line: epoch, bce, peak, triplet, wall_seconds.
    pub fn log_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}", self.epoch, self.bce, self.peak, self.triplet, self.wall_seconds)
    }
}

/// Outcome of a training run. When a non-finite loss appears the run
/// aborts before applying that step, so the returned parameters are the
/// last good ones.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<TrainEpoch>,
    pub aborted: bool,
    /// Triplet plans that shrank below the requested row count.
    pub warnings: usize,
    /// Dataset-mean BCE before the first and after the last update
    /// (detector phase only; zero otherwise).
    pub initial_bce: f64,
    pub final_bce: f64,
}

fn detector_trainable(name: &str) -> bool {
    !name.starts_with("desc")
}

fn descriptor_trainable(name: &str) -> bool {
    name.starts_with("desc")
}

/// Forward-only dataset-mean BCE against the analytic corner labels.
pub fn evaluate_detector_bce(
    config: &NetworkConfig,
    params: &ParamStore,
    samples: &[SyntheticSample],
) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let out = forward(&mut tape, config, &bound, &sample.bayer, ForwardMode::Detector)?;
        let label = corner_label(sample.bayer.height, sample.bayer.width, &sample.corners);
        let bce = tape.bce_with_target(out.score, &label)?;
        total += tape.value_f64(bce);
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Detector pretraining on synthetic samples: per image, the loss is
/// BCE(score, corner label) + lambda * dissipation peak over blocks
/// centered on the ground-truth corners. Descriptor-head parameters are
/// frozen. `on_epoch` receives each epoch record as it completes.
pub fn train_detector(
    config: &NetworkConfig,
    params: &mut ParamStore,
    samples: &[SyntheticSample],
    epochs: usize,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        aborted: false,
        warnings: 0,
        initial_bce: evaluate_detector_bce(config, params, samples)?,
        final_bce: 0.0,
    };
    let mut adam = Adam::new(opts.adam);
    for epoch in 1..=epochs {
        let start = Instant::now();
        let mut bce_sum = 0.0;
        let mut peak_sum = 0.0;
        for sample in samples {
            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape, detector_trainable)?;
            let out = forward(&mut tape, config, &bound, &sample.bayer, ForwardMode::Detector)?;
            let label = corner_label(sample.bayer.height, sample.bayer.width, &sample.corners);
            let bce = tape.bce_with_target(out.score, &label)?;
            let peak = tape.dissipation_peak(out.score, &sample.corners, opts.peak_block)?;
            let weighted = tape.scale(peak, opts.lambda_peak)?;
            let loss = tape.add(bce, weighted)?;
            let loss_value = tape.value_f64(loss);
            if !loss_value.is_finite() {
                report.aborted = true;
                report.final_bce = evaluate_detector_bce(config, params, samples)?;
                return Ok(report);
            }
            bce_sum += tape.value_f64(bce);
            peak_sum += tape.value_f64(peak);
            tape.backward(loss)?;
            adam.step(params, &tape, &bound)?;
        }
        let record = TrainEpoch {
            epoch,
            bce: bce_sum / samples.len() as f64,
            peak: peak_sum / samples.len() as f64,
            triplet: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.final_bce = evaluate_detector_bce(config, params, samples)?;
    Ok(report)
}

/// Mean BCE of the current detector against precomputed per-image label
/// maps (forward only, no gradients).
fn evaluate_bce_against(
    config: &NetworkConfig,
    params: &ParamStore,
    images: &[BayerImage],
    labels: &[PseudoLabel],
) -> Result<f64> {
    let mut total = 0.0;
    for (image, label) in images.iter().zip(labels) {
        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let out = forward(&mut tape, config, &bound, image, ForwardMode::Detector)?;
        let bce = tape.bce_with_target(out.score, &label.s_pse)?;
        total += tape.value_f64(bce);
    }
    Ok(total / images.len().max(1) as f64)
}

/// Builds one pseudo-label per image with the current parameters, each
/// from `rounds` homographies (identity first) seeded from the epoch
/// stream.
fn adapted_labels(
    config: &NetworkConfig,
    params: &ParamStore,
    images: &[BayerImage],
    rounds: usize,
    ranges: &TrainingRanges,
    seed: u64,
) -> Result<Vec<PseudoLabel>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|image| {
            let sub = rng.gen::<u64>();
            homographic_adaptation(config, params, image, rounds, sub, ranges)
        })
        .collect()
}

/// Self-supervised detector refinement on unlabeled rasters. At the start
/// of each epoch every image's pseudo-label is rebuilt by homographic
/// adaptation under the current parameters; the epoch then takes one
/// gradient step per image with the same BCE + peak composite as the
/// synthetic phase, using the pseudo-label's own keypoints as peak
/// centers. Descriptor-head parameters stay frozen. `report.warnings`
/// counts image-epochs whose pseudo-label yielded no peak centers.
pub fn train_detector_adapted(
    config: &NetworkConfig,
    params: &mut ParamStore,
    images: &[BayerImage],
    epochs: usize,
    rounds: usize,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::Config("no training images".into()));
    }
    let mut report = TrainReport {
        epochs: Vec::new(),
        aborted: false,
        warnings: 0,
        initial_bce: 0.0,
        final_bce: 0.0,
    };
    let mut adam = Adam::new(opts.adam);
    let mut labels =
        adapted_labels(config, params, images, rounds, &opts.ranges, opts.seed.wrapping_add(1))?;
    report.initial_bce = evaluate_bce_against(config, params, images, &labels)?;
    for epoch in 1..=epochs {
        let start = Instant::now();
        if epoch > 1 {
            labels = adapted_labels(
                config,
                params,
                images,
                rounds,
                &opts.ranges,
                opts.seed.wrapping_add(epoch as u64),
            )?;
        }
        let mut bce_sum = 0.0;
        let mut peak_sum = 0.0;
        for (image, label) in images.iter().zip(&labels) {
            let centers: Vec<(usize, usize)> =
                extract_keypoints(&label.s_pse, label.height, label.width, &opts.detection)
                    .iter()
                    .map(|k| (k.x, k.y))
                    .collect();
            if centers.is_empty() {
                report.warnings += 1;
            }
            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape, detector_trainable)?;
            let out = forward(&mut tape, config, &bound, image, ForwardMode::Detector)?;
            let bce = tape.bce_with_target(out.score, &label.s_pse)?;
            let peak = tape.dissipation_peak(out.score, &centers, opts.peak_block)?;
            let weighted = tape.scale(peak, opts.lambda_peak)?;
            let loss = tape.add(bce, weighted)?;
            let loss_value = tape.value_f64(loss);
            if !loss_value.is_finite() {
                report.aborted = true;
                report.final_bce = evaluate_bce_against(config, params, images, &labels)?;
                return Ok(report);
            }
            bce_sum += tape.value_f64(bce);
            peak_sum += tape.value_f64(peak);
            tape.backward(loss)?;
            adam.step(params, &tape, &bound)?;
        }
        let record = TrainEpoch {
            epoch,
            bce: bce_sum / images.len() as f64,
            peak: peak_sum / images.len() as f64,
            triplet: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.final_bce = evaluate_bce_against(config, params, images, &labels)?;
    Ok(report)
}

/// Builds one descriptor-training pair: the sample's raster and its
/// homography-warped partner (warp-then-mosaic through the RGB source),
/// optionally with an exposure gain on the partner.
fn descriptor_pair(
    sample: &SyntheticSample,
    h: &Homography,
    gain: Option<f32>,
) -> Result<BayerImage> {
    let warped = mosaic(&warp_rgb(&sample.rgb, h)?)?;
    Ok(match gain {
        Some(g) => warped.with_gain(g),
        None => warped,
    })
}

/// Siamese descriptor training: both images of each pair run through the
/// same bound parameter set (weight sharing is identity of parameters),
/// triplets are sampled from the detector's keypoints, and only the
/// descriptor-head parameters receive updates.
pub fn train_descriptor(
    config: &NetworkConfig,
    params: &mut ParamStore,
    samples: &[SyntheticSample],
    epochs: usize,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut report =
        TrainReport { epochs: Vec::new(), aborted: false, warnings: 0, initial_bce: 0.0, final_bce: 0.0 };
    let mut adam = Adam::new(opts.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for epoch in 1..=epochs {
        let start = Instant::now();
        let mut triplet_sum = 0.0;
        let mut steps = 0usize;
        for sample in samples {
            let (ih, iw) = (sample.bayer.height, sample.bayer.width);
            let h = sample_training_homography(&mut rng, iw, ih, &opts.ranges)?;
            let gain = opts.exposure_jitter.then(|| rng.gen_range(1.3..=2.0));
            let partner = descriptor_pair(sample, &h, gain)?;
            let plan_seed: u64 = rng.gen();

            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape, descriptor_trainable)?;
            let out1 = forward(&mut tape, config, &bound, &sample.bayer, ForwardMode::Full)?;
            let out2 = forward(&mut tape, config, &bound, &partner, ForwardMode::Full)?;
            let plan = plan_triplets(
                tape.data(out1.score),
                ih,
                iw,
                (iw, ih),
                &h,
                opts.triplet_k,
                plan_seed,
                &opts.detection,
            )?;
            if plan.shrunk() {
                report.warnings += 1;
            }
            if plan.rows() < 2 {
                continue;
            }
            let desc1 = out1.descriptors.expect("full mode returns descriptors");
            let desc2 = out2.descriptors.expect("full mode returns descriptors");
            let (a, p, n) = triplet_rows(&mut tape, desc1, desc2, &plan)?;
            let loss = triplet_loss(&mut tape, a, p, n, opts.margin)?;
            let loss_value = tape.value_f64(loss);
            if !loss_value.is_finite() {
                report.aborted = true;
                return Ok(report);
            }
            triplet_sum += loss_value;
            steps += 1;
            tape.backward(loss)?;
            adam.step(params, &tape, &bound)?;
        }
        let record = TrainEpoch {
            epoch,
            bce: 0.0,
            peak: 0.0,
            triplet: triplet_sum / steps.max(1) as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(report)
}

/// Builds held-out pairs and measures mean anchor-positive and
/// anchor-negative Euclidean descriptor distances (forward only).
/// Returns (mean d_pos, mean d_neg, rows measured).
pub fn measure_descriptor_distances(
    config: &NetworkConfig,
    params: &ParamStore,
    samples: &[SyntheticSample],
    opts: &TrainOptions,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut rows = 0usize;
    for sample in samples {
        let (ih, iw) = (sample.bayer.height, sample.bayer.width);
        let h = sample_training_homography(&mut rng, iw, ih, &opts.ranges)?;
        let gain = opts.exposure_jitter.then(|| rng.gen_range(1.3..=2.0));
        let partner = descriptor_pair(sample, &h, gain)?;
        let plan_seed: u64 = rng.gen();

        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false)?;
        let out1 = forward(&mut tape, config, &bound, &sample.bayer, ForwardMode::Full)?;
        let out2 = forward(&mut tape, config, &bound, &partner, ForwardMode::Full)?;
        let plan = plan_triplets(
            tape.data(out1.score),
            ih,
            iw,
            (iw, ih),
            &h,
            opts.triplet_k,
            plan_seed,
            &opts.detection,
        )?;
        if plan.rows() == 0 {
            continue;
        }
        let desc1 = out1.descriptors.expect("full mode returns descriptors");
        let desc2 = out2.descriptors.expect("full mode returns descriptors");
        let d1_shape = tape.shape(desc1).to_vec();
        let d2_shape = tape.shape(desc2).to_vec();
        let kps: Vec<Keypoint> =
            plan.anchors.iter().map(|&(x, y)| Keypoint { x, y, score: 0.0 }).collect();
        let anchors = sample_descriptors(tape.data(desc1), &d1_shape, &kps)?;
        let positives = sample_descriptors_bilinear(tape.data(desc2), &d2_shape, &plan.positives)?;
        let negatives = sample_descriptors_bilinear(tape.data(desc2), &d2_shape, &plan.negatives)?;
        for i in 0..plan.rows() {
            let dist = |a: &[f32], b: &[f32]| -> f64 {
                a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum::<f64>().sqrt()
            };
            pos_sum += dist(anchors.row(i), positives.row(i));
            neg_sum += dist(anchors.row(i), negatives.row(i));
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Estimation("no triplet rows could be formed on the held-out pairs".into()));
    }
    Ok((pos_sum / rows as f64, neg_sum / rows as f64, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::with_multiplier(0.25)
    }

    fn tiny_samples(n: usize, size: usize) -> Vec<SyntheticSample> {
        generate_synthetic(42, n, size).unwrap()
    }

    #[test]
    fn corner_label_peaks_at_one_and_decays() {
        let label = corner_label(16, 16, &[(5, 7)]);
        assert_eq!(label[7 * 16 + 5], 1.0);
        let neighbour = label[7 * 16 + 6];
        assert!((neighbour - (-0.5f64).exp() as f32).abs() < 1e-6);
        assert!(label.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Two corners: max, not sum — still bounded by 1.
        let two = corner_label(16, 16, &[(5, 7), (6, 7)]);
        assert!(two.iter().all(|&v| v <= 1.0));
        assert_eq!(two[7 * 16 + 5], 1.0);
        assert_eq!(two[7 * 16 + 6], 1.0);
    }

    #[test]
    fn adaptation_with_identity_equals_raw_score_map() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 3).unwrap();
        let image = tiny_samples(1, 32)[0].bayer.clone();
        let label = homographic_adaptation_with(&cfg, &params, &image, &[Homography::identity()]).unwrap();
        assert_eq!(label.n_used, 1);
        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false).unwrap();
        let out = forward(&mut tape, &cfg, &bound, &image, ForwardMode::Detector).unwrap();
        for (a, b) in label.s_pse.iter().zip(tape.data(out.score)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adaptation_matches_naive_translation_oracle() {
        // Integer translations let the oracle build each un-warped map by
        // shifting with zero fill and counting valid contributions.
        let cfg = tiny_config();
        let params = init_params(&cfg, 4).unwrap();
        let image = tiny_samples(1, 32)[0].bayer.clone();
        let (h, w) = (image.height, image.width);
        let shifts: [(f64, f64); 4] = [(0.0, 0.0), (2.0, 0.0), (0.0, -3.0), (5.0, 4.0)];
        let homs: Vec<Homography> = shifts.iter().map(|&(dx, dy)| Homography::translation(dx, dy)).collect();
        let label = homographic_adaptation_with(&cfg, &params, &image, &homs).unwrap();

        let mut acc = vec![0f64; h * w];
        let mut count = vec![0u32; h * w];
        for &(dx, dy) in &shifts {
            let warped = warp_bayer(&image, &Homography::translation(dx, dy)).unwrap();
            let mut tape = GradTape::new();
            let bound = params.bind(&mut tape, |_| false).unwrap();
            let out = forward(&mut tape, &cfg, &bound, &warped, ForwardMode::Detector).unwrap();
            let score = tape.data(out.score);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    // Pixel (x, y) of the original lands at (x+dx, y+dy).
                    let sx = x + dx as isize;
                    let sy = y + dy as isize;
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc[y as usize * w + x as usize] += f64::from(score[sy as usize * w + sx as usize]);
                        count[y as usize * w + x as usize] += 1;
                    }
                }
            }
        }
        for i in 0..h * w {
            let expect = if count[i] == 0 { 0.0 } else { acc[i] / f64::from(count[i]) };
            assert!(
                (f64::from(label.s_pse[i]) - expect).abs() < 1e-6,
                "pixel {i}: {} vs {expect}",
                label.s_pse[i]
            );
        }
    }

    #[test]
    fn adaptation_of_constant_score_map_is_constant() {
        // Zeroed detection head gives sigmoid(0) = 0.5 everywhere, which
        // any homography set must preserve.
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 5).unwrap();
        for e in params.entries.iter_mut().filter(|e| e.name.starts_with("det")) {
            e.data.fill(0.0);
        }
        let image = tiny_samples(1, 32)[0].bayer.clone();
        let label = homographic_adaptation(&cfg, &params, &image, 4, 9, &TrainingRanges::default()).unwrap();
        assert_eq!(label.n_used, 4);
        for &v in &label.s_pse {
            assert!((v - 0.5).abs() < 1e-6, "expected constant 0.5, got {v}");
        }
    }

    #[test]
    fn triplet_hinge_examples() {
        let mut tape = GradTape::new();
        // Anchor rows: e0, e1. Positive identical to anchor; negative far.
        let a = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let p = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let n = tape.leaf(vec![-1.0, 0.0, 0.0, -1.0], vec![2, 2], false).unwrap();
        // d_pos^2 = 0, d_neg^2 = 4: hinge = [0 - 4 + 1]_+ = 0.
        let loss = triplet_loss(&mut tape, a, p, n, 1.0).unwrap();
        assert_eq!(tape.value_f64(loss), 0.0);
        // d_pos = d_neg: loss = margin exactly.
        let loss2 = triplet_loss(&mut tape, a, p, p, 0.7).unwrap();
        assert!((tape.value_f64(loss2) - 0.7) < 1e-9);
    }

    #[test]
    fn triplet_loss_matches_reference_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let k = rng.gen_range(2..8);
            let dim = rng.gen_range(3..10);
            let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.iter().map(|x| (x / n) as f32).collect()
            };
            let rows = |rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..k).flat_map(|_| unit(rng)).collect()
            };
            let (da, dp, dn) = (rows(&mut rng), rows(&mut rng), rows(&mut rng));
            let batch = TripletBatch {
                anchors: DescMatrix { rows: k, dim, data: da.clone() },
                positives: DescMatrix { rows: k, dim, data: dp.clone() },
                negatives: DescMatrix { rows: k, dim, data: dn.clone() },
                margin: 1.0,
            };
            let mut tape = GradTape::new();
            let a = tape.leaf(da, vec![k, dim], false).unwrap();
            let p = tape.leaf(dp, vec![k, dim], false).unwrap();
            let n = tape.leaf(dn, vec![k, dim], false).unwrap();
            let loss = triplet_loss(&mut tape, a, p, n, 1.0).unwrap();
            assert!((tape.value_f64(loss) - triplet_loss_reference(&batch)).abs() < 1e-6);
        }
    }

    #[test]
    fn triplet_plan_respects_exclusion_and_determinism() {
        // Score map with four well-separated strong peaks.
        let (h, w) = (32, 32);
        let mut score = vec![0.01f32; h * w];
        let peaks = [(6usize, 6usize), (25, 6), (6, 25), (25, 25)];
        for &(x, y) in &peaks {
            score[y * w + x] = 0.9;
        }
        let det = DetectionParams::default();
        let plan = plan_triplets(&score, h, w, (w, h), &Homography::identity(), 4, 7, &det).unwrap();
        let plan2 = plan_triplets(&score, h, w, (w, h), &Homography::identity(), 4, 7, &det).unwrap();
        assert_eq!(plan.anchors, plan2.anchors);
        assert_eq!(plan.negatives, plan2.negatives);
        assert_eq!(plan.rows(), 4);
        assert!(!plan.shrunk());
        for i in 0..plan.rows() {
            // Identity homography: positives coincide with anchors.
            assert_eq!(plan.positives[i].0 as usize, plan.anchors[i].0);
            assert_eq!(plan.positives[i].1 as usize, plan.anchors[i].1);
            let dx = f64::from(plan.negatives[i].0 - plan.positives[i].0);
            let dy = f64::from(plan.negatives[i].1 - plan.positives[i].1);
            assert!((dx * dx + dy * dy).sqrt() >= NEGATIVE_EXCLUSION_PX);
        }
    }

    #[test]
    fn triplet_plan_with_two_keypoints_uses_the_other_as_negative() {
        let (h, w) = (24, 24);
        let mut score = vec![0.01f32; h * w];
        score[5 * w + 5] = 0.9;
        score[18 * w + 18] = 0.8;
        let plan =
            plan_triplets(&score, h, w, (w, h), &Homography::identity(), 2, 0, &DetectionParams::default())
                .unwrap();
        assert_eq!(plan.rows(), 2);
        assert_eq!(plan.negatives[0], plan.positives[1]);
        assert_eq!(plan.negatives[1], plan.positives[0]);
    }

    #[test]
    fn triplet_plan_shrinks_when_projections_leave_frame() {
        let (h, w) = (24, 24);
        let mut score = vec![0.01f32; h * w];
        score[5 * w + 5] = 0.9;
        score[18 * w + 18] = 0.8;
        // Push everything past the right edge except nothing survives.
        let plan =
            plan_triplets(&score, h, w, (w, h), &Homography::translation(100.0, 0.0), 2, 0, &DetectionParams::default())
                .unwrap();
        assert_eq!(plan.rows(), 0);
        assert!(plan.shrunk());
    }

    #[test]
    fn identity_pair_with_exact_pixel_positives_has_zero_positive_distance() {
        // A descriptor map with distinct unit rows per pixel; identity
        // homography makes each positive the anchor's own pixel. The two
        // peaks sit more than the 8 px exclusion radius apart so each can
        // serve as the other's negative.
        let (c, h, w) = (2usize, 16usize, 16usize);
        let mut desc = vec![0f32; c * h * w];
        for p in 0..h * w {
            let angle = p as f32 * 0.37;
            desc[p] = angle.cos();
            desc[h * w + p] = angle.sin();
        }
        let mut score = vec![0.01f32; h * w];
        score[2 * w + 2] = 0.9;
        score[13 * w + 13] = 0.8;
        let plan =
            plan_triplets(&score, h, w, (w, h), &Homography::identity(), 2, 1, &DetectionParams { nms_radius: 2, ..Default::default() })
                .unwrap();
        assert_eq!(plan.rows(), 2);
        let mut tape = GradTape::new();
        let d1 = tape.leaf(desc.clone(), vec![c, h, w], false).unwrap();
        let d2 = tape.leaf(desc, vec![c, h, w], false).unwrap();
        let (a, p, n) = triplet_rows(&mut tape, d1, d2, &plan).unwrap();
        let dpos = tape.rows_squared_distance(a, p).unwrap();
        for &v in tape.data(dpos) {
            assert!(v.abs() < 1e-10, "positive distance should vanish, got {v}");
        }
        let dneg = tape.rows_squared_distance(a, n).unwrap();
        assert!(tape.data(dneg).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut store = ParamStore {
            entries: vec![crate::network::ParamEntry { name: "w".into(), shape: vec![1], data: vec![1.0] }],
        };
        let mut tape = GradTape::new();
        let bound = store.bind(&mut tape, |_| true).unwrap();
        let s = tape.sum(bound.ids[0]).unwrap();
        let loss = tape.scale(s, 2.0).unwrap();
        tape.backward(loss).unwrap();
        let mut adam = Adam::new(AdamOptions::default());
        adam.step(&mut store, &tape, &bound).unwrap();
        // g = 2: m_hat = 2, v_hat = 4, update = lr * 2 / (2 + eps).
        // Parameters are stored as f32, so allow quantization headroom.
        let expect = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((f64::from(store.entries[0].data[0]) - expect).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 6).unwrap();
        let before = params.clone();
        let samples = tiny_samples(2, 32);
        let opts = TrainOptions {
            adam: AdamOptions { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        let report = train_detector(&cfg, &mut params, &samples, 1, &opts, |_| {}).unwrap();
        assert!(!report.aborted);
        assert_eq!(params, before);
    }

    #[test]
    fn detector_training_freezes_descriptor_head_and_reduces_bce() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 7).unwrap();
        let before = params.clone();
        let samples = tiny_samples(6, 32);
        let opts = TrainOptions::default();
        let report = train_detector(&cfg, &mut params, &samples, 3, &opts, |_| {}).unwrap();
        assert!(!report.aborted);
        assert_eq!(report.epochs.len(), 3);
        for (a, b) in params.entries.iter().zip(&before.entries) {
            if a.name.starts_with("desc") {
                assert_eq!(a.data, b.data, "{} must stay frozen", a.name);
            }
        }
        assert!(
            params.entries.iter().zip(&before.entries).any(|(a, b)| a.data != b.data),
            "detector parameters must move"
        );
        assert!(
            report.final_bce < report.initial_bce,
            "BCE should drop: {} -> {}",
            report.initial_bce,
            report.final_bce
        );
    }

    #[test]
    fn adapted_training_freezes_descriptor_head_and_moves_detector() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 17).unwrap();
        let before = params.clone();
        let images: Vec<BayerImage> = tiny_samples(4, 32).into_iter().map(|s| s.bayer).collect();
        let opts = TrainOptions::default();
        let report = train_detector_adapted(&cfg, &mut params, &images, 2, 3, &opts, |_| {}).unwrap();
        assert!(!report.aborted);
        assert_eq!(report.epochs.len(), 2);
        assert!(report.initial_bce.is_finite() && report.final_bce.is_finite());
        for record in &report.epochs {
            assert_eq!(record.triplet, 0.0);
        }
        for (a, b) in params.entries.iter().zip(&before.entries) {
            if a.name.starts_with("desc") {
                assert_eq!(a.data, b.data, "{} must stay frozen", a.name);
            }
        }
        assert!(
            params.entries.iter().zip(&before.entries).any(|(a, b)| a.data != b.data),
            "detector parameters must move"
        );
    }

    #[test]
    fn adapted_training_is_seed_deterministic() {
        let cfg = tiny_config();
        let images: Vec<BayerImage> = tiny_samples(2, 32).into_iter().map(|s| s.bayer).collect();
        let opts = TrainOptions { seed: 5, ..Default::default() };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut params = init_params(&cfg, 17).unwrap();
            train_detector_adapted(&cfg, &mut params, &images, 1, 2, &opts, |_| {}).unwrap();
            runs.push(params);
        }
        for (a, b) in runs[0].entries.iter().zip(&runs[1].entries) {
            assert_eq!(a.data, b.data, "{} must replay identically", a.name);
        }
    }

    #[test]
    fn adapted_training_zero_lr_keeps_parameters() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 17).unwrap();
        let before = params.clone();
        let images: Vec<BayerImage> = tiny_samples(2, 32).into_iter().map(|s| s.bayer).collect();
        let opts = TrainOptions {
            adam: AdamOptions { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        train_detector_adapted(&cfg, &mut params, &images, 1, 2, &opts, |_| {}).unwrap();
        for (a, b) in params.entries.iter().zip(&before.entries) {
            assert_eq!(a.data, b.data, "{} must be untouched at lr 0", a.name);
        }
    }

    #[test]
    fn descriptor_training_updates_only_descriptor_head() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 8).unwrap();
        let before = params.clone();
        let samples = tiny_samples(3, 32);
        let opts = TrainOptions { triplet_k: 8, ..Default::default() };
        let report = train_descriptor(&cfg, &mut params, &samples, 1, &opts, |_| {}).unwrap();
        assert!(!report.aborted);
        let mut desc_moved = false;
        for (a, b) in params.entries.iter().zip(&before.entries) {
            if a.name.starts_with("desc") {
                desc_moved |= a.data != b.data;
            } else {
                assert_eq!(a.data, b.data, "{} must stay frozen during descriptor phase", a.name);
            }
        }
        assert!(desc_moved, "descriptor parameters must move");
    }

    #[test]
    fn siamese_branches_share_parameters_exactly() {
        // One bound parameter set drives both branches, so identical
        // inputs give bit-identical outputs within a single tape.
        let cfg = tiny_config();
        let params = init_params(&cfg, 10).unwrap();
        let image = tiny_samples(1, 32)[0].bayer.clone();
        let mut tape = GradTape::new();
        let bound = params.bind(&mut tape, |_| false).unwrap();
        let o1 = forward(&mut tape, &cfg, &bound, &image, ForwardMode::Full).unwrap();
        let o2 = forward(&mut tape, &cfg, &bound, &image, ForwardMode::Full).unwrap();
        let s1 = tape.data(o1.score).to_vec();
        let s2 = tape.data(o2.score).to_vec();
        assert!(s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()));
        let d1 = tape.data(o1.descriptors.unwrap()).to_vec();
        let d2 = tape.data(o2.descriptors.unwrap()).to_vec();
        assert!(d1.iter().zip(&d2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn measure_descriptor_distances_reports_rows() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 12).unwrap();
        let samples = tiny_samples(2, 32);
        let opts = TrainOptions { triplet_k: 8, ..Default::default() };
        let (dpos, dneg, rows) = measure_descriptor_distances(&cfg, &params, &samples, &opts, 99).unwrap();
        assert!(rows > 0);
        assert!(dpos >= 0.0 && dneg >= 0.0);
        // Unit-norm rows bound L2 distances by 2.
        assert!(dpos <= 2.0 + 1e-6 && dneg <= 2.0 + 1e-6);
    }
}
