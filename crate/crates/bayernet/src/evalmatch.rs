//! Keypoints, descriptor matching, and the evaluation protocols:
//! repeatability, homography-estimation metrics (MMA / MHA / MS), and the
//! transform-invariance suite.

use crate::bayer::{mosaic, BayerImage, RgbImage};
use crate::geometry::{
    estimate_homography_ransac, mean_corner_error, sample_eval_transform, warp_bayer, warp_rgb, Homography,
    TransformFamily,
};
use crate::network::{forward, ForwardMode, NetworkConfig, ParamStore};
use crate::tensor::GradTape;
use crate::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One detected keypoint at integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f32,
}

/// Keypoint extraction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionParams {
    pub threshold: f32,
    pub nms_radius: usize,
    pub max_keypoints: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self { threshold: 0.1, nms_radius: 4, max_keypoints: 2048 }
    }
}

/// Strict-local-maximum extraction: a pixel is kept when its score beats
/// every other pixel in the Chebyshev window of the given radius and is at
/// least the threshold. The result is sorted by descending score (ties by
/// (y, x)) and truncated to `max_keypoints`.
pub fn extract_keypoints(score: &[f32], height: usize, width: usize, params: &DetectionParams) -> Vec<Keypoint> {
    let r = params.nms_radius as isize;
    let mut kps = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let v = score[y * width + x];
            if v < params.threshold {
                continue;
            }
            let mut is_max = true;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    if score[ny as usize * width + nx as usize] >= v {
                        is_max = false;
                        break 'scan;
                    }
                }
            }
            if is_max {
                kps.push(Keypoint { x, y, score: v });
            }
        }
    }
    kps.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    kps.truncate(params.max_keypoints);
    kps
}

/// Row-major matrix of descriptor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DescMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DescMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn renormalize_rows(mat: &mut DescMatrix) {
    for i in 0..mat.rows {
        let row = &mut mat.data[i * mat.dim..(i + 1) * mat.dim];
        let norm: f64 = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row.iter_mut() {
                *v = (f64::from(*v) / norm) as f32;
            }
        }
    }
}

/// Looks up the descriptor column at each keypoint's integer coordinates,
/// re-normalizing each row to unit length.
pub fn sample_descriptors(desc: &[f32], shape: &[usize], kps: &[Keypoint]) -> Result<DescMatrix> {
    let [c, h, w] = shape else {
        return Err(Error::Dimension { op: "sample_descriptors", detail: format!("need [C,H,W], got {shape:?}") });
    };
    let (c, h, w) = (*c, *h, *w);
    let mut data = Vec::with_capacity(kps.len() * c);
    for kp in kps {
        if kp.x >= w || kp.y >= h {
            return Err(Error::Dimension {
                op: "sample_descriptors",
                detail: format!("keypoint ({}, {}) outside {w}x{h} map", kp.x, kp.y),
            });
        }
        for ch in 0..c {
            data.push(desc[ch * h * w + kp.y * w + kp.x]);
        }
    }
    let mut mat = DescMatrix { rows: kps.len(), dim: c, data };
    renormalize_rows(&mut mat);
    Ok(mat)
}

/// Bilinear descriptor lookup at fractional coordinates (zero outside the
/// frame), re-normalized per row.
pub fn sample_descriptors_bilinear(desc: &[f32], shape: &[usize], locs: &[(f32, f32)]) -> Result<DescMatrix> {
    let [c, h, w] = shape else {
        return Err(Error::Dimension {
            op: "sample_descriptors_bilinear",
            detail: format!("need [C,H,W], got {shape:?}"),
        });
    };
    let (c, h, w) = (*c, *h, *w);
    let mut data = Vec::with_capacity(locs.len() * c);
    for &(x, y) in locs {
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = f64::from(x) - x0 as f64;
        let fy = f64::from(y) - y0 as f64;
        for ch in 0..c {
            let plane = &desc[ch * h * w..(ch + 1) * h * w];
            let at = |yy: isize, xx: isize| -> f64 {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    f64::from(plane[yy as usize * w + xx as usize])
                }
            };
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            data.push(v as f32);
        }
    }
    let mut mat = DescMatrix { rows: locs.len(), dim: c, data };
    renormalize_rows(&mut mat);
    Ok(mat)
}

/// Nearest-neighbor matches between two descriptor sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Index pairs (row in A, row in B).
    pub pairs: Vec<(usize, usize)>,
    /// L2 descriptor distance per pair.
    pub distances: Vec<f32>,
}

fn squared_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum()
}

fn nearest_rows(from: &DescMatrix, to: &DescMatrix) -> Vec<(usize, f64)> {
    (0..from.rows)
        .map(|i| {
            let mut best = (0usize, f64::INFINITY);
            for j in 0..to.rows {
                let d = squared_dist(from.row(i), to.row(j));
                // Strict comparison keeps the lowest index on ties.
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Brute-force L2 matching: each row of A pairs with its nearest row of B
/// (ties to the lowest index). With `cross_check` only mutual nearest
/// neighbours survive, making the result one-to-one.
pub fn match_bruteforce(a: &DescMatrix, b: &DescMatrix, cross_check: bool) -> Result<MatchResult> {
    if a.dim != b.dim {
        return Err(Error::Dimension {
            op: "match_bruteforce",
            detail: format!("descriptor dims differ: {} vs {}", a.dim, b.dim),
        });
    }
    if a.rows == 0 || b.rows == 0 {
        return Ok(MatchResult { pairs: Vec::new(), distances: Vec::new() });
    }
    let nn_a = nearest_rows(a, b);
    let mut pairs = Vec::new();
    let mut distances = Vec::new();
    if cross_check {
        let nn_b = nearest_rows(b, a);
        for (i, &(j, d)) in nn_a.iter().enumerate() {
            if nn_b[j].0 == i {
                pairs.push((i, j));
                distances.push(d.sqrt() as f32);
            }
        }
    } else {
        for (i, &(j, d)) in nn_a.iter().enumerate() {
            pairs.push((i, j));
            distances.push(d.sqrt() as f32);
        }
    }
    Ok(MatchResult { pairs, distances })
}

fn in_frame(x: f64, y: f64, frame: (usize, usize)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= frame.0 as f64 - 1.0 && y <= frame.1 as f64 - 1.0
}

/// Two-sided repeatability under a known homography. Only keypoints whose
/// projection lands in the other frame participate (shared-region
/// convention); a valid point repeats when some valid counterpart lies
/// within `eps` of its projection, counterparts not being consumed.
/// `None` when neither side has a valid point. Frames are `(width, height)`.
pub fn repeatability(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h: &Homography,
    eps: f64,
    frame_a: (usize, usize),
    frame_b: (usize, usize),
) -> Result<Option<f64>> {
    let inv = h.inverse()?;
    let proj_a: Vec<Option<(f64, f64)>> =
        kps_a.iter().map(|k| h.apply(k.x as f64, k.y as f64).filter(|&(x, y)| in_frame(x, y, frame_b))).collect();
    let proj_b: Vec<Option<(f64, f64)>> =
        kps_b.iter().map(|k| inv.apply(k.x as f64, k.y as f64).filter(|&(x, y)| in_frame(x, y, frame_a))).collect();
    let valid_a: Vec<(f64, f64)> = proj_a.iter().flatten().copied().collect();
    let valid_b_src: Vec<(f64, f64)> = kps_b
        .iter()
        .zip(&proj_b)
        .filter(|(_, p)| p.is_some())
        .map(|(k, _)| (k.x as f64, k.y as f64))
        .collect();
    let valid_a_src: Vec<(f64, f64)> = kps_a
        .iter()
        .zip(&proj_a)
        .filter(|(_, p)| p.is_some())
        .map(|(k, _)| (k.x as f64, k.y as f64))
        .collect();
    let valid_b_proj: Vec<(f64, f64)> = proj_b.iter().flatten().copied().collect();
    let total = valid_a.len() + valid_b_proj.len();
    if total == 0 {
        return Ok(None);
    }
    let close = |p: (f64, f64), set: &[(f64, f64)]| {
        set.iter().any(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() <= eps)
    };
    // A-side: compare projections of A against B points, in frame B.
    let repeats_a = valid_a.iter().filter(|&&p| close(p, &valid_b_src)).count();
    // B-side: compare back-projections of B against A points, in frame A.
    let repeats_b = valid_b_proj.iter().filter(|&&p| close(p, &valid_a_src)).count();
    Ok(Some((repeats_a + repeats_b) as f64 / total as f64))
}

/// Everything needed to evaluate one image pair.
#[derive(Debug, Clone)]
pub struct PairObservation {
    pub kps1: Vec<Keypoint>,
    pub kps2: Vec<Keypoint>,
    pub desc1: DescMatrix,
    pub desc2: DescMatrix,
    pub truth: Homography,
    /// (width, height) of each frame.
    pub frame1: (usize, usize),
    pub frame2: (usize, usize),
}

/// Per-pair evaluation breakdown.
#[derive(Debug, Clone)]
pub struct PairMetrics {
    pub matches: usize,
    pub correct: usize,
    pub inliers: usize,
    /// Mean frame-corner error of the RANSAC estimate vs the ground truth;
    /// infinite when estimation failed.
    pub corner_error: f64,
    pub repeatability: Option<f64>,
    /// Minimum keypoint count over the two shared-region sets.
    pub shared_min_keypoints: usize,
    pub mha_accurate: bool,
}

/// Aggregated evaluation metrics.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub repeatability: f64,
    pub mma: f64,
    pub mha: f64,
    pub ms: f64,
    pub eps_rep: f64,
    pub eps_hom: f64,
    pub total_keypoints: usize,
    pub total_matches: usize,
    pub total_inliers: usize,
    pub pairs_evaluated: usize,
    pub pairs_with_matches: usize,
}

impl MetricsReport {
    /// RANSAC inliers over total matches (0 when there are no matches).
    pub fn inlier_ratio(&self) -> f64 {
        if self.total_matches == 0 {
            0.0
        } else {
            self.total_inliers as f64 / self.total_matches as f64
        }
    }
}

/// Evaluation thresholds and RANSAC budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsOptions {
    pub eps_rep: f64,
    pub eps_hom: f64,
    pub ransac_iters: usize,
    pub ransac_seed: u64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self { eps_rep: 3.0, eps_hom: 5.0, ransac_iters: 2000, ransac_seed: 0 }
    }
}

fn count_shared(kps: &[Keypoint], h: &Homography, other: (usize, usize)) -> usize {
    kps.iter()
        .filter(|k| h.apply(k.x as f64, k.y as f64).map_or(false, |(x, y)| in_frame(x, y, other)))
        .count()
}

/// Evaluates pairs against their ground-truth homographies.
///
/// MMA: mean over pairs (with at least one match) of the fraction of
/// matches whose reprojection error is below `eps_hom`. MHA: fraction of
/// all pairs whose RANSAC homography maps the frame corners with mean
/// error below `eps_hom` (estimation failure counts as inaccurate). MS:
/// mean over the same pairs as MMA of correct matches over the minimum
/// shared-region keypoint count. Repeatability uses `eps_rep`.
pub fn homography_metrics(pairs: &[PairObservation], opts: &MetricsOptions) -> Result<(MetricsReport, Vec<PairMetrics>)> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut mma_sum = 0.0;
    let mut ms_sum = 0.0;
    let mut ms_pairs = 0usize;
    let mut rep_sum = 0.0;
    let mut rep_pairs = 0usize;
    let mut accurate = 0usize;
    let mut with_matches = 0usize;
    let mut total_matches = 0usize;
    let mut total_inliers = 0usize;
    let mut total_keypoints = 0usize;
    for (idx, pair) in pairs.iter().enumerate() {
        total_keypoints += pair.kps1.len() + pair.kps2.len();
        let matches = match_bruteforce(&pair.desc1, &pair.desc2, true)?;
        let m = matches.pairs.len();
        let correct = matches
            .pairs
            .iter()
            .filter(|&&(i, j)| {
                let k1 = &pair.kps1[i];
                let k2 = &pair.kps2[j];
                pair.truth.apply(k1.x as f64, k1.y as f64).map_or(false, |(px, py)| {
                    ((px - k2.x as f64).powi(2) + (py - k2.y as f64).powi(2)).sqrt() < opts.eps_hom
                })
            })
            .count();
        let coords: Vec<((f64, f64), (f64, f64))> = matches
            .pairs
            .iter()
            .map(|&(i, j)| {
                (
                    (pair.kps1[i].x as f64, pair.kps1[i].y as f64),
                    (pair.kps2[j].x as f64, pair.kps2[j].y as f64),
                )
            })
            .collect();
        let (inliers, corner_error) = match estimate_homography_ransac(
            &coords,
            opts.eps_hom,
            opts.ransac_iters,
            opts.ransac_seed.wrapping_add(idx as u64),
        ) {
            Ok(res) => (
                res.inlier_count(),
                mean_corner_error(&res.homography, &pair.truth, pair.frame1.0, pair.frame1.1),
            ),
            Err(_) => (0, f64::INFINITY),
        };
        let mha_accurate = corner_error < opts.eps_hom;
        let shared1 = count_shared(&pair.kps1, &pair.truth, pair.frame2);
        let shared2 = count_shared(&pair.kps2, &pair.truth.inverse()?, pair.frame1);
        let shared_min = shared1.min(shared2);
        let rep = repeatability(&pair.kps1, &pair.kps2, &pair.truth, opts.eps_rep, pair.frame1, pair.frame2)?;
        if let Some(r) = rep {
            rep_sum += r;
            rep_pairs += 1;
        }
        if m > 0 {
            with_matches += 1;
            mma_sum += correct as f64 / m as f64;
            if shared_min > 0 {
                ms_sum += (correct as f64 / shared_min as f64).min(1.0);
                ms_pairs += 1;
            }
        }
        if mha_accurate {
            accurate += 1;
        }
        total_matches += m;
        total_inliers += inliers;
        rows.push(PairMetrics {
            matches: m,
            correct,
            inliers,
            corner_error,
            repeatability: rep,
            shared_min_keypoints: shared_min,
            mha_accurate,
        });
    }
    let report = MetricsReport {
        repeatability: if rep_pairs > 0 { rep_sum / rep_pairs as f64 } else { 0.0 },
        mma: if with_matches > 0 { mma_sum / with_matches as f64 } else { 0.0 },
        mha: if pairs.is_empty() { 0.0 } else { accurate as f64 / pairs.len() as f64 },
        ms: if ms_pairs > 0 { ms_sum / ms_pairs as f64 } else { 0.0 },
        eps_rep: opts.eps_rep,
        eps_hom: opts.eps_hom,
        total_keypoints,
        total_matches,
        total_inliers,
        pairs_evaluated: pairs.len(),
        pairs_with_matches: with_matches,
    };
    Ok((report, rows))
}

/// Runs the network on one image and returns keypoints plus their
/// descriptors.
pub fn describe_image(
    cfg: &NetworkConfig,
    params: &ParamStore,
    image: &BayerImage,
    det: &DetectionParams,
) -> Result<(Vec<Keypoint>, DescMatrix)> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, |_| false)?;
    let out = forward(&mut tape, cfg, &bound, image, ForwardMode::Full)?;
    let shape = tape.shape(out.score).to_vec();
    let kps = extract_keypoints(tape.data(out.score), shape[1], shape[2], det);
    let desc_id = out.descriptors.expect("full mode always returns descriptors");
    let desc_shape = tape.shape(desc_id).to_vec();
    let desc = sample_descriptors(tape.data(desc_id), &desc_shape, &kps)?;
    Ok((kps, desc))
}

/// Runs the detector head only and returns keypoints.
pub fn detect_image(
    cfg: &NetworkConfig,
    params: &ParamStore,
    image: &BayerImage,
    det: &DetectionParams,
) -> Result<Vec<Keypoint>> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, |_| false)?;
    let out = forward(&mut tape, cfg, &bound, image, ForwardMode::Detector)?;
    let shape = tape.shape(out.score).to_vec();
    Ok(extract_keypoints(tape.data(out.score), shape[1], shape[2], det))
}

/// An evaluation image: the Bayer raster plus, when available, the RGB
/// source used for warp-then-mosaic pair construction.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub bayer: BayerImage,
    pub rgb: Option<RgbImage>,
}

/// Builds the transformed partner image: warp-then-mosaic when RGB is
/// available, direct raster warp otherwise, then the intensity gain with
/// clamping to [0, 1].
pub fn transformed_partner(image: &EvalImage, h: &Homography, gain: f32) -> Result<BayerImage> {
    let mut warped = match &image.rgb {
        Some(rgb) => mosaic(&warp_rgb(rgb, h)?)?,
        None => warp_bayer(&image.bayer, h)?,
    };
    if gain != 1.0 {
        for v in &mut warped.data {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    Ok(warped)
}

/// Per-family invariance evaluation: each image is paired with one sampled
/// transform of the family and scored with [`homography_metrics`].
pub fn invariance_suite(
    cfg: &NetworkConfig,
    params: &ParamStore,
    images: &[EvalImage],
    families: &[TransformFamily],
    seed: u64,
    det: &DetectionParams,
    opts: &MetricsOptions,
) -> Result<Vec<(TransformFamily, MetricsReport)>> {
    let mut out = Vec::new();
    for (fi, &family) in families.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(fi as u64));
        let mut pairs = Vec::new();
        for image in images {
            let (h, w) = (image.bayer.height, image.bayer.width);
            let transform = sample_eval_transform(&mut rng, w, h, family)?;
            let partner = transformed_partner(image, &transform.homography, transform.gain)?;
            let (kps1, desc1) = describe_image(cfg, params, &image.bayer, det)?;
            let (kps2, desc2) = describe_image(cfg, params, &partner, det)?;
            pairs.push(PairObservation {
                kps1,
                kps2,
                desc1,
                desc2,
                truth: transform.homography,
                frame1: (w, h),
                frame2: (w, h),
            });
        }
        let (report, _) = homography_metrics(&pairs, opts)?;
        out.push((family, report));
    }
    Ok(out)
}
