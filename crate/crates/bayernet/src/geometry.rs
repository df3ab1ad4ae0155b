//! Planar homographies: sampling for training and evaluation, image
//! warping, point projection, and robust estimation (normalized DLT inside
//! RANSAC).
//!
//! Conventions: a homography maps source coordinates to target coordinates,
//! `p2 = H(p1)`, with `(x, y)` in pixel units. Warping an image by `H`
//! produces the target view by inverse mapping: each output pixel samples
//! the source at `H^-1(p)` with bilinear interpolation and zero fill
//! outside the frame.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayer::{BayerImage, RgbImage};
use crate::{Error, Result};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// Invertible 3x3 projective transform, stored normalized so the bottom
/// right entry is 1 whenever it is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Validates invertibility and normalizes the scale.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.determinant().abs() < DET_EPS {
            return Err(Error::Estimation(format!(
                "singular homography (det {:.3e})",
                m.determinant()
            )));
        }
        let mut m = m;
        if m[(2, 2)].abs() > W_EPS {
            m /= m[(2, 2)];
        }
        Ok(Self { m })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = dx;
        m[(1, 2)] = dy;
        Self { m }
    }

    pub fn scaling(s: f64) -> Result<Self> {
        Self::from_matrix(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    /// Applies `self` after `inner`: `(self ∘ inner)(p) = self(inner(p))`.
    pub fn compose(&self, inner: &Homography) -> Result<Homography> {
        Self::from_matrix(self.m * inner.m)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = self
            .m
            .try_inverse()
            .ok_or_else(|| Error::Estimation("homography not invertible".into()))?;
        Self::from_matrix(inv)
    }

    /// Projects one point; `None` when the homogeneous w component vanishes.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let p = self.m * Vector3::new(x, y, 1.0);
        if p.z.abs() < W_EPS {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }

    /// Parses nine whitespace-separated floats, row-major.
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("bad homography entry {t:?}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Data(format!("homography needs 9 entries, got {}", vals.len())));
        }
        let m = Matrix3::from_row_slice(&vals);
        Self::from_matrix(m).map_err(|_| Error::Data("homography matrix is singular".into()))
    }

    /// Nine whitespace-separated floats, row-major, one matrix row per line.
    pub fn to_text(&self) -> String {
        (0..3)
            .map(|r| format!("{} {} {}", self.m[(r, 0)], self.m[(r, 1)], self.m[(r, 2)]))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Projects points through `H`; entries with a vanishing w component are
/// flagged `None`.
pub fn project_points(pts: &[(f64, f64)], h: &Homography) -> Vec<Option<(f64, f64)>> {
    pts.iter().map(|&(x, y)| h.apply(x, y)).collect()
}

/// Mean distance between the projections of the four frame corners under
/// two homographies; infinite when either projection degenerates.
pub fn mean_corner_error(a: &Homography, b: &Homography, width: usize, height: usize) -> f64 {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut total = 0.0;
    for (x, y) in corners {
        match (a.apply(x, y), b.apply(x, y)) {
            (Some(pa), Some(pb)) => total += ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt(),
            _ => return f64::INFINITY,
        }
    }
    total / 4.0
}

fn bilinear(src: &[f32], h: usize, w: usize, sx: f64, sy: f64) -> f32 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            f64::from(src[yy as usize * w + xx as usize])
        }
    };
    let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * sample(y0 + 1.0, x0) + fx * sample(y0 + 1.0, x0 + 1.0));
    v as f32
}

/// Warps one plane by `h_mat` using inverse mapping with bilinear
/// interpolation; samples falling outside the source read zero.
pub fn warp_plane(src: &[f32], height: usize, width: usize, h_mat: &Homography) -> Result<Vec<f32>> {
    let inv = h_mat.inverse()?;
    let mut out = vec![0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            if let Some((sx, sy)) = inv.apply(x as f64, y as f64) {
                out[y * width + x] = bilinear(src, height, width, sx, sy);
            }
        }
    }
    Ok(out)
}

/// Warps a Bayer raster directly (the CFA phase is not re-mosaiced).
pub fn warp_bayer(img: &BayerImage, h_mat: &Homography) -> Result<BayerImage> {
    let data = warp_plane(&img.data, img.height, img.width, h_mat)?;
    BayerImage::new(img.height, img.width, data)
}

/// Warps each RGB plane independently.
pub fn warp_rgb(img: &RgbImage, h_mat: &Homography) -> Result<RgbImage> {
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        data.extend(warp_plane(img.plane(c), img.height, img.width, h_mat)?);
    }
    RgbImage::new(img.height, img.width, data)
}

/// Raw transform parameters; the homography acts about the image center as
/// translate ∘ rotate ∘ scale ∘ perspective (perspective applied first).
#[derive(Debug, Clone, Copy)]
pub struct TransformParams {
    /// Homogeneous distortion reaching the given fraction at the frame edge.
    pub perspective: (f64, f64),
    /// Rotation angle in radians, counterclockwise in (x right, y down).
    pub rotation: f64,
    /// Isotropic scale factor.
    pub scale: f64,
    /// Translation as a fraction of the frame extent.
    pub translation: (f64, f64),
}

impl TransformParams {
    pub fn neutral() -> Self {
        Self { perspective: (0.0, 0.0), rotation: 0.0, scale: 1.0, translation: (0.0, 0.0) }
    }

    /// Builds the homography for a `width` x `height` frame.
    pub fn build(&self, width: usize, height: usize) -> Result<Homography> {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let half_x = cx.max(0.5);
        let half_y = cy.max(0.5);
        let center = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let center_inv = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        // Perspective on centered coordinates: the homogeneous term reaches
        // 1 ± fraction at the frame edges.
        let persp = Matrix3::new(
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            self.perspective.0 / half_x, self.perspective.1 / half_y, 1.0,
        );
        let scale = Matrix3::new(self.scale, 0.0, 0.0, 0.0, self.scale, 0.0, 0.0, 0.0, 1.0);
        let (s, c) = self.rotation.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let trans = Matrix3::new(
            1.0, 0.0, self.translation.0 * (width as f64 - 1.0),
            0.0, 1.0, self.translation.1 * (height as f64 - 1.0),
            0.0, 0.0, 1.0,
        );
        Homography::from_matrix(trans * center * rot * scale * persp * center_inv)
    }
}

/// Half-ranges for the truncated-normal training distribution. Each
/// parameter is drawn centered on its neutral value with σ = half_range / 2
/// and clamped at ±2σ (= ± the half-range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRanges {
    pub perspective: f64,
    pub rotation: f64,
    pub scale: f64,
    pub translation: f64,
}

impl Default for TrainingRanges {
    fn default() -> Self {
        Self { perspective: 0.2, rotation: 0.3, scale: 0.2, translation: 0.15 }
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, center: f64, half_range: f64) -> f64 {
    if half_range == 0.0 {
        return center;
    }
    let z: f64 = rng.sample(StandardNormal);
    (center + z * half_range / 2.0).clamp(center - half_range, center + half_range)
}

pub(crate) fn sample_training_params(rng: &mut ChaCha8Rng, ranges: &TrainingRanges) -> TransformParams {
    TransformParams {
        perspective: (
            truncated_normal(rng, 0.0, ranges.perspective),
            truncated_normal(rng, 0.0, ranges.perspective),
        ),
        rotation: truncated_normal(rng, 0.0, ranges.rotation),
        scale: truncated_normal(rng, 1.0, ranges.scale),
        translation: (
            truncated_normal(rng, 0.0, ranges.translation),
            truncated_normal(rng, 0.0, ranges.translation),
        ),
    }
}

/// Samples a training homography from the truncated-normal distribution;
/// degenerate draws are resampled a bounded number of times.
pub fn sample_training_homography(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    ranges: &TrainingRanges,
) -> Result<Homography> {
    for _ in 0..32 {
        let params = sample_training_params(rng, ranges);
        if let Ok(h) = params.build(width, height) {
            return Ok(h);
        }
    }
    Err(Error::Estimation("could not sample a non-degenerate homography".into()))
}

/// Evaluation transform families with their fixed parameter ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformFamily {
    /// Intensity gain in [1.3, 2.0]; the geometric transform is identity.
    Exposure,
    /// Perspective distortion and translation, each within ±30%.
    Perspective,
    /// Rotation angle in [45°, 90°].
    Rotation,
    /// Isotropic scale in [0.6, 1.4].
    Scale,
}

impl TransformFamily {
    pub const ALL: [TransformFamily; 4] =
        [TransformFamily::Exposure, TransformFamily::Perspective, TransformFamily::Rotation, TransformFamily::Scale];

    pub fn name(&self) -> &'static str {
        match self {
            TransformFamily::Exposure => "exposure",
            TransformFamily::Perspective => "perspective",
            TransformFamily::Rotation => "rotation",
            TransformFamily::Scale => "scale",
        }
    }
}

/// One sampled evaluation transform: a homography plus an intensity gain
/// (gain 1.0 for the geometric families).
#[derive(Debug, Clone, Copy)]
pub struct EvalTransform {
    pub homography: Homography,
    pub gain: f32,
}

/// Samples one transform of the family, uniform over its stated range.
pub fn sample_eval_transform(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    family: TransformFamily,
) -> Result<EvalTransform> {
    let mut params = TransformParams::neutral();
    let mut gain = 1.0f32;
    match family {
        TransformFamily::Exposure => gain = rng.gen_range(1.3..=2.0),
        TransformFamily::Perspective => {
            params.perspective = (rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3));
            params.translation = (rng.gen_range(-0.3..=0.3), rng.gen_range(-0.3..=0.3));
        }
        TransformFamily::Rotation => {
            params.rotation = rng.gen_range(45f64.to_radians()..=90f64.to_radians());
        }
        TransformFamily::Scale => params.scale = rng.gen_range(0.6..=1.4),
    }
    Ok(EvalTransform { homography: params.build(width, height)?, gain })
}

/// Direct linear transform with Hartley normalization. Needs at least four
/// correspondences `((x1, y1), (x2, y2))` with `p2 = H(p1)`.
pub fn dlt_homography(matches: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    if matches.len() < 4 {
        return Err(Error::Estimation(format!("DLT needs >= 4 correspondences, got {}", matches.len())));
    }
    let src: Vec<(f64, f64)> = matches.iter().map(|m| m.0).collect();
    let dst: Vec<(f64, f64)> = matches.iter().map(|m| m.1).collect();
    let t1 = hartley_normalization(&src)?;
    let t2 = hartley_normalization(&dst)?;
    // Two constraint rows per correspondence; pad with zero rows so the SVD
    // always produces all nine right singular vectors.
    let rows = (2 * matches.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (&(sx, sy), &(dx, dy))) in src.iter().zip(&dst).enumerate() {
        let (x, y) = apply_mat(&t1, sx, sy);
        let (u, v) = apply_mat(&t2, dx, dy);
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        a[(r, 8)] = -u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        a[(r + 1, 8)] = -v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    let h_vec = v_t.row(v_t.nrows() - 1);
    let h_norm = Matrix3::from_row_slice(&[
        h_vec[0], h_vec[1], h_vec[2], h_vec[3], h_vec[4], h_vec[5], h_vec[6], h_vec[7], h_vec[8],
    ]);
    let t2_inv = t2.try_inverse().ok_or_else(|| Error::Estimation("normalization not invertible".into()))?;
    Homography::from_matrix(t2_inv * h_norm * t1)
        .map_err(|_| Error::Estimation("degenerate correspondences".into()))
}

/// Similarity transform taking the points to centroid zero and mean
/// distance sqrt(2).
fn hartley_normalization(pts: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0 / n, acc.1 + p.1 / n));
    let mean_dist: f64 = pts.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(Error::Estimation("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn apply_mat(m: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = m * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// True when any three of the four points are (nearly) collinear, which
/// makes the four-point DLT ill-posed.
fn quad_degenerate(pts: &[(f64, f64); 4]) -> bool {
    for i in 0..4 {
        for j in (i + 1)..4 {
            for k in (j + 1)..4 {
                let (ax, ay) = pts[i];
                let abx = pts[j].0 - ax;
                let aby = pts[j].1 - ay;
                let acx = pts[k].0 - ax;
                let acy = pts[k].1 - ay;
                let cross = (abx * acy - aby * acx).abs();
                let scale = (abx.hypot(aby) * acx.hypot(acy)).max(1e-12);
                if cross < 1e-6 * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Output of [`estimate_homography_ransac`].
#[derive(Debug, Clone)]
pub struct RansacResult {
    pub homography: Homography,
    /// Per-match inlier flags for the returned model.
    pub inliers: Vec<bool>,
    /// Minimal samples actually drawn.
    pub iterations: usize,
}

impl RansacResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn count_inliers(matches: &[((f64, f64), (f64, f64))], h: &Homography, threshold: f64) -> Vec<bool> {
    let t2 = threshold * threshold;
    matches
        .iter()
        .map(|&((x1, y1), (x2, y2))| match h.apply(x1, y1) {
            Some((px, py)) => (px - x2).powi(2) + (py - y2).powi(2) < t2,
            None => false,
        })
        .collect()
}

/// Classic RANSAC over four-point minimal samples with a normalized-DLT
/// solver. The iteration budget adapts to the best inlier ratio found so
/// far (99% confidence of hitting one all-inlier sample) and is capped at
/// `max_iters`. The final model is refit on all inliers unless the refit
/// loses inliers, so the returned model's inlier count is never below that
/// of the best minimal sample.
pub fn estimate_homography_ransac(
    matches: &[((f64, f64), (f64, f64))],
    threshold_px: f64,
    max_iters: usize,
    seed: u64,
) -> Result<RansacResult> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::Estimation(format!("RANSAC needs >= 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography, Vec<bool>, usize)> = None;
    let mut cap = max_iters.max(1);
    let mut it = 0;
    while it < cap {
        it += 1;
        let idx = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let src = [matches[idx[0]].0, matches[idx[1]].0, matches[idx[2]].0, matches[idx[3]].0];
        let dst = [matches[idx[0]].1, matches[idx[1]].1, matches[idx[2]].1, matches[idx[3]].1];
        if quad_degenerate(&src) || quad_degenerate(&dst) {
            continue;
        }
        let sample: Vec<_> = idx.iter().map(|&i| matches[i]).collect();
        let Ok(h) = dlt_homography(&sample) else { continue };
        let inliers = count_inliers(matches, &h, threshold_px);
        let count = inliers.iter().filter(|&&b| b).count();
        if best.as_ref().map_or(true, |b| count > b.2) {
            best = Some((h, inliers, count));
            // Adaptive stop: iterations needed for 99% confidence that at
            // least one sample was all inliers.
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            if p_good > 1.0 - 1e-12 {
                break;
            }
            if p_good > 1e-12 {
                let needed = (1.0f64 - 0.99).ln() / (1.0 - p_good).ln();
                cap = cap.min((needed.ceil() as usize).max(1));
            }
        }
    }
    let (h, inliers, count) =
        best.ok_or_else(|| Error::Estimation("no non-degenerate minimal sample found".into()))?;
    if count < 4 {
        return Err(Error::Estimation("no model with enough inliers".into()));
    }
    let inlier_matches: Vec<_> =
        matches.iter().zip(&inliers).filter(|(_, &keep)| keep).map(|(m, _)| *m).collect();
    if let Ok(refit) = dlt_homography(&inlier_matches) {
        let refit_inliers = count_inliers(matches, &refit, threshold_px);
        let refit_count = refit_inliers.iter().filter(|&&b| b).count();
        if refit_count >= count {
            return Ok(RansacResult { homography: refit, inliers: refit_inliers, iterations: it });
        }
    }
    Ok(RansacResult { homography: h, inliers, iterations: it })
}
