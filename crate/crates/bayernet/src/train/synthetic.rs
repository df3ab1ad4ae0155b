//! Synthetic training data: random 2D shapes (quadrilaterals, triangles,
//! line segments, ellipses, checkerboards, stars) rendered with
//! anti-aliased edges onto a random background, plus Gaussian noise. Corner
//! locations are recorded analytically from the shape vertices, so every
//! sample carries exact keypoint ground truth.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayer::{mosaic, BayerImage, RgbImage};
use crate::{Error, Result};

/// One rendered sample: the RGB source, its mosaiced Bayer raster, and the
/// analytic corner list in (x, y) pixel coordinates.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub rgb: RgbImage,
    pub bayer: BayerImage,
    pub corners: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub(crate) enum Shape {
    /// Even-odd filled polygon; `corners` lists the vertices recorded as
    /// ground truth (a thick line records only its two endpoints).
    Polygon { pts: Vec<(f64, f64)>, color: [f32; 3], corners: Vec<(f64, f64)> },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, color: [f32; 3] },
    Checkerboard { x0: f64, y0: f64, cell: f64, rows: usize, cols: usize, colors: [[f32; 3]; 2] },
}

fn point_in_polygon(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl Shape {
    fn color_at(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        match self {
            Shape::Polygon { pts, color, .. } => point_in_polygon(pts, x, y).then_some(*color),
            Shape::Ellipse { cx, cy, rx, ry, angle, color } => {
                let (s, c) = angle.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                ((u / rx).powi(2) + (v / ry).powi(2) <= 1.0).then_some(*color)
            }
            Shape::Checkerboard { x0, y0, cell, rows, cols, colors } => {
                let u = (x - x0) / cell;
                let v = (y - y0) / cell;
                if u < 0.0 || v < 0.0 || u >= *cols as f64 || v >= *rows as f64 {
                    return None;
                }
                Some(colors[((u as usize) + (v as usize)) % 2])
            }
        }
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        match self {
            Shape::Polygon { corners, .. } => corners.clone(),
            Shape::Ellipse { .. } => Vec::new(),
            Shape::Checkerboard { x0, y0, cell, rows, cols, .. } => {
                let mut out = Vec::new();
                for r in 0..=*rows {
                    for c in 0..=*cols {
                        out.push((x0 + c as f64 * cell, y0 + r as f64 * cell));
                    }
                }
                out
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Polygon { pts, .. } => {
                let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
                for &(x, y) in pts {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
                (x0, y0, x1, y1)
            }
            Shape::Ellipse { cx, cy, rx, ry, .. } => {
                let r = rx.max(*ry);
                (cx - r, cy - r, cx + r, cy + r)
            }
            Shape::Checkerboard { x0, y0, cell, rows, cols, .. } => {
                (*x0, *y0, x0 + *cols as f64 * cell, y0 + *rows as f64 * cell)
            }
        }
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), pad: f64) -> bool {
    a.0 - pad < b.2 && b.0 - pad < a.2 && a.1 - pad < b.3 && b.1 - pad < a.3
}

fn luminance(c: [f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Random color whose mean intensity differs from `against` by at least
/// 0.25, so shapes stay detectable over the background.
fn contrasting_color(rng: &mut ChaCha8Rng, against: [f32; 3]) -> [f32; 3] {
    loop {
        let c = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        if (luminance(c) - luminance(against)).abs() >= 0.25 {
            return c;
        }
    }
}

/// Polygon from a star-shaped sweep: sorted angles with a minimum gap and
/// per-vertex radii. Retries keep the vertices well separated; the
/// fallback is an axis-aligned square.
fn sample_polygon(rng: &mut ChaCha8Rng, n: usize, center: (f64, f64), r_max: f64, color: [f32; 3]) -> Shape {
    for _ in 0..20 {
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let min_gap = if n == 3 { 0.8 } else { 0.6 };
        let gaps_ok = (0..n).all(|i| {
            let next = angles[(i + 1) % n] + if i + 1 == n { std::f64::consts::TAU } else { 0.0 };
            next - angles[i] >= min_gap
        });
        if !gaps_ok {
            continue;
        }
        let pts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = rng.gen_range(0.6 * r_max..=r_max);
                (center.0 + r * a.cos(), center.1 + r * a.sin())
            })
            .collect();
        let separated = (0..n).all(|i| {
            (i + 1..n).all(|j| {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                d >= 5.0
            })
        });
        if separated {
            return Shape::Polygon { corners: pts.clone(), pts, color };
        }
    }
    let h = 0.7 * r_max;
    let pts = vec![
        (center.0 - h, center.1 - h),
        (center.0 + h, center.1 - h),
        (center.0 + h, center.1 + h),
        (center.0 - h, center.1 + h),
    ];
    let pts = pts.into_iter().take(n.max(3)).collect::<Vec<_>>();
    Shape::Polygon { corners: pts.clone(), pts, color }
}

fn sample_shape(rng: &mut ChaCha8Rng, family: usize, size: f64, margin: f64, bg: [f32; 3]) -> Shape {
    let color = contrasting_color(rng, bg);
    let r_cap = ((size - 2.0 * margin) / 2.2).min(14.0);
    let center = |rng: &mut ChaCha8Rng, r: f64| {
        (rng.gen_range(margin + r..size - margin - r), rng.gen_range(margin + r..size - margin - r))
    };
    match family {
        // Quadrilateral.
        0 => {
            let r = rng.gen_range(5.0..=r_cap.max(5.5));
            let c = center(rng, r);
            sample_polygon(rng, 4, c, r, color)
        }
        // Triangle.
        1 => {
            let r = rng.gen_range(5.0..=r_cap.max(5.5));
            let c = center(rng, r);
            sample_polygon(rng, 3, c, r, color)
        }
        // Thick line segment; only the two endpoints count as corners.
        2 => {
            let len = rng.gen_range(10.0..=(size - 2.0 * margin - 3.0).min(26.0));
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let half = len / 2.0;
            let c = center(rng, half + 1.0);
            let (s, co) = theta.sin_cos();
            let p1 = (c.0 - half * co, c.1 - half * s);
            let p2 = (c.0 + half * co, c.1 + half * s);
            let t = rng.gen_range(1.0..1.8);
            let (nx, ny) = (-s * t, co * t);
            let pts = vec![
                (p1.0 + nx, p1.1 + ny),
                (p2.0 + nx, p2.1 + ny),
                (p2.0 - nx, p2.1 - ny),
                (p1.0 - nx, p1.1 - ny),
            ];
            Shape::Polygon { pts, color, corners: vec![p1, p2] }
        }
        // Ellipse: a cornerless distractor.
        3 => {
            let rx = rng.gen_range(4.0..=r_cap.max(4.5));
            let ry = rng.gen_range(4.0..=r_cap.max(4.5));
            let r = rx.max(ry);
            let c = center(rng, r);
            Shape::Ellipse { cx: c.0, cy: c.1, rx, ry, angle: rng.gen_range(0.0..std::f64::consts::PI), color }
        }
        // Checkerboard: every lattice point is a corner.
        4 => {
            // Cap the cell so at least a 2x2 board fits inside the margin.
            let cell = f64::min(rng.gen_range(6.0..=9.0), (size - 2.0 * margin) / 2.0 - 0.5);
            let max_cells = (((size - 2.0 * margin) / cell).floor() as usize).clamp(2, 3);
            let rows = rng.gen_range(2..=max_cells);
            let cols = rng.gen_range(2..=max_cells);
            let w = cols as f64 * cell;
            let h = rows as f64 * cell;
            let x0 = rng.gen_range(margin..size - margin - w);
            let y0 = rng.gen_range(margin..size - margin - h);
            let other = contrasting_color(rng, color);
            Shape::Checkerboard { x0, y0, cell, rows, cols, colors: [color, other] }
        }
        // Star: alternating outer/inner vertices, all corners.
        _ => {
            let spikes = rng.gen_range(4..=5usize);
            let r_out = rng.gen_range(7.0..=r_cap.max(7.5));
            let r_in = r_out * rng.gen_range(0.45..0.6);
            let c = center(rng, r_out);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let pts: Vec<(f64, f64)> = (0..2 * spikes)
                .map(|i| {
                    let a = phase + i as f64 * std::f64::consts::PI / spikes as f64;
                    let r = if i % 2 == 0 { r_out } else { r_in };
                    (c.0 + r * a.cos(), c.1 + r * a.sin())
                })
                .collect();
            Shape::Polygon { corners: pts.clone(), pts, color }
        }
    }
}

/// Renders shapes over a background color with 2x2 supersampling (4
/// coverage samples per pixel give anti-aliased edges), then adds Gaussian
/// noise and clamps to [0, 1].
pub(crate) fn render(
    size: usize,
    background: [f32; 3],
    shapes: &[Shape],
    noise_sigma: f32,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0f32; 3];
            for sub in 0..4 {
                let sx = x as f64 + (0.25 + 0.5 * (sub % 2) as f64);
                let sy = y as f64 + (0.25 + 0.5 * (sub / 2) as f64);
                let mut c = background;
                // Later shapes draw on top.
                for shape in shapes {
                    if let Some(col) = shape.color_at(sx, sy) {
                        c = col;
                    }
                }
                for k in 0..3 {
                    acc[k] += c[k] / 4.0;
                }
            }
            for k in 0..3 {
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * noise_sigma;
                data[k * size * size + y * size + x] = (acc[k] + noise).clamp(0.0, 1.0);
            }
        }
    }
    RgbImage::new(size, size, data).expect("buffer sized to 3*size*size")
}

const CORNER_FAMILIES: [usize; 5] = [0, 1, 2, 4, 5];
const ALL_FAMILIES: [usize; 6] = [0, 1, 2, 3, 4, 5];
const MARGIN: f64 = 8.0;

/// Deterministically generates `count` square samples of the given size
/// (divisible by 8). Each image holds one corner-bearing shape plus a few
/// extra non-overlapping shapes, drawn with anti-aliasing and noise.
pub fn generate_synthetic(seed: u64, count: usize, size: usize) -> Result<Vec<SyntheticSample>> {
    if size % 8 != 0 {
        return Err(Error::Dimension {
            op: "generate_synthetic",
            detail: format!("size must be divisible by 8, got {size}"),
        });
    }
    if size as f64 <= 2.0 * MARGIN + 12.0 {
        return Err(Error::Dimension {
            op: "generate_synthetic",
            detail: format!("size {size} leaves no room for shapes"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let background =
            [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let mut shapes: Vec<Shape> = Vec::new();
        let target = 1 + size / 48;
        // The first shape always carries corners; extras may be distractors.
        for slot in 0..target {
            let families: &[usize] = if slot == 0 { &CORNER_FAMILIES } else { &ALL_FAMILIES };
            for _attempt in 0..20 {
                let family = families[rng.gen_range(0..families.len())];
                let candidate = sample_shape(&mut rng, family, size as f64, MARGIN, background);
                let bb = candidate.bbox();
                if shapes.iter().all(|s| !boxes_overlap(bb, s.bbox(), 3.0)) {
                    shapes.push(candidate);
                    break;
                }
            }
        }
        let noise_sigma = rng.gen_range(0.005..0.02);
        let rgb = render(size, background, &shapes, noise_sigma, &mut rng);
        let mut corners: Vec<(usize, usize)> = Vec::new();
        for shape in &shapes {
            for (x, y) in shape.corners() {
                let xi = x.round().clamp(0.0, size as f64 - 1.0) as usize;
                let yi = y.round().clamp(0.0, size as f64 - 1.0) as usize;
                corners.push((xi, yi));
            }
        }
        let bayer = mosaic(&rgb)?;
        samples.push(SyntheticSample { rgb, bayer, corners });
    }
    Ok(samples)
}
