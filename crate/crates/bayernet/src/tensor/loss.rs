//! Fused loss operations on score maps: binary cross-entropy against a
//! constant target map, and the dissipation peak penalty that weights score
//! mass by its distance to a keypoint inside a local window.

use super::{GradTape, Op, TensorId};
use crate::{Error, Result};

const LOG_CLAMP: f64 = 1e-12;

/// Accepts `[H, W]` or `[1, H, W]`.
fn plane(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::Dimension { op, detail: format!("expected a single-plane map, got {other:?}") }),
    }
}

impl GradTape {
    /// Mean binary cross-entropy of a prediction map against a constant
    /// target map of the same extent. Logarithm arguments are clamped at
    /// 1e-12; the target is treated as a constant (no gradient).
    pub fn bce_with_target(&mut self, pred: TensorId, target: &[f32]) -> Result<TensorId> {
        let n = self.tensor(pred).numel();
        if n == 0 {
            return Err(Error::Dimension { op: "bce_with_target", detail: "empty prediction".into() });
        }
        if n != target.len() {
            return Err(Error::Dimension {
                op: "bce_with_target",
                detail: format!("prediction has {n} elements, target has {}", target.len()),
            });
        }
        let p = self.data(pred);
        let mut acc = 0.0f64;
        for (pi, ti) in p.iter().zip(target) {
            let (pi, ti) = (f64::from(*pi), f64::from(*ti));
            acc -= ti * pi.max(LOG_CLAMP).ln() + (1.0 - ti) * (1.0 - pi).max(LOG_CLAMP).ln();
        }
        acc /= n as f64;
        let req = self.requires(pred);
        Ok(self.push(vec![1], vec![acc as f32], req, Op::BceWithTarget { pred, target: target.to_vec() }, Some(acc)))
    }

    /// Distance-weighted score mass around keypoints: for every center, sum
    /// `dist((i, j), center) * S(i, j)` over an `n x n` window (n odd)
    /// clamped into the frame, then average over centers. Centers are
    /// `(x, y)` pixel locations. Zero centers give a zero loss.
    pub fn dissipation_peak(&mut self, score: TensorId, centers: &[(usize, usize)], n: usize) -> Result<TensorId> {
        let (h, w) = plane("dissipation_peak", self.shape(score))?;
        if n % 2 == 0 || n == 0 {
            return Err(Error::Usage(format!("dissipation_peak: window must be odd, got {n}")));
        }
        if n > h || n > w {
            return Err(Error::Dimension {
                op: "dissipation_peak",
                detail: format!("window {n} exceeds {h}x{w} map"),
            });
        }
        for &(cx, cy) in centers {
            if cx >= w || cy >= h {
                return Err(Error::Usage(format!(
                    "dissipation_peak: center ({cx}, {cy}) outside {w}x{h} frame"
                )));
            }
        }
        let s = self.data(score);
        let mut acc = 0.0f64;
        for &(cx, cy) in centers {
            let (y0, x0) = window_origin(cx, cy, n, h, w);
            for i in y0..y0 + n {
                for j in x0..x0 + n {
                    let dy = i as f64 - cy as f64;
                    let dx = j as f64 - cx as f64;
                    acc += (dy * dy + dx * dx).sqrt() * f64::from(s[i * w + j]);
                }
            }
        }
        if !centers.is_empty() {
            acc /= centers.len() as f64;
        }
        let req = self.requires(score);
        Ok(self.push(
            vec![1],
            vec![acc as f32],
            req,
            Op::DissipationPeak { score, centers: centers.to_vec(), block: n },
            Some(acc),
        ))
    }
}

/// Top-left corner of the `n x n` window centered on `(cx, cy)`, shifted
/// inward at the borders so the window stays inside the frame (the center
/// always remains inside the window).
fn window_origin(cx: usize, cy: usize, n: usize, h: usize, w: usize) -> (usize, usize) {
    let r = n / 2;
    let y0 = cy.saturating_sub(r).min(h - n);
    let x0 = cx.saturating_sub(r).min(w - n);
    (y0, x0)
}

pub(super) fn bce_backward(tape: &GradTape, pred: TensorId, target: &[f32], g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    if !tape.requires(pred) {
        return;
    }
    let p = tape.data(pred);
    let n = p.len() as f64;
    let gi = f64::from(g[0]) / n;
    if let Some(slot) = tape.adj_slot(adjoint, pred) {
        for ((s, pi), ti) in slot.iter_mut().zip(p).zip(target) {
            let (pi, ti) = (f64::from(*pi), f64::from(*ti));
            let mut d = 0.0f64;
            // Clamped log branches have zero derivative.
            if pi > LOG_CLAMP {
                d -= ti / pi;
            }
            if 1.0 - pi > LOG_CLAMP {
                d += (1.0 - ti) / (1.0 - pi);
            }
            *s += (d * gi) as f32;
        }
    }
}

pub(super) fn dissipation_peak_backward(
    tape: &GradTape,
    score: TensorId,
    centers: &[(usize, usize)],
    n: usize,
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    if centers.is_empty() || !tape.requires(score) {
        return;
    }
    let (h, w) = plane("dissipation_peak", tape.shape(score)).expect("shape validated at record time");
    let gi = f64::from(g[0]) / centers.len() as f64;
    if let Some(slot) = tape.adj_slot(adjoint, score) {
        for &(cx, cy) in centers {
            let (y0, x0) = window_origin(cx, cy, n, h, w);
            for i in y0..y0 + n {
                for j in x0..x0 + n {
                    let dy = i as f64 - cy as f64;
                    let dx = j as f64 - cx as f64;
                    slot[i * w + j] += ((dy * dy + dx * dx).sqrt() * gi) as f32;
                }
            }
        }
    }
}
