//! Row-matrix operations used for descriptor sampling and the triplet loss:
//! gathering channel vectors at pixel locations, bilinear sub-pixel
//! sampling, row selection, row normalization and row-wise squared
//! distances. Row matrices have shape `[K, C]`.

use super::{chw, GradTape, Op, TensorId};
use crate::{Error, Result};

fn kc(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [k, c] => Ok((*k, *c)),
        other => Err(Error::Dimension { op, detail: format!("expected [K, C], got {other:?}") }),
    }
}

impl GradTape {
    /// Reads the channel vector of a `[C, H, W]` map at integer `(x, y)`
    /// locations, producing `[K, C]`.
    pub fn gather_pixels(&mut self, input: TensorId, locs: &[(usize, usize)]) -> Result<TensorId> {
        let (c, h, w) = chw("gather_pixels", self.shape(input))?;
        for &(x, y) in locs {
            if x >= w || y >= h {
                return Err(Error::Usage(format!("gather_pixels: location ({x}, {y}) outside {w}x{h} frame")));
            }
        }
        let x = self.data(input);
        let hw = h * w;
        let mut out = vec![0f32; locs.len() * c];
        for (k, &(px, py)) in locs.iter().enumerate() {
            for ci in 0..c {
                out[k * c + ci] = x[ci * hw + py * w + px];
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![locs.len(), c], out, req, Op::GatherPixels { input, locs: locs.to_vec() }, None))
    }

    /// Bilinearly samples the channel vector of a `[C, H, W]` map at
    /// fractional `(x, y)` locations, producing `[K, C]`. Samples outside
    /// the frame read zero.
    pub fn sample_bilinear_pixels(&mut self, input: TensorId, locs: &[(f32, f32)]) -> Result<TensorId> {
        let (c, h, w) = chw("sample_bilinear_pixels", self.shape(input))?;
        let x = self.data(input);
        let hw = h * w;
        let mut out = vec![0f32; locs.len() * c];
        for (k, &(sx, sy)) in locs.iter().enumerate() {
            let st = stencil(f64::from(sx), f64::from(sy));
            for ci in 0..c {
                out[k * c + ci] = sample(&x[ci * hw..][..hw], h, w, &st) as f32;
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![locs.len(), c], out, req, Op::SampleBilinearPixels { input, locs: locs.to_vec() }, None))
    }

    /// Copies rows of a `[K, C]` matrix in the given order.
    pub fn select_rows(&mut self, input: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (k, c) = kc("select_rows", self.shape(input))?;
        for &i in idx {
            if i >= k {
                return Err(Error::Usage(format!("select_rows: row {i} out of range for {k} rows")));
            }
        }
        let x = self.data(input);
        let mut out = vec![0f32; idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
        }
        let req = self.requires(input);
        Ok(self.push(vec![idx.len(), c], out, req, Op::SelectRows { input, idx: idx.to_vec() }, None))
    }

    /// Normalizes every row of a `[K, C]` matrix to unit L2 norm, dividing
    /// by `max(norm, eps)`.
    pub fn l2_normalize_rows(&mut self, input: TensorId, eps: f32) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Usage("l2_normalize_rows: eps must be positive".into()));
        }
        let (k, c) = kc("l2_normalize_rows", self.shape(input))?;
        let x = self.data(input);
        let mut out = vec![0f32; k * c];
        for r in 0..k {
            let row = &x[r * c..(r + 1) * c];
            let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            let scale = norm.max(f64::from(eps));
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (f64::from(v) / scale) as f32;
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![k, c], out, req, Op::L2NormRows { input, eps }, None))
    }

    /// Squared L2 distance between corresponding rows of two `[K, C]`
    /// matrices, producing `[K]`.
    pub fn rows_squared_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (k, c) = kc("rows_squared_distance", self.shape(a))?;
        let (kb, cb) = kc("rows_squared_distance", self.shape(b))?;
        if (k, c) != (kb, cb) {
            return Err(Error::Dimension {
                op: "rows_squared_distance",
                detail: format!("row matrices differ: [{k}, {c}] vs [{kb}, {cb}]"),
            });
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![0f32; k];
        for r in 0..k {
            let mut acc = 0.0f64;
            for ci in 0..c {
                let d = f64::from(xa[r * c + ci]) - f64::from(xb[r * c + ci]);
                acc += d * d;
            }
            out[r] = acc as f32;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![k], out, req, Op::RowsSqDist { a, b }, None))
    }
}

struct RowStencil {
    y0: isize,
    x0: isize,
    fy: f64,
    fx: f64,
}

fn stencil(sx: f64, sy: f64) -> RowStencil {
    let y0 = sy.floor();
    let x0 = sx.floor();
    RowStencil { y0: y0 as isize, x0: x0 as isize, fy: sy - y0, fx: sx - x0 }
}

fn sample(plane: &[f32], h: usize, w: usize, st: &RowStencil) -> f64 {
    let read = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            f64::from(plane[y as usize * w + x as usize])
        }
    };
    let top = read(st.y0, st.x0) * (1.0 - st.fx) + read(st.y0, st.x0 + 1) * st.fx;
    let bot = read(st.y0 + 1, st.x0) * (1.0 - st.fx) + read(st.y0 + 1, st.x0 + 1) * st.fx;
    top * (1.0 - st.fy) + bot * st.fy
}

pub(super) fn gather_pixels_backward(
    tape: &GradTape,
    input: TensorId,
    locs: &[(usize, usize)],
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    let (c, h, w) = chw("gather_pixels", tape.shape(input)).expect("shape validated at record time");
    let hw = h * w;
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (k, &(px, py)) in locs.iter().enumerate() {
            for ci in 0..c {
                slot[ci * hw + py * w + px] += g[k * c + ci];
            }
        }
    }
}

pub(super) fn sample_bilinear_backward(
    tape: &GradTape,
    input: TensorId,
    locs: &[(f32, f32)],
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    let (c, h, w) = chw("sample_bilinear_pixels", tape.shape(input)).expect("shape validated at record time");
    let hw = h * w;
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (k, &(sx, sy)) in locs.iter().enumerate() {
            let st = stencil(f64::from(sx), f64::from(sy));
            let mut add = |y: isize, x: isize, weight: f64, ci: usize, gi: f32| {
                if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                    slot[ci * hw + y as usize * w + x as usize] += (f64::from(gi) * weight) as f32;
                }
            };
            for ci in 0..c {
                let gi = g[k * c + ci];
                add(st.y0, st.x0, (1.0 - st.fy) * (1.0 - st.fx), ci, gi);
                add(st.y0, st.x0 + 1, (1.0 - st.fy) * st.fx, ci, gi);
                add(st.y0 + 1, st.x0, st.fy * (1.0 - st.fx), ci, gi);
                add(st.y0 + 1, st.x0 + 1, st.fy * st.fx, ci, gi);
            }
        }
    }
}

pub(super) fn select_rows_backward(tape: &GradTape, input: TensorId, idx: &[usize], g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    let c = tape.shape(input)[1];
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (r, &i) in idx.iter().enumerate() {
            for ci in 0..c {
                slot[i * c + ci] += g[r * c + ci];
            }
        }
    }
}

pub(super) fn l2_norm_rows_backward(tape: &GradTape, input: TensorId, eps: f32, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    if !tape.requires(input) {
        return;
    }
    let (k, c) = kc("l2_normalize_rows", tape.shape(input)).expect("shape validated at record time");
    let x = tape.data(input);
    let eps = f64::from(eps);
    let mut dx = vec![0.0f64; k * c];
    for r in 0..k {
        let row = &x[r * c..(r + 1) * c];
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if norm > eps {
            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += f64::from(g[r * c + ci]) * f64::from(row[ci]) / norm;
            }
            for ci in 0..c {
                dx[r * c + ci] = (f64::from(g[r * c + ci]) - f64::from(row[ci]) / norm * dot) / norm;
            }
        } else {
            for ci in 0..c {
                dx[r * c + ci] = f64::from(g[r * c + ci]) / eps;
            }
        }
    }
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (s, d) in slot.iter_mut().zip(&dx) {
            *s += *d as f32;
        }
    }
}

pub(super) fn rows_sqdist_backward(tape: &GradTape, a: TensorId, b: TensorId, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    let (k, c) = kc("rows_squared_distance", tape.shape(a)).expect("shape validated at record time");
    let (xa, xb) = (tape.data(a), tape.data(b));
    if let Some(slot) = tape.adj_slot(adjoint, a) {
        for r in 0..k {
            for ci in 0..c {
                slot[r * c + ci] += 2.0 * (xa[r * c + ci] - xb[r * c + ci]) * g[r];
            }
        }
    }
    if let Some(slot) = tape.adj_slot(adjoint, b) {
        for r in 0..k {
            for ci in 0..c {
                slot[r * c + ci] -= 2.0 * (xa[r * c + ci] - xb[r * c + ci]) * g[r];
            }
        }
    }
}
