//! Deformable 3x3 convolution: every kernel tap samples the input at a
//! per-pixel, per-tap offset position with bilinear interpolation.
//!
//! Offset layout is `[2*k*k, H, W]` with taps row-major over the kernel
//! window; channel `2t` holds the tap's y displacement and `2t + 1` its x
//! displacement. Samples outside the frame read zero. The operation is
//! differentiable with respect to the input, the weights and the offsets
//! (through the interpolation weights).

use super::{chw, GradTape, Op, TensorId};
use crate::{Error, Result};

/// Interpolation stencil of one sample position: corner indices are `None`
/// outside the frame (those corners read zero).
struct Stencil {
    y0: isize,
    x0: isize,
    fy: f64,
    fx: f64,
}

impl Stencil {
    fn at(sy: f64, sx: f64) -> Self {
        let y0 = sy.floor();
        let x0 = sx.floor();
        Self { y0: y0 as isize, x0: x0 as isize, fy: sy - y0, fx: sx - x0 }
    }

    /// The four corner values for `plane`, zero where out of frame.
    fn corners(&self, plane: &[f32], h: usize, w: usize) -> [f64; 4] {
        let read = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                f64::from(plane[y as usize * w + x as usize])
            }
        };
        [
            read(self.y0, self.x0),
            read(self.y0, self.x0 + 1),
            read(self.y0 + 1, self.x0),
            read(self.y0 + 1, self.x0 + 1),
        ]
    }

    fn value(&self, c: &[f64; 4]) -> f64 {
        let top = c[0] * (1.0 - self.fx) + c[1] * self.fx;
        let bot = c[2] * (1.0 - self.fx) + c[3] * self.fx;
        top * (1.0 - self.fy) + bot * self.fy
    }

    /// Partial derivatives of the sampled value with respect to (sy, sx).
    fn position_grad(&self, c: &[f64; 4]) -> (f64, f64) {
        let d_sy = (c[2] - c[0]) * (1.0 - self.fx) + (c[3] - c[1]) * self.fx;
        let d_sx = (c[1] - c[0]) * (1.0 - self.fy) + (c[3] - c[2]) * self.fy;
        (d_sy, d_sx)
    }

    /// Adds `v` into the four in-frame corners of `acc` with bilinear
    /// weights.
    fn scatter(&self, acc: &mut [f64], h: usize, w: usize, v: f64) {
        let mut add = |y: isize, x: isize, weight: f64| {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                acc[y as usize * w + x as usize] += v * weight;
            }
        };
        add(self.y0, self.x0, (1.0 - self.fy) * (1.0 - self.fx));
        add(self.y0, self.x0 + 1, (1.0 - self.fy) * self.fx);
        add(self.y0 + 1, self.x0, self.fy * (1.0 - self.fx));
        add(self.y0 + 1, self.x0 + 1, self.fy * self.fx);
    }
}

fn validate(tape: &GradTape, input: TensorId, weight: TensorId, offsets: TensorId) -> Result<(usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = chw("deform_conv2d", tape.shape(input))?;
    let wshape = tape.shape(weight).to_vec();
    let [o_ch, wc, kh, kw] = wshape[..] else {
        return Err(Error::Dimension {
            op: "deform_conv2d",
            detail: format!("weight must be [O, C, k, k], got {wshape:?}"),
        });
    };
    if wc != c_in {
        return Err(Error::Dimension {
            op: "deform_conv2d",
            detail: format!("weight channel axis ({wc}) does not match input channels ({c_in})"),
        });
    }
    if kh != 3 || kw != 3 {
        return Err(Error::Dimension { op: "deform_conv2d", detail: format!("kernel must be 3x3, got {kh}x{kw}") });
    }
    let k = kh;
    let oshape = tape.shape(offsets);
    if oshape != [2 * k * k, h, w] {
        return Err(Error::Dimension {
            op: "deform_conv2d",
            detail: format!("offsets must be [{}, {h}, {w}], got {oshape:?}", 2 * k * k),
        });
    }
    Ok((c_in, h, w, o_ch, k))
}

impl GradTape {
    /// Deformable same-size 3x3 convolution (stride 1): output `[O, H, W]`.
    /// With all offsets zero it reduces exactly to `conv2d` with padding 1.
    pub fn deform_conv2d(&mut self, input: TensorId, weight: TensorId, offsets: TensorId) -> Result<TensorId> {
        let (c_in, h, w, o_ch, k) = validate(self, input, weight, offsets)?;
        let x = self.data(input);
        let wt = self.data(weight);
        let off = self.data(offsets);
        let hw = h * w;
        let taps = k * k;
        let mut out = vec![0f32; o_ch * hw];
        let mut samples = vec![0f64; c_in * taps];
        for y in 0..h {
            for xx in 0..w {
                let pix = y * w + xx;
                for t in 0..taps {
                    let (ty, tx) = (t / k, t % k);
                    let sy = y as f64 + ty as f64 - 1.0 + f64::from(off[2 * t * hw + pix]);
                    let sx = xx as f64 + tx as f64 - 1.0 + f64::from(off[(2 * t + 1) * hw + pix]);
                    let st = Stencil::at(sy, sx);
                    for c in 0..c_in {
                        let corners = st.corners(&x[c * hw..][..hw], h, w);
                        samples[c * taps + t] = st.value(&corners);
                    }
                }
                for o in 0..o_ch {
                    let w_o = &wt[o * c_in * taps..][..c_in * taps];
                    let mut acc = 0.0f64;
                    for (wv, sv) in w_o.iter().zip(&samples) {
                        acc += f64::from(*wv) * *sv;
                    }
                    out[o * hw + pix] = acc as f32;
                }
            }
        }
        let req = self.requires(input) || self.requires(weight) || self.requires(offsets);
        Ok(self.push(vec![o_ch, h, w], out, req, Op::DeformConv2d { input, weight, offsets }, None))
    }
}

pub(super) fn deform_conv2d_backward(
    tape: &GradTape,
    input: TensorId,
    weight: TensorId,
    offsets: TensorId,
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    let (c_in, h, w, o_ch, k) = validate(tape, input, weight, offsets).expect("shapes validated at record time");
    let x = tape.data(input);
    let wt = tape.data(weight);
    let off = tape.data(offsets);
    let hw = h * w;
    let taps = k * k;
    let (need_x, need_w, need_o) = (tape.requires(input), tape.requires(weight), tape.requires(offsets));

    let mut dx = if need_x { vec![0.0f64; c_in * hw] } else { Vec::new() };
    let mut dw = if need_w { vec![0.0f64; o_ch * c_in * taps] } else { Vec::new() };
    let mut doff = if need_o { vec![0.0f64; 2 * taps * hw] } else { Vec::new() };

    let mut stencils: Vec<Stencil> = Vec::with_capacity(taps);
    let mut corner_vals = vec![[0.0f64; 4]; c_in * taps];
    for y in 0..h {
        for xx in 0..w {
            let pix = y * w + xx;
            stencils.clear();
            for t in 0..taps {
                let (ty, tx) = (t / k, t % k);
                let sy = y as f64 + ty as f64 - 1.0 + f64::from(off[2 * t * hw + pix]);
                let sx = xx as f64 + tx as f64 - 1.0 + f64::from(off[(2 * t + 1) * hw + pix]);
                let st = Stencil::at(sy, sx);
                for c in 0..c_in {
                    corner_vals[c * taps + t] = st.corners(&x[c * hw..][..hw], h, w);
                }
                stencils.push(st);
            }
            for t in 0..taps {
                let st = &stencils[t];
                let (mut g_sy, mut g_sx) = (0.0f64, 0.0f64);
                for c in 0..c_in {
                    // Total weight reaching this (channel, tap) sample from
                    // all output channels.
                    let mut coef = 0.0f64;
                    for o in 0..o_ch {
                        let gi = f64::from(g[o * hw + pix]);
                        if gi == 0.0 {
                            continue;
                        }
                        let wv = f64::from(wt[(o * c_in + c) * taps + t]);
                        coef += gi * wv;
                        if need_w {
                            dw[(o * c_in + c) * taps + t] += gi * st.value(&corner_vals[c * taps + t]);
                        }
                    }
                    if coef != 0.0 {
                        if need_x {
                            st.scatter(&mut dx[c * hw..(c + 1) * hw], h, w, coef);
                        }
                        if need_o {
                            let (d_sy, d_sx) = st.position_grad(&corner_vals[c * taps + t]);
                            g_sy += coef * d_sy;
                            g_sx += coef * d_sx;
                        }
                    }
                }
                if need_o {
                    doff[2 * t * hw + pix] += g_sy;
                    doff[(2 * t + 1) * hw + pix] += g_sx;
                }
            }
        }
    }

    if need_x {
        if let Some(slot) = tape.adj_slot(adjoint, input) {
            for (s, d) in slot.iter_mut().zip(&dx) {
                *s += *d as f32;
            }
        }
    }
    if need_w {
        if let Some(slot) = tape.adj_slot(adjoint, weight) {
            for (s, d) in slot.iter_mut().zip(&dw) {
                *s += *d as f32;
            }
        }
    }
    if need_o {
        if let Some(slot) = tape.adj_slot(adjoint, offsets) {
            for (s, d) in slot.iter_mut().zip(&doff) {
                *s += *d as f32;
            }
        }
    }
}
