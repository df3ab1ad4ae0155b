//! Spatial operations: dense convolution, the tied-kernel CFA convolution,
//! 2x2 max pooling, bilinear upsampling, channel bias, channel concat and
//! per-pixel channel normalization.

use super::{chw, GradTape, Op, TensorId};
use crate::{Error, Result};

impl GradTape {
    /// 2D convolution of `[C, H, W]` with `[O, C, k, k]` weights, zero
    /// padding and an optional `[O]` bias. The padded extent must tile
    /// exactly under the stride. Accumulates per output pixel in 64-bit,
    /// channel-outer row-major, matching the naive six-loop reference
    /// bit for bit.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (c_in, h, w) = chw("conv2d", self.shape(input))?;
        let wshape = self.shape(weight).to_vec();
        let [o_ch, wc, kh, kw] = wshape[..] else {
            return Err(Error::Dimension { op: "conv2d", detail: format!("weight must be [O, C, k, k], got {wshape:?}") });
        };
        if wc != c_in {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("weight channel axis ({wc}) does not match input channels ({c_in})"),
            });
        }
        if kh != kw {
            return Err(Error::Dimension { op: "conv2d", detail: format!("kernel must be square, got {kh}x{kw}") });
        }
        let k = kh;
        if stride == 0 {
            return Err(Error::Usage("conv2d: stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o_ch] {
                return Err(Error::Dimension {
                    op: "conv2d",
                    detail: format!("bias shape {:?} does not match output channels [{o_ch}]", self.shape(b)),
                });
            }
        }
        let (oh, ow) = (out_extent("conv2d", h, k, stride, padding)?, out_extent("conv2d", w, k, stride, padding)?);

        let x = self.data(input);
        let wt = self.data(weight);
        let bias_data = bias.map(|b| self.data(b));
        let mut out = vec![0f32; o_ch * oh * ow];
        for o in 0..o_ch {
            let w_o = &wt[o * c_in * k * k..][..c_in * k * k];
            let b = f64::from(bias_data.map_or(0.0, |bd| bd[o]));
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..c_in {
                        let plane = &x[c * h * w..][..h * w];
                        let w_oc = &w_o[c * k * k..][..k * k];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..][..w];
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += f64::from(row[ix as usize]) * f64::from(w_oc[ky * k + kx]);
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = (acc + b) as f32;
                }
            }
        }
        let req = self.requires(input) || self.requires(weight) || bias.map_or(false, |b| self.requires(b));
        Ok(self.push(vec![o_ch, oh, ow], out, req, Op::Conv2d { input, weight, bias, stride, padding }, None))
    }

    /// Stride-2 4x4 convolution of a single-channel mosaic with kernels
    /// materialized from 4 free parameters per output channel:
    /// `kernel[t] = tap_sign[t] * params[o][tap_param[t]]`. The input is
    /// reflect-padded by 2 on top and left (mirror excluding the edge, which
    /// preserves CFA parity), so windows start at even coordinates and the
    /// output is exactly `[O, H/2, W/2]`. Differentiable with respect to the
    /// free parameters only.
    pub(crate) fn tied_conv(
        &mut self,
        params: TensorId,
        image: Vec<f32>,
        height: usize,
        width: usize,
        tap_param: [usize; 16],
        tap_sign: [f32; 16],
    ) -> Result<TensorId> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Dimension {
                op: "tied_conv",
                detail: format!("mosaic dimensions must be even, got {height}x{width}"),
            });
        }
        if image.len() != height * width {
            return Err(Error::Dimension {
                op: "tied_conv",
                detail: format!("mosaic buffer has {} values, expected {}", image.len(), height * width),
            });
        }
        let pshape = self.shape(params).to_vec();
        let [o_ch, four] = pshape[..] else {
            return Err(Error::Dimension { op: "tied_conv", detail: format!("params must be [O, 4], got {pshape:?}") });
        };
        if four != 4 {
            return Err(Error::Dimension { op: "tied_conv", detail: format!("params must be [O, 4], got {pshape:?}") });
        }
        let (oh, ow) = (height / 2, width / 2);
        let p = self.data(params);
        let mut out = vec![0f32; o_ch * oh * ow];
        for o in 0..o_ch {
            let mut kernel = [0f32; 16];
            for (t, k) in kernel.iter_mut().enumerate() {
                *k = tap_sign[t] * p[o * 4 + tap_param[t]];
            }
            let plane = &mut out[o * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ty in 0..4usize {
                        let iy = reflect(2 * oy as isize - 2 + ty as isize);
                        let row = &image[iy * width..][..width];
                        for tx in 0..4usize {
                            let ix = reflect(2 * ox as isize - 2 + tx as isize);
                            acc += f64::from(row[ix]) * f64::from(kernel[ty * 4 + tx]);
                        }
                    }
                    plane[oy * ow + ox] = acc as f32;
                }
            }
        }
        let req = self.requires(params);
        Ok(self.push(
            vec![o_ch, oh, ow],
            out,
            req,
            Op::TiedConv { params, image, height, width, tap_param, tap_sign },
            None,
        ))
    }

    /// 2x2 max pooling with stride 2. Ties resolve to the lowest flat index,
    /// which alone receives the backward gradient.
    pub fn max_pool2(&mut self, input: TensorId) -> Result<TensorId> {
        let (c, h, w) = chw("max_pool2", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension { op: "max_pool2", detail: format!("spatial dims must be even, got {h}x{w}") });
        }
        debug_assert!(c * h * w < u32::MAX as usize);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.data(input);
        let mut out = vec![0f32; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            let plane = &x[ci * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2usize {
                        for dx in 0..2usize {
                            let idx = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = (ci * oh + oy) * ow + ox;
                    out[oidx] = best;
                    argmax[oidx] = (ci * h * w + best_idx) as u32;
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![c, oh, ow], out, req, Op::MaxPool2 { input, argmax }, None))
    }

    /// Bilinear upsampling by an integer factor in {2, 4, 8}. Sample centers
    /// follow the half-pixel convention `src = (dst + 0.5)/factor - 0.5`,
    /// clamped at the borders.
    pub fn upsample_bilinear(&mut self, input: TensorId, factor: usize) -> Result<TensorId> {
        if !matches!(factor, 2 | 4 | 8) {
            return Err(Error::Usage(format!("upsample_bilinear: factor must be 2, 4 or 8, got {factor}")));
        }
        let (c, h, w) = chw("upsample_bilinear", self.shape(input))?;
        let (oh, ow) = (h * factor, w * factor);
        let ty = axis_table(h, factor);
        let tx = axis_table(w, factor);
        let x = self.data(input);
        let mut out = vec![0f32; c * oh * ow];
        for ci in 0..c {
            let plane = &x[ci * h * w..][..h * w];
            let oplane = &mut out[ci * oh * ow..][..oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let row0 = &plane[y0 * w..][..w];
                let row1 = &plane[y1 * w..][..w];
                let orow = &mut oplane[oy * ow..][..ow];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = f64::from(row0[x0]) * (1.0 - fx) + f64::from(row0[x1]) * fx;
                    let bot = f64::from(row1[x0]) * (1.0 - fx) + f64::from(row1[x1]) * fx;
                    orow[ox] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![c, oh, ow], out, req, Op::UpsampleBilinear { input, factor }, None))
    }

    /// Adds a `[C]` bias across the spatial extent of a `[C, H, W]` map.
    pub fn add_channel_bias(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let (c, h, w) = chw("add_channel_bias", self.shape(input))?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                detail: format!("bias shape {:?} does not match channel axis [{c}]", self.shape(bias)),
            });
        }
        let x = self.data(input);
        let b = self.data(bias);
        let mut out = vec![0f32; c * h * w];
        for ci in 0..c {
            let bc = b[ci];
            for (oi, xi) in out[ci * h * w..][..h * w].iter_mut().zip(&x[ci * h * w..][..h * w]) {
                *oi = xi + bc;
            }
        }
        let req = self.requires(input) || self.requires(bias);
        Ok(self.push(vec![c, h, w], out, req, Op::AddChannelBias { input, bias }, None))
    }

    /// Stacks maps along the channel axis; spatial extents must agree.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat_channels: need at least one input".into()));
        }
        let (_, h, w) = chw("concat_channels", self.shape(inputs[0]))?;
        let mut c_total = 0usize;
        for &id in inputs {
            let (ci, hi, wi) = chw("concat_channels", self.shape(id))?;
            if (hi, wi) != (h, w) {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    detail: format!("spatial extents differ: {h}x{w} vs {hi}x{wi}"),
                });
            }
            c_total += ci;
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            out.extend_from_slice(self.data(id));
        }
        let req = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(vec![c_total, h, w], out, req, Op::ConcatChannels { inputs: inputs.to_vec() }, None))
    }

    /// Normalizes the channel vector at every pixel to unit L2 norm,
    /// dividing by `max(norm, eps)`.
    pub fn l2_normalize_channels(&mut self, input: TensorId, eps: f32) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Usage("l2_normalize_channels: eps must be positive".into()));
        }
        let (c, h, w) = chw("l2_normalize_channels", self.shape(input))?;
        let x = self.data(input);
        let hw = h * w;
        let mut out = vec![0f32; c * hw];
        for p in 0..hw {
            let mut sq = 0.0f64;
            for ci in 0..c {
                sq += f64::from(x[ci * hw + p]).powi(2);
            }
            let scale = sq.sqrt().max(f64::from(eps));
            for ci in 0..c {
                out[ci * hw + p] = (f64::from(x[ci * hw + p]) / scale) as f32;
            }
        }
        let req = self.requires(input);
        Ok(self.push(vec![c, h, w], out, req, Op::L2NormChannels { input, eps }, None))
    }
}

/// Output extent of a strided convolution axis; the padded extent must tile
/// exactly.
fn out_extent(op: &'static str, n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if padded < k {
        return Err(Error::Dimension { op, detail: format!("kernel {k} exceeds padded extent {padded}") });
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Dimension {
            op,
            detail: format!("stride {stride} does not tile extent {n} with padding {padding} and kernel {k}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// Mirror about index 0, excluding the edge itself: -1 -> 1, -2 -> 2.
/// Preserves coordinate parity, which keeps CFA taps on their channel.
fn reflect(i: isize) -> usize {
    if i < 0 {
        (-i) as usize
    } else {
        i as usize
    }
}

/// Per-output-index source interpolation table `(i0, i1, frac)` for the
/// half-pixel-center convention with border clamping.
fn axis_table(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|i| {
            let src = (i as f64 + 0.5) / factor as f64 - 0.5;
            let src = src.clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(super) fn conv2d_backward(
    tape: &GradTape,
    out: TensorId,
    input: TensorId,
    weight: TensorId,
    bias: Option<TensorId>,
    stride: usize,
    padding: usize,
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    let (c_in, h, w) = chw("conv2d", tape.shape(input)).expect("shape validated at record time");
    let k = tape.shape(weight)[2];
    let o_ch = tape.shape(weight)[0];
    let (oh, ow) = (tape.shape(out)[1], tape.shape(out)[2]);
    let x = tape.data(input);
    let wt = tape.data(weight);

    if let Some(b) = bias {
        if tape.requires(b) {
            let mut db = vec![0.0f64; o_ch];
            for o in 0..o_ch {
                for gi in &g[o * oh * ow..][..oh * ow] {
                    db[o] += f64::from(*gi);
                }
            }
            let slot = tape.adj_slot(adjoint, b).expect("bias requires grad");
            for (s, d) in slot.iter_mut().zip(&db) {
                *s += *d as f32;
            }
        }
    }

    if tape.requires(weight) {
        let mut dw = vec![0.0f64; o_ch * c_in * k * k];
        for o in 0..o_ch {
            let dw_o = &mut dw[o * c_in * k * k..][..c_in * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = f64::from(g[(o * oh + oy) * ow + ox]);
                    if gi == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        let plane = &x[c * h * w..][..h * w];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &plane[iy as usize * w..][..w];
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dw_o[(c * k + ky) * k + kx] += f64::from(row[ix as usize]) * gi;
                            }
                        }
                    }
                }
            }
        }
        if let Some(slot) = tape.adj_slot(adjoint, weight) {
            for (s, d) in slot.iter_mut().zip(&dw) {
                *s += *d as f32;
            }
        }
    }

    if tape.requires(input) {
        let mut dx = vec![0.0f64; c_in * h * w];
        for o in 0..o_ch {
            let w_o = &wt[o * c_in * k * k..][..c_in * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gi = f64::from(g[(o * oh + oy) * ow + ox]);
                    if gi == 0.0 {
                        continue;
                    }
                    for c in 0..c_in {
                        let dplane = &mut dx[c * h * w..][..h * w];
                        let w_oc = &w_o[c * k * k..][..k * k];
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dplane[iy as usize * w + ix as usize] += f64::from(w_oc[ky * k + kx]) * gi;
                            }
                        }
                    }
                }
            }
        }
        if let Some(slot) = tape.adj_slot(adjoint, input) {
            for (s, d) in slot.iter_mut().zip(&dx) {
                *s += *d as f32;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn tied_conv_backward(
    tape: &GradTape,
    params: TensorId,
    image: &[f32],
    height: usize,
    width: usize,
    tap_param: &[usize; 16],
    tap_sign: &[f32; 16],
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    if !tape.requires(params) {
        return;
    }
    let o_ch = tape.shape(params)[0];
    let (oh, ow) = (height / 2, width / 2);
    let mut dp = vec![0.0f64; o_ch * 4];
    for o in 0..o_ch {
        let gplane = &g[o * oh * ow..][..oh * ow];
        let dpo = &mut dp[o * 4..][..4];
        for oy in 0..oh {
            for ox in 0..ow {
                let gi = f64::from(gplane[oy * ow + ox]);
                if gi == 0.0 {
                    continue;
                }
                for ty in 0..4usize {
                    let iy = reflect(2 * oy as isize - 2 + ty as isize);
                    let row = &image[iy * width..][..width];
                    for tx in 0..4usize {
                        let ix = reflect(2 * ox as isize - 2 + tx as isize);
                        let t = ty * 4 + tx;
                        dpo[tap_param[t]] += f64::from(tap_sign[t]) * f64::from(row[ix]) * gi;
                    }
                }
            }
        }
    }
    if let Some(slot) = tape.adj_slot(adjoint, params) {
        for (s, d) in slot.iter_mut().zip(&dp) {
            *s += *d as f32;
        }
    }
}

pub(super) fn max_pool2_backward(tape: &GradTape, input: TensorId, argmax: &[u32], g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (a, gi) in argmax.iter().zip(g) {
            slot[*a as usize] += gi;
        }
    }
}

pub(super) fn upsample_backward(
    tape: &GradTape,
    out: TensorId,
    input: TensorId,
    factor: usize,
    g: &[f32],
    adjoint: &mut [Option<Vec<f32>>],
) {
    if !tape.requires(input) {
        return;
    }
    let (c, h, w) = chw("upsample_bilinear", tape.shape(input)).expect("shape validated at record time");
    let (oh, ow) = (tape.shape(out)[1], tape.shape(out)[2]);
    let ty = axis_table(h, factor);
    let tx = axis_table(w, factor);
    let mut dx = vec![0.0f64; c * h * w];
    for ci in 0..c {
        let dplane = &mut dx[ci * h * w..][..h * w];
        let gplane = &g[ci * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gi = f64::from(gplane[oy * ow + ox]);
                dplane[y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                dplane[y0 * w + x1] += gi * (1.0 - fy) * fx;
                dplane[y1 * w + x0] += gi * fy * (1.0 - fx);
                dplane[y1 * w + x1] += gi * fy * fx;
            }
        }
    }
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (s, d) in slot.iter_mut().zip(&dx) {
            *s += *d as f32;
        }
    }
}

pub(super) fn add_channel_bias_backward(tape: &GradTape, input: TensorId, bias: TensorId, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (s, gi) in slot.iter_mut().zip(g) {
            *s += gi;
        }
    }
    if tape.requires(bias) {
        let c = tape.shape(bias)[0];
        let hw = g.len() / c;
        let mut db = vec![0.0f64; c];
        for ci in 0..c {
            for gi in &g[ci * hw..][..hw] {
                db[ci] += f64::from(*gi);
            }
        }
        let slot = tape.adj_slot(adjoint, bias).expect("bias requires grad");
        for (s, d) in slot.iter_mut().zip(&db) {
            *s += *d as f32;
        }
    }
}

pub(super) fn concat_backward(tape: &GradTape, inputs: &[TensorId], g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    let mut offset = 0usize;
    for &id in inputs {
        let len = tape.tensor(id).numel();
        if let Some(slot) = tape.adj_slot(adjoint, id) {
            for (s, gi) in slot.iter_mut().zip(&g[offset..offset + len]) {
                *s += gi;
            }
        }
        offset += len;
    }
}

pub(super) fn l2_norm_channels_backward(tape: &GradTape, input: TensorId, eps: f32, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
    if !tape.requires(input) {
        return;
    }
    let (c, h, w) = chw("l2_normalize_channels", tape.shape(input)).expect("shape validated at record time");
    let x = tape.data(input);
    let hw = h * w;
    let mut dx = vec![0.0f64; c * hw];
    let eps = f64::from(eps);
    for p in 0..hw {
        let mut sq = 0.0f64;
        for ci in 0..c {
            sq += f64::from(x[ci * hw + p]).powi(2);
        }
        let norm = sq.sqrt();
        if norm > eps {
            // out = v / norm; dv = (g - out * <g, out>) / norm
            let mut dot = 0.0f64;
            for ci in 0..c {
                dot += f64::from(g[ci * hw + p]) * f64::from(x[ci * hw + p]) / norm;
            }
            for ci in 0..c {
                let v = f64::from(x[ci * hw + p]);
                dx[ci * hw + p] = (f64::from(g[ci * hw + p]) - v / norm * dot) / norm;
            }
        } else {
            for ci in 0..c {
                dx[ci * hw + p] = f64::from(g[ci * hw + p]) / eps;
            }
        }
    }
    if let Some(slot) = tape.adj_slot(adjoint, input) {
        for (s, d) in slot.iter_mut().zip(&dx) {
            *s += *d as f32;
        }
    }
}
