//! Raw Bayer (RGGB) rasters: mosaicing from RGB, constrained CFA kernels,
//! the stride-2 Bayer stem convolution, and 16-bit PGM storage.
//!
//! The color filter array phase is fixed RGGB: R at even row/even column,
//! Gr at even/odd, Gb at odd/even, B at odd/odd. All raster values live in
//! `[0, 1]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{GradTape, TensorId};
use crate::{Error, Result};

/// Color filter array site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfaChannel {
    R,
    Gr,
    Gb,
    B,
}

/// Planar RGB image, `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Planes R, G, B concatenated.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Dimension {
                op: "RgbImage::new",
                detail: format!("buffer has {} values, expected {}", data.len(), 3 * height * width),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..][..self.height * self.width]
    }
}

/// Single-channel CFA raster with even dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl BayerImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Dimension {
                op: "BayerImage::new",
                detail: format!("dimensions must be even to hold whole CFA cells, got {height}x{width}"),
            });
        }
        if data.len() != height * width {
            return Err(Error::Dimension {
                op: "BayerImage::new",
                detail: format!("buffer has {} values, expected {}", data.len(), height * width),
            });
        }
        Ok(Self { height, width, data })
    }

    /// CFA site at a pixel under the RGGB phase.
    pub fn channel_at(y: usize, x: usize) -> CfaChannel {
        match (y % 2, x % 2) {
            (0, 0) => CfaChannel::R,
            (0, 1) => CfaChannel::Gr,
            (1, 0) => CfaChannel::Gb,
            _ => CfaChannel::B,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Multiplies every value by `gain`, clamping back into `[0, 1]`.
    pub fn with_gain(&self, gain: f32) -> BayerImage {
        let data = self.data.iter().map(|&v| (v * gain).clamp(0.0, 1.0)).collect();
        BayerImage { height: self.height, width: self.width, data }
    }

    /// Writes the raster as a binary 16-bit PGM (P5, maxval 65535,
    /// big-endian samples), quantizing each value to `round(v * 65535)`.
    pub fn save_pgm16(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        write!(out, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.data {
            let q = (f64::from(v) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            out.write_all(&q.to_be_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a binary 16-bit PGM written by [`BayerImage::save_pgm16`],
    /// normalizing samples back into `[0, 1]`.
    pub fn load_pgm16(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(&bytes[..]);
        let magic = read_token(&mut cursor)?;
        if magic != "P5" {
            return Err(Error::Data(format!("{}: not a binary PGM (magic {magic:?})", path.display())));
        }
        let width: usize = parse_token(&mut cursor, path, "width")?;
        let height: usize = parse_token(&mut cursor, path, "height")?;
        let maxval: usize = parse_token(&mut cursor, path, "maxval")?;
        if maxval != 65535 {
            return Err(Error::Data(format!("{}: expected maxval 65535, got {maxval}", path.display())));
        }
        let mut raw = vec![0u8; width * height * 2];
        cursor.read_exact(&mut raw).map_err(|_| {
            Error::Data(format!("{}: truncated pixel payload for {width}x{height}", path.display()))
        })?;
        let data: Vec<f32> = raw
            .chunks_exact(2)
            .map(|b| f32::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
            .collect();
        Self::new(height, width, data)
    }
}

/// Reads one whitespace-delimited PGM header token, skipping `#` comments.
fn read_token(cursor: &mut std::io::Cursor<&[u8]>) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if cursor.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(Error::Data("unexpected end of PGM header".into()));
            }
            return Ok(token);
        }
        let c = byte[0];
        if c == b'#' {
            let mut line = String::new();
            std::io::BufRead::read_line(cursor, &mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn parse_token(cursor: &mut std::io::Cursor<&[u8]>, path: &Path, what: &str) -> Result<usize> {
    let tok = read_token(cursor)?;
    tok.parse().map_err(|_| Error::Data(format!("{}: bad {what} field {tok:?}", path.display())))
}

/// Samples an RGB image through the RGGB color filter array: each output
/// pixel keeps exactly the one color its CFA site admits.
pub fn mosaic(rgb: &RgbImage) -> Result<BayerImage> {
    let (h, w) = (rgb.height, rgb.width);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension {
            op: "mosaic",
            detail: format!("RGB dimensions must be even, got {h}x{w}"),
        });
    }
    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let plane = match BayerImage::channel_at(y, x) {
                CfaChannel::R => 0,
                CfaChannel::Gr | CfaChannel::Gb => 1,
                CfaChannel::B => 2,
            };
            data[y * w + x] = rgb.data[plane * h * w + y * w + x];
        }
    }
    BayerImage::new(h, w, data)
}

/// The two constrained 4x4 kernel families of the Bayer stems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// Signed per-channel taps: positive on the top-left and bottom-right
    /// 2x2 CFA cells, negative on the other two. Each channel's taps sum to
    /// zero, so constant inputs produce zero response.
    ColorVariation,
    /// Unsigned per-channel taps; responds to overall intensity.
    Intensity,
}

/// Parameter index (CFA channel) of each tap in a 4x4 window anchored at an
/// even/even coordinate: R=0, Gr=1, Gb=2, B=3.
fn tap_param_map() -> [usize; 16] {
    let mut map = [0usize; 16];
    for ty in 0..4 {
        for tx in 0..4 {
            map[ty * 4 + tx] = (ty % 2) * 2 + (tx % 2);
        }
    }
    map
}

/// Tap signs for a kernel family. For `ColorVariation` the sign is +1 on
/// the (0,0) and (1,1) 2x2 cells of the window and -1 on the (0,1) and
/// (1,0) cells.
fn tap_sign_map(kind: KernelKind) -> [f32; 16] {
    let mut map = [1.0f32; 16];
    if kind == KernelKind::ColorVariation {
        for ty in 0..4 {
            for tx in 0..4 {
                if (ty / 2) != (tx / 2) {
                    map[ty * 4 + tx] = -1.0;
                }
            }
        }
    }
    map
}

/// Expands 4 free parameters `(p_R, p_Gr, p_Gb, p_B)` into the full 4x4
/// kernel of the given family, row-major.
pub fn materialize_kernel(kind: KernelKind, params: &[f32; 4]) -> [f32; 16] {
    let param = tap_param_map();
    let sign = tap_sign_map(kind);
    let mut kernel = [0f32; 16];
    for t in 0..16 {
        kernel[t] = sign[t] * params[param[t]];
    }
    kernel
}

/// Stride-2 CFA-phase-locked convolution of a Bayer raster with one
/// materialized kernel per row of `params` (`[O, 4]`), producing
/// `[O, H/2, W/2]`. Every window is anchored at an even/even coordinate so
/// each tap always reads its designated CFA channel; the two leading border
/// rows/columns are parity-preserving reflections. Gradients flow to the
/// free parameters only.
pub fn bayer_conv(tape: &mut GradTape, image: &BayerImage, params: TensorId, kind: KernelKind) -> Result<TensorId> {
    tape.tied_conv(
        params,
        image.data.clone(),
        image.height,
        image.width,
        tap_param_map(),
        tap_sign_map(kind),
    )
}

/// Restores a half-resolution stem output to full resolution by 2x bilinear
/// upsampling.
pub fn to_full_res(tape: &mut GradTape, input: TensorId) -> Result<TensorId> {
    tape.upsample_bilinear(input, 2)
}
