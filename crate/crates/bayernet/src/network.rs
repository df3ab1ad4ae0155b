//! The detection-and-description network.
//!
//! Two constrained Bayer stems (color-variation and intensity kernels, each
//! followed by a residual deformable block and 2x upsampling) produce the
//! full-resolution maps C1 and F1. An encoder pyramid of residual
//! deformable blocks with 2x2 max-pooling produces F2-F4 at 1/2, 1/4 and
//! 1/8 resolution; each is passed through a 1x1 alignment convolution,
//! upsampled back to full resolution, and concatenated with C1 and F1 into
//! the aggregate feature map F. A small convolutional head turns F into a
//! sigmoid score map; two stacked deformable convolutions plus a 1x1
//! projection turn F into per-pixel L2-normalized descriptors.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayer::{bayer_conv, to_full_res, BayerImage, KernelKind};
use crate::tensor::{GradTape, TensorId};
use crate::{Error, Result};

/// Architecture hyperparameters. Channel counts shrink together under
/// `width_multiplier` (never below 1); `descriptor_dim` is pinned and does
/// not scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub aggregate_channels: usize,
    pub descriptor_dim: usize,
    pub detector_mid_channels: usize,
    pub width_multiplier: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            block_channels: [16, 32, 64, 128],
            aggregate_channels: 256,
            descriptor_dim: 256,
            detector_mid_channels: 8,
            width_multiplier: 1.0,
        }
    }
}

/// Channel counts after applying the width multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaledChannels {
    pub stem: usize,
    pub blocks: [usize; 4],
    pub aggregate: usize,
    pub descriptor: usize,
    pub detector_mid: usize,
}

impl NetworkConfig {
    pub fn with_multiplier(multiplier: f64) -> Self {
        Self { width_multiplier: multiplier, ..Self::default() }
    }

    fn scale(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Applies the width multiplier and checks the channel arithmetic: the
    /// aggregate map is the concatenation of C1, F1 and the upsampled
    /// F2-F4, so its channel count must equal that sum.
    pub fn scaled(&self) -> Result<ScaledChannels> {
        if self.width_multiplier <= 0.0 || !self.width_multiplier.is_finite() {
            return Err(Error::Config(format!("width_multiplier must be positive, got {}", self.width_multiplier)));
        }
        if self.descriptor_dim == 0 {
            return Err(Error::Config("descriptor_dim must be >= 1".into()));
        }
        let s = ScaledChannels {
            stem: self.scale(self.stem_channels),
            blocks: [
                self.scale(self.block_channels[0]),
                self.scale(self.block_channels[1]),
                self.scale(self.block_channels[2]),
                self.scale(self.block_channels[3]),
            ],
            aggregate: self.scale(self.aggregate_channels),
            descriptor: self.descriptor_dim,
            detector_mid: self.scale(self.detector_mid_channels),
        };
        let concat = 2 * s.blocks[0] + s.blocks[1] + s.blocks[2] + s.blocks[3];
        if concat != s.aggregate {
            return Err(Error::Config(format!(
                "aggregate_channels {} does not match concatenated channels {} at multiplier {}",
                s.aggregate, concat, self.width_multiplier
            )));
        }
        Ok(s)
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// All network parameters in a fixed architecture order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

/// The parameter inventory for a scaled architecture: `(name, shape)` in
/// construction order. This is the single source of truth used by
/// initialization, checkpoint validation, and tape binding.
pub fn expected_param_shapes(s: &ScaledChannels) -> Vec<(String, Vec<usize>)> {
    fn residual(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c_in: usize, c_out: usize) {
        out.push((format!("{prefix}.offset.weight"), vec![18, c_in, 3, 3]));
        out.push((format!("{prefix}.offset.bias"), vec![18]));
        out.push((format!("{prefix}.deform.weight"), vec![c_out, c_in, 3, 3]));
        out.push((format!("{prefix}.deform.bias"), vec![c_out]));
        if c_in != c_out {
            out.push((format!("{prefix}.skip.weight"), vec![c_out, c_in, 1, 1]));
        }
    }
    fn unit(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, c: usize) {
        out.push((format!("{prefix}.offset.weight"), vec![18, c, 3, 3]));
        out.push((format!("{prefix}.offset.bias"), vec![18]));
        out.push((format!("{prefix}.deform.weight"), vec![c, c, 3, 3]));
        out.push((format!("{prefix}.deform.bias"), vec![c]));
    }
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    out.push(("stem_color.params".into(), vec![s.stem, 4]));
    out.push(("stem_intensity.params".into(), vec![s.stem, 4]));
    residual(&mut out, "enc1a", s.stem, s.blocks[0]);
    residual(&mut out, "enc1b", s.stem, s.blocks[0]);
    residual(&mut out, "enc2", s.blocks[0], s.blocks[1]);
    residual(&mut out, "enc3", s.blocks[1], s.blocks[2]);
    residual(&mut out, "enc4", s.blocks[2], s.blocks[3]);
    for (i, &c) in s.blocks.iter().enumerate().skip(1) {
        out.push((format!("align{}.weight", i + 1), vec![c, c, 1, 1]));
        out.push((format!("align{}.bias", i + 1), vec![c]));
    }
    let m = s.detector_mid;
    out.push(("det1.weight".into(), vec![m, s.aggregate, 1, 1]));
    out.push(("det1.bias".into(), vec![m]));
    out.push(("det2.weight".into(), vec![m, m, 3, 3]));
    out.push(("det2.bias".into(), vec![m]));
    out.push(("det3.weight".into(), vec![m, m, 3, 3]));
    out.push(("det3.bias".into(), vec![m]));
    out.push(("det4.weight".into(), vec![1, m, 3, 3]));
    out.push(("det4.bias".into(), vec![1]));
    unit(&mut out, "desc1", s.aggregate);
    unit(&mut out, "desc2", s.aggregate);
    out.push(("desc_proj.weight".into(), vec![s.descriptor, s.aggregate, 1, 1]));
    out.push(("desc_proj.bias".into(), vec![s.descriptor]));
    out
}

/// Initializes all parameters: Kaiming-uniform fan-in for convolution
/// weights, zeros for biases and the offset sub-branches (so deformable
/// convolutions start as standard ones), and 0.1 * standard normal for the
/// Bayer stem parameters.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    let scaled = config.scaled()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, shape) in expected_param_shapes(&scaled) {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = if name.starts_with("stem_") {
            (0..numel).map(|_| 0.1 * rng.sample::<f32, _>(StandardNormal)).collect()
        } else if name.contains(".offset.") || name.ends_with(".bias") {
            vec![0.0; numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        entries.push(ParamEntry { name, shape, data });
    }
    Ok(ParamStore { entries })
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Places every parameter on the tape as a leaf; `trainable` decides
    /// which leaves accumulate gradients.
    pub fn bind(&self, tape: &mut GradTape, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            let id = tape.leaf(e.data.clone(), e.shape.clone(), trainable(&e.name))?;
            ids.push(id);
            index.insert(e.name.clone(), i);
        }
        Ok(Bound { ids, index })
    }

    /// Copies current tape values back into the store (after an optimizer
    /// step).
    pub fn absorb(&mut self, tape: &GradTape, bound: &Bound) {
        for (entry, &id) in self.entries.iter_mut().zip(&bound.ids) {
            entry.data.copy_from_slice(tape.data(id));
        }
    }
}

/// Tape bindings for one forward pass.
pub struct Bound {
    pub ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

/// Whether to run the descriptor head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Detector,
    Full,
}

/// Forward-pass outputs: the score map `[1, H, W]` and, in `Full` mode, the
/// L2-normalized descriptor map `[D, H, W]`.
pub struct ForwardOutput {
    pub score: TensorId,
    pub descriptors: Option<TensorId>,
    /// Shapes of the main pipeline stages in execution order — the two
    /// full-resolution streams, the three pyramid levels, and the fused
    /// map — for architecture introspection.
    pub stage_shapes: Vec<(&'static str, Vec<usize>)>,
}

/// One deformable unit: a zero-initialized 3x3 convolution on the input
/// predicts the 18 tap offsets, which steer a 3x3 deformable convolution;
/// the channel bias is added afterwards.
fn deform_unit(tape: &mut GradTape, bound: &Bound, prefix: &str, input: TensorId) -> Result<TensorId> {
    let offsets = tape.conv2d(
        input,
        bound.id(&format!("{prefix}.offset.weight"))?,
        Some(bound.id(&format!("{prefix}.offset.bias"))?),
        1,
        1,
    )?;
    let conv = tape.deform_conv2d(input, bound.id(&format!("{prefix}.deform.weight"))?, offsets)?;
    tape.add_channel_bias(conv, bound.id(&format!("{prefix}.deform.bias"))?)
}

/// Residual block: `relu(deform_unit(x) + skip(x))`, where the skip path is
/// a 1x1 convolution when the channel count changes and identity otherwise.
fn residual_block(tape: &mut GradTape, bound: &Bound, prefix: &str, input: TensorId) -> Result<TensorId> {
    let main = deform_unit(tape, bound, prefix, input)?;
    let skip_name = format!("{prefix}.skip.weight");
    let skip = if bound.contains(&skip_name) {
        let out_ch = tape.shape(main)[0];
        let zero = tape.leaf(vec![0.0; out_ch], vec![out_ch], false)?;
        tape.conv2d(input, bound.id(&skip_name)?, Some(zero), 1, 0)?
    } else {
        input
    };
    let sum = tape.add(main, skip)?;
    tape.relu(sum)
}

fn conv_relu(tape: &mut GradTape, bound: &Bound, name: &str, input: TensorId, padding: usize) -> Result<TensorId> {
    let w = bound.id(&format!("{name}.weight"))?;
    let b = bound.id(&format!("{name}.bias"))?;
    let c = tape.conv2d(input, w, Some(b), 1, padding)?;
    tape.relu(c)
}

/// Runs the network on one Bayer image. Image dimensions must be divisible
/// by 8 (three 2x poolings). Outputs are deterministic given the image and
/// parameters.
pub fn forward(
    tape: &mut GradTape,
    config: &NetworkConfig,
    bound: &Bound,
    image: &BayerImage,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    config.scaled()?;
    if image.height % 8 != 0 || image.width % 8 != 0 {
        return Err(Error::Dimension {
            op: "forward",
            detail: format!("image dimensions must be divisible by 8, got {}x{}", image.height, image.width),
        });
    }
    // Stems at half resolution, residual refinement, then 2x upsampling to
    // the full-resolution maps C1 (color variation) and F1 (intensity).
    let stem_a = bayer_conv(tape, image, bound.id("stem_color.params")?, KernelKind::ColorVariation)?;
    let a1 = residual_block(tape, bound, "enc1a", stem_a)?;
    let c1 = to_full_res(tape, a1)?;
    let stem_b = bayer_conv(tape, image, bound.id("stem_intensity.params")?, KernelKind::Intensity)?;
    let b1 = residual_block(tape, bound, "enc1b", stem_b)?;
    let f1 = to_full_res(tape, b1)?;

    // Encoder pyramid on the intensity stream: residual block then 2x2
    // max-pool, halving resolution at each stage.
    let r2 = residual_block(tape, bound, "enc2", f1)?;
    let f2 = tape.max_pool2(r2)?;
    let r3 = residual_block(tape, bound, "enc3", f2)?;
    let f3 = tape.max_pool2(r3)?;
    let r4 = residual_block(tape, bound, "enc4", f3)?;
    let f4 = tape.max_pool2(r4)?;

    // Align each pyramid level with a 1x1 convolution, then upsample back
    // to full resolution.
    let mut ups = Vec::new();
    for (i, (fmap, factor)) in [(f2, 2usize), (f3, 4), (f4, 8)].into_iter().enumerate() {
        let name = format!("align{}", i + 2);
        let w = bound.id(&format!("{name}.weight"))?;
        let b = bound.id(&format!("{name}.bias"))?;
        let aligned = tape.conv2d(fmap, w, Some(b), 1, 0)?;
        ups.push(tape.upsample_bilinear(aligned, factor)?);
    }
    let f = tape.concat_channels(&[c1, f1, ups[0], ups[1], ups[2]])?;
    let stage_shapes = [("c1", c1), ("f1", f1), ("f2", f2), ("f3", f3), ("f4", f4), ("aggregate", f)]
        .map(|(name, id)| (name, tape.shape(id).to_vec()))
        .to_vec();

    // Detection head: 1x1 bottleneck, two 3x3 convolutions, then a 3x3
    // convolution to one channel squashed by a sigmoid.
    let d1 = conv_relu(tape, bound, "det1", f, 0)?;
    let d2 = conv_relu(tape, bound, "det2", d1, 1)?;
    let d3 = conv_relu(tape, bound, "det3", d2, 1)?;
    let d4w = bound.id("det4.weight")?;
    let d4b = bound.id("det4.bias")?;
    let d4 = tape.conv2d(d3, d4w, Some(d4b), 1, 1)?;
    let score = tape.sigmoid(d4)?;

    let descriptors = match mode {
        ForwardMode::Detector => None,
        ForwardMode::Full => {
            // Descriptor head: two stacked deformable units, a 1x1
            // projection to the descriptor dimension, and per-pixel L2
            // normalization.
            let e1 = deform_unit(tape, bound, "desc1", f)?;
            let e1 = tape.relu(e1)?;
            let e2 = deform_unit(tape, bound, "desc2", e1)?;
            let e2 = tape.relu(e2)?;
            let pw = bound.id("desc_proj.weight")?;
            let pb = bound.id("desc_proj.bias")?;
            let proj = tape.conv2d(e2, pw, Some(pb), 1, 0)?;
            Some(tape.l2_normalize_channels(proj, 1e-12)?)
        }
    };
    Ok(ForwardOutput { score, descriptors, stage_shapes })
}

const MAGIC: &[u8; 4] = b"BAYR";
const VERSION: u32 = 1;

/// Serializes the configuration and every parameter (name, shape, 32-bit
/// little-endian floats) behind a magic/version header.
pub fn save_checkpoint(config: &NetworkConfig, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.stem_channels,
        config.block_channels[0],
        config.block_channels[1],
        config.block_channels[2],
        config.block_channels[3],
        config.aggregate_channels,
        config.descriptor_dim,
        config.detector_mid_channels,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&config.width_multiplier.to_le_bytes());
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for e in &params.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Deserializes a checkpoint, validating the header, the parameter
/// inventory against the embedded configuration, and (when given) the
/// caller's expected configuration.
pub fn load_checkpoint(bytes: &[u8], expect: Option<&NetworkConfig>) -> Result<(NetworkConfig, ParamStore)> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = r.u32()? as usize;
    }
    let config = NetworkConfig {
        stem_channels: fields[0],
        block_channels: [fields[1], fields[2], fields[3], fields[4]],
        aggregate_channels: fields[5],
        descriptor_dim: fields[6],
        detector_mid_channels: fields[7],
        width_multiplier: r.f64()?,
    };
    if let Some(e) = expect {
        if *e != config {
            return Err(Error::Checkpoint(format!("checkpoint config {config:?} does not match expected {e:?}")));
        }
    }
    let scaled = config.scaled().map_err(|e| Error::Checkpoint(format!("embedded config invalid: {e}")))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        entries.push(ParamEntry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    // The stored inventory must match the architecture exactly.
    let expected = expected_param_shapes(&scaled);
    if entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, architecture needs {}",
            entries.len(),
            expected.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e.name.clone()) {
            return Err(Error::Checkpoint(format!("{}: parameter appears twice", e.name)));
        }
        let Some((_, shape)) = expected.iter().find(|(n, _)| *n == e.name) else {
            return Err(Error::Checkpoint(format!("{}: unknown parameter", e.name)));
        };
        if *shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} does not match architecture shape {:?}",
                e.name, e.shape, shape
            )));
        }
    }
    Ok((config, ParamStore { entries }))
}
