//! Minimal reverse-mode automatic differentiation on dense f32 tensors.
//!
//! Execution is eager: every operation computes its output immediately and
//! records itself on a [`GradTape`]. [`GradTape::backward`] replays the tape
//! in reverse from a scalar root, visiting each recorded operation exactly
//! once and accumulating (`+=`) gradients into every tensor that requires
//! them. Two backward passes without [`GradTape::zero_grad`] therefore yield
//! exactly twice the gradients.
//!
//! Storage is 32-bit; every reduction (convolution accumulators, sums,
//! means, norms, losses) runs its accumulator in 64-bit before casting back.
//! Shapes are `[C, H, W]` for feature maps, `[K, C]` for descriptor rows,
//! `[len]` for vectors and `[1]` for scalars. There is no broadcasting
//! beyond the explicit per-channel bias add.

mod conv;
mod deform;
mod loss;
mod rows;

use crate::{Error, Result};

/// Index of a tensor on its tape.
pub type TensorId = usize;

/// A dense tensor together with its gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    /// Accumulated gradient, same length as `data`. `None` until a backward
    /// pass first reaches this tensor.
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One recorded operation. Saved fields are whatever backward needs.
pub(crate) enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    AddScalar { a: TensorId },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    Conv2d { input: TensorId, weight: TensorId, bias: Option<TensorId>, stride: usize, padding: usize },
    TiedConv { params: TensorId, image: Vec<f32>, height: usize, width: usize, tap_param: [usize; 16], tap_sign: [f32; 16] },
    DeformConv2d { input: TensorId, weight: TensorId, offsets: TensorId },
    MaxPool2 { input: TensorId, argmax: Vec<u32> },
    UpsampleBilinear { input: TensorId, factor: usize },
    AddChannelBias { input: TensorId, bias: TensorId },
    ConcatChannels { inputs: Vec<TensorId> },
    L2NormChannels { input: TensorId, eps: f32 },
    L2NormRows { input: TensorId, eps: f32 },
    GatherPixels { input: TensorId, locs: Vec<(usize, usize)> },
    SampleBilinearPixels { input: TensorId, locs: Vec<(f32, f32)> },
    SelectRows { input: TensorId, idx: Vec<usize> },
    RowsSqDist { a: TensorId, b: TensorId },
    BceWithTarget { pred: TensorId, target: Vec<f32> },
    DissipationPeak { score: TensorId, centers: Vec<(usize, usize)>, block: usize },
}

pub(crate) struct Node {
    pub(crate) tensor: Tensor,
    pub(crate) op: Op,
    /// 64-bit value of scalar reductions, kept so numeric gradient checks
    /// can read the accumulator instead of its 32-bit cast.
    pub(crate) exact: Option<f64>,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct GradTape {
    pub(crate) nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded tensor and operation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Clears accumulated gradients on every tensor, keeping the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].tensor
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].tensor.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    /// Value of a scalar tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.nodes[id].tensor.numel(), 1);
        self.nodes[id].tensor.data[0]
    }

    /// 64-bit value of a scalar: the reduction accumulator when the node is
    /// a reduction, otherwise the stored 32-bit value widened.
    pub fn value_f64(&self, id: TensorId) -> f64 {
        self.nodes[id].exact.unwrap_or(f64::from(self.nodes[id].tensor.data[0]))
    }

    /// Registers an input tensor. Gradients accumulate into it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                detail: format!("shape {shape:?} wants {numel} elements, data has {}", data.len()),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf, None))
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        op: Op,
        exact: Option<f64>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: Tensor { shape, data, requires_grad, grad: None },
            op,
            exact,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].tensor.requires_grad
    }

    fn check(&self, op: &'static str, id: TensorId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Usage(format!("{op}: tensor id {id} is not on this tape")));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        self.check(op, a)?;
        self.check(op, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, detail: format!("operand shapes differ: {sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        let exact = match (self.nodes[a].exact, self.nodes[b].exact) {
            (Some(x), Some(y)) if data.len() == 1 => Some(x + y),
            _ => None,
        };
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::Add { a, b }, exact))
    }

    /// Elementwise difference `a - b` of two same-shape tensors.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f32> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::Sub { a, b }, None))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        self.check("scale", a)?;
        let data: Vec<f32> = self.data(a).iter().map(|x| x * c).collect();
        let req = self.requires(a);
        let exact = self.nodes[a].exact.filter(|_| data.len() == 1).map(|x| x * f64::from(c));
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::Scale { a, c }, exact))
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        self.check("add_scalar", a)?;
        let data: Vec<f32> = self.data(a).iter().map(|x| x + c).collect();
        let req = self.requires(a);
        let exact = self.nodes[a].exact.filter(|_| data.len() == 1).map(|x| x + f64::from(c));
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::AddScalar { a }, exact))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("relu", a)?;
        let data: Vec<f32> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::Relu { a }, None))
    }

    /// Elementwise logistic function, output strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("sigmoid", a)?;
        let data: Vec<f32> = self.data(a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let req = self.requires(a);
        Ok(self.push(self.shape(a).to_vec(), data, req, Op::Sigmoid { a }, None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("sum", a)?;
        let acc: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum();
        let req = self.requires(a);
        Ok(self.push(vec![1], vec![acc as f32], req, Op::Sum { a }, Some(acc)))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("mean", a)?;
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Dimension { op: "mean", detail: "empty tensor".into() });
        }
        let acc: f64 = self.data(a).iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
        let req = self.requires(a);
        Ok(self.push(vec![1], vec![acc as f32], req, Op::Mean { a }, Some(acc)))
    }

    /// Replays the tape in reverse from a scalar root, accumulating
    /// gradients into every tensor with `requires_grad`.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        self.check("backward", root)?;
        if self.nodes[root].tensor.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root].tensor.shape
            )));
        }
        let mut adjoint: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            if self.nodes[id].tensor.requires_grad {
                let t = &mut self.nodes[id].tensor;
                let slot = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
                for (gi, vi) in slot.iter_mut().zip(&g) {
                    *gi += vi;
                }
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backprop(&op, id, &g, &mut adjoint);
            self.nodes[id].op = op;
        }
        Ok(())
    }

    /// Adds `delta` into the adjoint slot of `id` if that tensor
    /// participates in gradient flow.
    pub(crate) fn adj_slot<'a>(
        &self,
        adjoint: &'a mut [Option<Vec<f32>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<f32>> {
        if !self.requires(id) {
            return None;
        }
        let len = self.nodes[id].tensor.data.len();
        Some(adjoint[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, op: &Op, out: TensorId, g: &[f32], adjoint: &mut [Option<Vec<f32>>]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for &id in [a, b] {
                    if let Some(slot) = self.adj_slot(adjoint, id) {
                        for (s, gi) in slot.iter_mut().zip(g) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }
                if let Some(slot) = self.adj_slot(adjoint, *b) {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s -= gi;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi * c;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for (s, gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }
            }
            Op::Relu { a } => {
                let input = &self.nodes[*a].tensor.data;
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for ((s, gi), x) in slot.iter_mut().zip(g).zip(input) {
                        if *x > 0.0 {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let out_data = &self.nodes[out].tensor.data;
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for ((s, gi), y) in slot.iter_mut().zip(g).zip(out_data) {
                        *s += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].tensor.data.len() as f32;
                if let Some(slot) = self.adj_slot(adjoint, *a) {
                    let gi = g[0] / n;
                    for s in slot.iter_mut() {
                        *s += gi;
                    }
                }
            }
            Op::Conv2d { input, weight, bias, stride, padding } => {
                conv::conv2d_backward(self, out, *input, *weight, *bias, *stride, *padding, g, adjoint);
            }
            Op::TiedConv { params, image, height, width, tap_param, tap_sign } => {
                conv::tied_conv_backward(self, *params, image, *height, *width, tap_param, tap_sign, g, adjoint);
            }
            Op::DeformConv2d { input, weight, offsets } => {
                deform::deform_conv2d_backward(self, *input, *weight, *offsets, g, adjoint);
            }
            Op::MaxPool2 { input, argmax } => {
                conv::max_pool2_backward(self, *input, argmax, g, adjoint);
            }
            Op::UpsampleBilinear { input, factor } => {
                conv::upsample_backward(self, out, *input, *factor, g, adjoint);
            }
            Op::AddChannelBias { input, bias } => {
                conv::add_channel_bias_backward(self, *input, *bias, g, adjoint);
            }
            Op::ConcatChannels { inputs } => {
                conv::concat_backward(self, inputs, g, adjoint);
            }
            Op::L2NormChannels { input, eps } => {
                conv::l2_norm_channels_backward(self, *input, *eps, g, adjoint);
            }
            Op::L2NormRows { input, eps } => {
                rows::l2_norm_rows_backward(self, *input, *eps, g, adjoint);
            }
            Op::GatherPixels { input, locs } => {
                rows::gather_pixels_backward(self, *input, locs, g, adjoint);
            }
            Op::SampleBilinearPixels { input, locs } => {
                rows::sample_bilinear_backward(self, *input, locs, g, adjoint);
            }
            Op::SelectRows { input, idx } => {
                rows::select_rows_backward(self, *input, idx, g, adjoint);
            }
            Op::RowsSqDist { a, b } => {
                rows::rows_sqdist_backward(self, *a, *b, g, adjoint);
            }
            Op::BceWithTarget { pred, target } => {
                loss::bce_backward(self, *pred, target, g, adjoint);
            }
            Op::DissipationPeak { score, centers, block } => {
                loss::dissipation_peak_backward(self, *score, centers, *block, g, adjoint);
            }
        }
    }
}

/// Interprets a shape as `[C, H, W]`.
pub(crate) fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::Dimension { op, detail: format!("expected [C, H, W], got {other:?}") }),
    }
}
