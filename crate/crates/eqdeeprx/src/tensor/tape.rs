//! Reverse-mode autodiff over a fixed op set.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! recording in reverse. Feature maps use the `[F, S, C]` row-major layout
//! (frequency x time x channels), depthwise kernels `[K, C]`, pointwise
//! weights `[C_in, C_out]`.

use std::sync::Arc;

use super::RealTensor;
use crate::{Error, Result};

/// Spatial axis of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Frequency,
    Time,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Two-point linear interpolation table along one axis.
#[derive(Debug, Clone)]
pub struct InterpTable {
    pub out_len: usize,
    /// Per output index: (source a, weight a, source b, weight b).
    pub taps: Vec<(usize, f64, usize, f64)>,
}

/// Extension point for ops with hand-derived adjoints (the equalizers).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Accumulates into `input_grads` (entries are `None` for inputs that do
    /// not require gradients; the others hold zero-initialized buffers).
    fn backward(
        &self,
        out_value: &[f64],
        out_grad: &[f64],
        inputs: &[&[f64]],
        input_grads: &mut [Option<Vec<f64>>],
    );
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    DepthwiseConv {
        x: NodeId,
        kernel: NodeId,
        axis: Axis,
    },
    PointwiseConv {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Downsample {
        x: NodeId,
        factor: usize,
        axis: Axis,
    },
    Upsample {
        x: NodeId,
        factor: usize,
        axis: Axis,
    },
    ConcatChannels(Vec<NodeId>),
    SliceChannels {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SymbolMixer {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        mix_channels: usize,
    },
    InterpAxis {
        x: NodeId,
        table: Arc<InterpTable>,
        axis: Axis,
    },
    Sum(NodeId),
    Mean(NodeId),
    SigmoidBce {
        logits: NodeId,
        targets: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
        mean: bool,
        count: usize,
    },
    SqErrSum {
        x: NodeId,
        target: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    },
    MomentPenalty {
        x: NodeId,
        mean_target: f64,
        var_target: f64,
        mu: Vec<f64>,
        var: Vec<f64>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Recording of a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Splits a `[F, S, C]` shape into (outer, axis length, inner block).
fn axis_split(shape: &[usize], axis: Axis) -> (usize, usize, usize) {
    debug_assert_eq!(shape.len(), 3);
    match axis {
        Axis::Frequency => (1, shape[0], shape[1] * shape[2]),
        Axis::Time => (shape[0], shape[1], shape[2]),
    }
}

fn fsc(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "expected a rank-3 [F, S, C] tensor, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &RealTensor, requires_grad: bool) -> NodeId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            requires_grad,
        )
    }

    pub fn leaf_values(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, shape.to_vec(), data, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> NodeId {
        self.leaf_values(shape, data, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), value, ng))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul_elem: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::MulElem(a, b), self.nodes[a.0].shape.clone(), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.needs_grad(a);
        self.push(Op::Scale(a, c), self.nodes[a.0].shape.clone(), value, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs_grad(a);
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), value, ng)
    }

    /// Per-channel 1D convolution along `axis` with zero padding and
    /// same-size output. Kernel layout `[K, C]`, K odd.
    pub fn depthwise_conv(&mut self, x: NodeId, kernel: NodeId, axis: Axis) -> Result<NodeId> {
        let (f, s, c) = fsc(self.shape(x))?;
        let kshape = self.shape(kernel);
        if kshape.len() != 2 {
            return Err(Error::Shape(format!(
                "depthwise kernel must be [K, C], got {kshape:?}"
            )));
        }
        let (klen, kc) = (kshape[0], kshape[1]);
        if klen % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "depthwise kernel length must be odd, got {klen}"
            )));
        }
        if kc != c {
            return Err(Error::Shape(format!(
                "depthwise kernel has {kc} channels, input has {c}"
            )));
        }
        let value = depthwise_forward(self.value(x), (f, s, c), self.value(kernel), klen, axis);
        let ng = self.needs_grad(x) || self.needs_grad(kernel);
        Ok(self.push(
            Op::DepthwiseConv { x, kernel, axis },
            vec![f, s, c],
            value,
            ng,
        ))
    }

    /// Per-position linear map over channels: weight `[C_in, C_out]`,
    /// optional bias `[C_out]`.
    pub fn pointwise_conv(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let (f, s, cin) = fsc(self.shape(x))?;
        let wshape = self.shape(weight);
        if wshape.len() != 2 || wshape[0] != cin {
            return Err(Error::Shape(format!(
                "pointwise weight must be [{cin}, C_out], got {wshape:?}"
            )));
        }
        let cout = wshape[1];
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!(
                    "pointwise bias must be [{cout}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let positions = f * s;
        let mut value = vec![0.0; positions * cout];
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = bias.map(|b| self.value(b));
            for p in 0..positions {
                let xrow = &xv[p * cin..(p + 1) * cin];
                let orow = &mut value[p * cout..(p + 1) * cout];
                if let Some(bv) = bv {
                    orow.copy_from_slice(bv);
                }
                for (k, &xvk) in xrow.iter().enumerate() {
                    if xvk == 0.0 {
                        continue;
                    }
                    let wrow = &wv[k * cout..(k + 1) * cout];
                    for (o, &w) in orow.iter_mut().zip(wrow) {
                        *o += xvk * w;
                    }
                }
            }
        }
        let ng = self.needs_grad(x)
            || self.needs_grad(weight)
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(
            Op::PointwiseConv { x, weight, bias },
            vec![f, s, cout],
            value,
            ng,
        ))
    }

    /// Keeps every `factor`-th sample along `axis` (nearest-neighbour).
    /// Non-divisible lengths behave as if the right edge were replicated up
    /// to the next multiple, so the output has `ceil(len / factor)` samples.
    pub fn downsample(&mut self, x: NodeId, factor: usize, axis: Axis) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidArg("resample factor must be >= 1".into()));
        }
        let (f, s, c) = fsc(self.shape(x))?;
        if factor == 1 {
            let value = self.value(x).to_vec();
            let ng = self.needs_grad(x);
            return Ok(self.push(Op::Downsample { x, factor, axis }, vec![f, s, c], value, ng));
        }
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let out_len = div_ceil(len, factor);
        let mut value = vec![0.0; outer * out_len * inner];
        {
            let xv = self.value(x);
            for a in 0..outer {
                for m in 0..out_len {
                    let src = (a * len + m * factor) * inner;
                    let dst = (a * out_len + m) * inner;
                    value[dst..dst + inner].copy_from_slice(&xv[src..src + inner]);
                }
            }
        }
        let out_shape = match axis {
            Axis::Frequency => vec![out_len, s, c],
            Axis::Time => vec![f, out_len, c],
        };
        let ng = self.needs_grad(x);
        Ok(self.push(Op::Downsample { x, factor, axis }, out_shape, value, ng))
    }

    /// Repeats every sample `factor` times along `axis` and truncates to
    /// `out_len` (right-edge replication when `out_len` exceeds the repeat).
    pub fn upsample(
        &mut self,
        x: NodeId,
        factor: usize,
        axis: Axis,
        out_len: usize,
    ) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidArg("resample factor must be >= 1".into()));
        }
        let (f, s, c) = fsc(self.shape(x))?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        let mut value = vec![0.0; outer * out_len * inner];
        {
            let xv = self.value(x);
            for a in 0..outer {
                for m in 0..out_len {
                    let src_i = (m / factor).min(len - 1);
                    let src = (a * len + src_i) * inner;
                    let dst = (a * out_len + m) * inner;
                    value[dst..dst + inner].copy_from_slice(&xv[src..src + inner]);
                }
            }
        }
        let out_shape = match axis {
            Axis::Frequency => vec![out_len, s, c],
            Axis::Time => vec![f, out_len, c],
        };
        let ng = self.needs_grad(x);
        Ok(self.push(Op::Upsample { x, factor, axis }, out_shape, value, ng))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let (f, s, _) = fsc(self.shape(parts[0]))?;
        let mut c_total = 0usize;
        for &p in parts {
            let (pf, ps, pc) = fsc(self.shape(p))?;
            if (pf, ps) != (f, s) {
                return Err(Error::Shape(format!(
                    "concat_channels: grid {:?} vs {:?}",
                    (pf, ps),
                    (f, s)
                )));
            }
            c_total += pc;
        }
        let positions = f * s;
        let mut value = vec![0.0; positions * c_total];
        let mut offset = 0usize;
        for &p in parts {
            let pc = self.shape(p)[2];
            let pv = self.value(p);
            for pos in 0..positions {
                value[pos * c_total + offset..pos * c_total + offset + pc]
                    .copy_from_slice(&pv[pos * pc..(pos + 1) * pc]);
            }
            offset += pc;
        }
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            Op::ConcatChannels(parts.to_vec()),
            vec![f, s, c_total],
            value,
            ng,
        ))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (f, s, c) = fsc(self.shape(x))?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_channels {start}..{} out of {c} channels",
                start + len
            )));
        }
        let positions = f * s;
        let mut value = vec![0.0; positions * len];
        let xv = self.value(x);
        for pos in 0..positions {
            value[pos * len..(pos + 1) * len]
                .copy_from_slice(&xv[pos * c + start..pos * c + start + len]);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(
            Op::SliceChannels { x, start, len },
            vec![f, s, len],
            value,
            ng,
        ))
    }

    /// Stacks the time samples of the first `min(mix_channels, C)` channels
    /// into one vector per frequency bin, applies a shared linear map and
    /// adds the result back (residual). Remaining channels pass through.
    /// The weight holds the maximum supported stack `[M, M]`; the top-left
    /// block for the actual `C_s * S` size is used.
    pub fn symbol_mixer(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        mix_channels: usize,
    ) -> Result<NodeId> {
        let (f, s, c) = fsc(self.shape(x))?;
        let cs = mix_channels.min(c);
        let m_eff = cs * s;
        let wshape = self.shape(weight);
        if wshape.len() != 2 || wshape[0] != wshape[1] || wshape[0] < m_eff {
            return Err(Error::Shape(format!(
                "mixer weight must be square with side >= {m_eff}, got {wshape:?}"
            )));
        }
        if self.shape(bias)[0] < m_eff {
            return Err(Error::Shape("mixer bias shorter than stack".into()));
        }
        let m_full = wshape[0];
        let mut value = self.value(x).to_vec();
        {
            let xv = self.value(x);
            let wv = self.value(weight);
            let bv = self.value(bias);
            let mut v = vec![0.0; m_eff];
            let mut u = vec![0.0; m_eff];
            for fi in 0..f {
                for si in 0..s {
                    for ci in 0..cs {
                        v[si * cs + ci] = xv[(fi * s + si) * c + ci];
                    }
                }
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj = bv[j];
                }
                for (i, &vi) in v.iter().enumerate() {
                    if vi == 0.0 {
                        continue;
                    }
                    let wrow = &wv[i * m_full..i * m_full + m_eff];
                    for (uj, &w) in u.iter_mut().zip(wrow) {
                        *uj += vi * w;
                    }
                }
                for si in 0..s {
                    for ci in 0..cs {
                        value[(fi * s + si) * c + ci] += u[si * cs + ci];
                    }
                }
            }
        }
        let ng = self.needs_grad(x) || self.needs_grad(weight) || self.needs_grad(bias);
        Ok(self.push(
            Op::SymbolMixer {
                x,
                weight,
                bias,
                mix_channels: cs,
            },
            vec![f, s, c],
            value,
            ng,
        ))
    }

    /// Linear two-tap interpolation along `axis` using a fixed table.
    pub fn interp_axis(&mut self, x: NodeId, table: Arc<InterpTable>, axis: Axis) -> Result<NodeId> {
        let (f, s, c) = fsc(self.shape(x))?;
        let (outer, len, inner) = axis_split(self.shape(x), axis);
        for &(i0, _, i1, _) in &table.taps {
            if i0 >= len || i1 >= len {
                return Err(Error::Shape("interp table source out of range".into()));
            }
        }
        let out_len = table.out_len;
        debug_assert_eq!(table.taps.len(), out_len);
        let mut value = vec![0.0; outer * out_len * inner];
        {
            let xv = self.value(x);
            for a in 0..outer {
                for (m, &(i0, w0, i1, w1)) in table.taps.iter().enumerate() {
                    let dst = (a * out_len + m) * inner;
                    let s0 = (a * len + i0) * inner;
                    let s1 = (a * len + i1) * inner;
                    for k in 0..inner {
                        value[dst + k] = w0 * xv[s0 + k] + w1 * xv[s1 + k];
                    }
                }
            }
        }
        let out_shape = match axis {
            Axis::Frequency => vec![out_len, s, c],
            Axis::Time => vec![f, out_len, c],
        };
        let ng = self.needs_grad(x);
        Ok(self.push(Op::InterpAxis { x, table, axis }, out_shape, value, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v: f64 = self.value(x).iter().sum();
        let ng = self.needs_grad(x);
        self.push(Op::Sum(x), vec![], vec![v], ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1);
        let v: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        let ng = self.needs_grad(x);
        self.push(Op::Mean(x), vec![], vec![v], ng)
    }

    /// Numerically stable sigmoid cross entropy against {0,1} targets over
    /// the masked elements; `mean` divides by the masked count.
    pub fn sigmoid_bce(
        &mut self,
        logits: NodeId,
        targets: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
        mean: bool,
    ) -> Result<NodeId> {
        let n = self.value(logits).len();
        if targets.len() != n || mask.len() != n {
            return Err(Error::Shape(
                "sigmoid_bce: targets/mask length mismatch".into(),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut acc = 0.0;
        for ((&l, &t), &m) in self.value(logits).iter().zip(targets.iter()).zip(mask.iter()) {
            if !m {
                continue;
            }
            acc += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        if mean && count > 0 {
            acc /= count as f64;
        }
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Op::SigmoidBce {
                logits,
                targets,
                mask,
                mean,
                count,
            },
            vec![],
            vec![acc],
            ng,
        ))
    }

    /// Sum of squared errors against a fixed target over masked elements.
    pub fn sq_err_sum(
        &mut self,
        x: NodeId,
        target: Arc<Vec<f64>>,
        mask: Arc<Vec<bool>>,
    ) -> Result<NodeId> {
        let n = self.value(x).len();
        if target.len() != n || mask.len() != n {
            return Err(Error::Shape("sq_err_sum: target/mask length mismatch".into()));
        }
        let mut acc = 0.0;
        for ((&v, &t), &m) in self.value(x).iter().zip(target.iter()).zip(mask.iter()) {
            if m {
                let d = v - t;
                acc += d * d;
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Op::SqErrSum { x, target, mask }, vec![], vec![acc], ng))
    }

    /// Per-channel mean/variance deviation penalty over the leading
    /// dimensions: `(sum_c (mu_c - mu*)^2 + sum_c (v_c - v*)^2) / C`.
    pub fn moment_penalty(&mut self, x: NodeId, mean_target: f64, var_target: f64) -> Result<NodeId> {
        let shape = self.shape(x);
        let c = *shape.last().ok_or_else(|| {
            Error::Shape("moment_penalty needs a channel axis".into())
        })?;
        let n = self.value(x).len();
        let m = n / c;
        if m == 0 {
            return Err(Error::Shape("moment_penalty on empty tensor".into()));
        }
        let xv = self.value(x);
        let mut mu = vec![0.0; c];
        for p in 0..m {
            for ci in 0..c {
                mu[ci] += xv[p * c + ci];
            }
        }
        for v in mu.iter_mut() {
            *v /= m as f64;
        }
        let mut var = vec![0.0; c];
        for p in 0..m {
            for ci in 0..c {
                let d = xv[p * c + ci] - mu[ci];
                var[ci] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= m as f64;
        }
        let mut acc = 0.0;
        for ci in 0..c {
            let dm = mu[ci] - mean_target;
            let dv = var[ci] - var_target;
            acc += dm * dm + dv * dv;
        }
        acc /= c as f64;
        let ng = self.needs_grad(x);
        Ok(self.push(
            Op::MomentPenalty {
                x,
                mean_target,
                var_target,
                mu,
                var,
            },
            vec![],
            vec![acc],
            ng,
        ))
    }

    /// Pushes a precomputed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        out_shape: Vec<usize>,
        out_value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> NodeId {
        let ng = inputs.iter().any(|&i| self.needs_grad(i));
        self.push(Op::Custom { inputs, op }, out_shape, out_value, ng)
    }

    fn ensure_grad(&mut self, id: NodeId) -> &mut Vec<f64> {
        // Sized from the shape: some backward arms temporarily move the
        // value buffer out of the node.
        let len = self.nodes[id.0].shape.iter().product();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Populates gradients of every grad-requiring node reachable from
    /// `loss`. Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::InvalidArg(
                "backward on a detached graph: no tensor requires gradients".into(),
            ));
        }
        self.ensure_grad(loss)[0] += 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                self.grads[i] = None;
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    // Keep leaf gradients for the caller.
                    self.grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let ga = self.ensure_grad(a);
                        for (o, &v) in ga.iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                    if self.needs_grad(b) {
                        let gb = self.ensure_grad(b);
                        for (o, &v) in gb.iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let ga = self.ensure_grad(a);
                        for (o, &v) in ga.iter_mut().zip(&g) {
                            *o += v;
                        }
                    }
                    if self.needs_grad(b) {
                        let gb = self.ensure_grad(b);
                        for (o, &v) in gb.iter_mut().zip(&g) {
                            *o -= v;
                        }
                    }
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs_grad(a) {
                        let bv = self.nodes[b.0].value.clone();
                        let ga = self.ensure_grad(a);
                        for ((o, &v), &bb) in ga.iter_mut().zip(&g).zip(bv.iter()) {
                            *o += v * bb;
                        }
                    }
                    if self.needs_grad(b) {
                        let av = self.nodes[a.0].value.clone();
                        let gb = self.ensure_grad(b);
                        for ((o, &v), &aa) in gb.iter_mut().zip(&g).zip(av.iter()) {
                            *o += v * aa;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let ga = self.ensure_grad(a);
                    for (o, &v) in ga.iter_mut().zip(&g) {
                        *o += v * c;
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    {
                        let ga = self.ensure_grad(a);
                        for ((o, &v), &x) in ga.iter_mut().zip(&g).zip(av.iter()) {
                            if x > 0.0 {
                                *o += v;
                            }
                        }
                    }
                    self.nodes[a.0].value = av;
                }
                Op::DepthwiseConv { x, kernel, axis } => {
                    let (x, kernel, axis) = (*x, *kernel, *axis);
                    let (f, s, c) = fsc(&self.nodes[x.0].shape).expect("checked at forward");
                    let klen = self.nodes[kernel.0].shape[0];
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let kv = std::mem::take(&mut self.nodes[kernel.0].value);
                    let mut gx = if self.needs_grad(x) {
                        Some(std::mem::take(self.ensure_grad(x)))
                    } else {
                        None
                    };
                    let mut gk = if self.needs_grad(kernel) {
                        Some(std::mem::take(self.ensure_grad(kernel)))
                    } else {
                        None
                    };
                    depthwise_backward(
                        &xv,
                        (f, s, c),
                        &kv,
                        klen,
                        axis,
                        &g,
                        gx.as_deref_mut(),
                        gk.as_deref_mut(),
                    );
                    if let Some(gx) = gx {
                        *self.ensure_grad(x) = gx;
                    }
                    if let Some(gk) = gk {
                        *self.ensure_grad(kernel) = gk;
                    }
                    self.nodes[x.0].value = xv;
                    self.nodes[kernel.0].value = kv;
                }
                Op::PointwiseConv { x, weight, bias } => {
                    let (x, weight, bias) = (*x, *weight, *bias);
                    let (f, s, cin) = fsc(&self.nodes[x.0].shape).expect("checked at forward");
                    let cout = self.nodes[weight.0].shape[1];
                    let positions = f * s;
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let wv = std::mem::take(&mut self.nodes[weight.0].value);
                    if self.needs_grad(x) {
                        let mut gx = std::mem::take(self.ensure_grad(x));
                        for p in 0..positions {
                            let grow = &g[p * cout..(p + 1) * cout];
                            let gxrow = &mut gx[p * cin..(p + 1) * cin];
                            for (k, gxk) in gxrow.iter_mut().enumerate() {
                                let wrow = &wv[k * cout..(k + 1) * cout];
                                let mut acc = 0.0;
                                for (&gv, &w) in grow.iter().zip(wrow) {
                                    acc += gv * w;
                                }
                                *gxk += acc;
                            }
                        }
                        *self.ensure_grad(x) = gx;
                    }
                    if self.needs_grad(weight) {
                        let mut gw = std::mem::take(self.ensure_grad(weight));
                        for p in 0..positions {
                            let grow = &g[p * cout..(p + 1) * cout];
                            let xrow = &xv[p * cin..(p + 1) * cin];
                            for (k, &xvk) in xrow.iter().enumerate() {
                                if xvk == 0.0 {
                                    continue;
                                }
                                let gwrow = &mut gw[k * cout..(k + 1) * cout];
                                for (o, &gv) in gwrow.iter_mut().zip(grow) {
                                    *o += xvk * gv;
                                }
                            }
                        }
                        *self.ensure_grad(weight) = gw;
                    }
                    if let Some(b) = bias {
                        if self.needs_grad(b) {
                            let gb = self.ensure_grad(b);
                            for p in 0..positions {
                                let grow = &g[p * cout..(p + 1) * cout];
                                for (o, &gv) in gb.iter_mut().zip(grow) {
                                    *o += gv;
                                }
                            }
                        }
                    }
                    self.nodes[x.0].value = xv;
                    self.nodes[weight.0].value = wv;
                }
                Op::Downsample { x, factor, axis } => {
                    let (x, factor, axis) = (*x, *factor, *axis);
                    let (outer, len, inner) = axis_split(&self.nodes[x.0].shape, axis);
                    let out_len = div_ceil(len, factor);
                    let gx = self.ensure_grad(x);
                    for a in 0..outer {
                        for m in 0..out_len {
                            let src = (a * len + m * factor) * inner;
                            let dst = (a * out_len + m) * inner;
                            for k in 0..inner {
                                gx[src + k] += g[dst + k];
                            }
                        }
                    }
                }
                Op::Upsample { x, factor, axis } => {
                    let (x, factor, axis) = (*x, *factor, *axis);
                    let (outer, len, inner) = axis_split(&self.nodes[x.0].shape, axis);
                    let out_len = self.nodes[i].value.len() / (outer * inner);
                    let gx = self.ensure_grad(x);
                    for a in 0..outer {
                        for m in 0..out_len {
                            let src_i = (m / factor).min(len - 1);
                            let src = (a * len + src_i) * inner;
                            let dst = (a * out_len + m) * inner;
                            for k in 0..inner {
                                gx[src + k] += g[dst + k];
                            }
                        }
                    }
                }
                Op::ConcatChannels(parts) => {
                    let parts = parts.clone();
                    let c_total = self.nodes[i].shape[2];
                    let positions = self.nodes[i].shape[0] * self.nodes[i].shape[1];
                    let mut offset = 0usize;
                    for p in parts {
                        let pc = self.nodes[p.0].shape[2];
                        if self.needs_grad(p) {
                            let gp = self.ensure_grad(p);
                            for pos in 0..positions {
                                let src = pos * c_total + offset;
                                let dst = pos * pc;
                                for k in 0..pc {
                                    gp[dst + k] += g[src + k];
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::SliceChannels { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let c = self.nodes[x.0].shape[2];
                    let positions = self.nodes[x.0].shape[0] * self.nodes[x.0].shape[1];
                    let gx = self.ensure_grad(x);
                    for pos in 0..positions {
                        for k in 0..len {
                            gx[pos * c + start + k] += g[pos * len + k];
                        }
                    }
                }
                Op::SymbolMixer {
                    x,
                    weight,
                    bias,
                    mix_channels,
                } => {
                    let (x, weight, bias, cs) = (*x, *weight, *bias, *mix_channels);
                    let (f, s, c) = fsc(&self.nodes[x.0].shape).expect("checked");
                    let m_full = self.nodes[weight.0].shape[0];
                    let m_eff = cs * s;
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    let wv = std::mem::take(&mut self.nodes[weight.0].value);
                    let mut gx = if self.needs_grad(x) {
                        Some(std::mem::take(self.ensure_grad(x)))
                    } else {
                        None
                    };
                    let mut gw = if self.needs_grad(weight) {
                        Some(std::mem::take(self.ensure_grad(weight)))
                    } else {
                        None
                    };
                    let mut gb = if self.needs_grad(bias) {
                        Some(std::mem::take(self.ensure_grad(bias)))
                    } else {
                        None
                    };
                    let mut v = vec![0.0; m_eff];
                    let mut gu = vec![0.0; m_eff];
                    for fi in 0..f {
                        // Identity path.
                        if let Some(gx) = gx.as_deref_mut() {
                            let base = fi * s * c;
                            for k in 0..s * c {
                                gx[base + k] += g[base + k];
                            }
                        }
                        for si in 0..s {
                            for ci in 0..cs {
                                v[si * cs + ci] = xv[(fi * s + si) * c + ci];
                                gu[si * cs + ci] = g[(fi * s + si) * c + ci];
                            }
                        }
                        if let Some(gb) = gb.as_deref_mut() {
                            for (o, &gv) in gb.iter_mut().zip(gu.iter()) {
                                *o += gv;
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            for (ii, &vi) in v.iter().enumerate() {
                                if vi == 0.0 {
                                    continue;
                                }
                                let row = &mut gw[ii * m_full..ii * m_full + m_eff];
                                for (o, &gv) in row.iter_mut().zip(gu.iter()) {
                                    *o += vi * gv;
                                }
                            }
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            for si in 0..s {
                                for ci in 0..cs {
                                    let ii = si * cs + ci;
                                    let wrow = &wv[ii * m_full..ii * m_full + m_eff];
                                    let mut acc = 0.0;
                                    for (&gv, &w) in gu.iter().zip(wrow) {
                                        acc += gv * w;
                                    }
                                    gx[(fi * s + si) * c + ci] += acc;
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        *self.ensure_grad(x) = gx;
                    }
                    if let Some(gw) = gw {
                        *self.ensure_grad(weight) = gw;
                    }
                    if let Some(gb) = gb {
                        *self.ensure_grad(bias) = gb;
                    }
                    self.nodes[x.0].value = xv;
                    self.nodes[weight.0].value = wv;
                }
                Op::InterpAxis { x, table, axis } => {
                    let (x, table, axis) = (*x, table.clone(), *axis);
                    let (outer, len, inner) = axis_split(&self.nodes[x.0].shape, axis);
                    let out_len = table.out_len;
                    let gx = self.ensure_grad(x);
                    for a in 0..outer {
                        for (m, &(i0, w0, i1, w1)) in table.taps.iter().enumerate() {
                            let src = (a * out_len + m) * inner;
                            let d0 = (a * len + i0) * inner;
                            let d1 = (a * len + i1) * inner;
                            for k in 0..inner {
                                let gv = g[src + k];
                                gx[d0 + k] += w0 * gv;
                                gx[d1 + k] += w1 * gv;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let gv = g[0];
                    let gx = self.ensure_grad(x);
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                }
                Op::Mean(x) => {
                    let x = *x;
                    let n = self.nodes[x.0].value.len().max(1);
                    let gv = g[0] / n as f64;
                    let gx = self.ensure_grad(x);
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                }
                Op::SigmoidBce {
                    logits,
                    targets,
                    mask,
                    mean,
                    count,
                } => {
                    let (logits, targets, mask) = (*logits, targets.clone(), mask.clone());
                    let scale = if *mean && *count > 0 {
                        g[0] / *count as f64
                    } else {
                        g[0]
                    };
                    let lv = std::mem::take(&mut self.nodes[logits.0].value);
                    {
                        let gl = self.ensure_grad(logits);
                        for (((o, &l), &t), &m) in
                            gl.iter_mut().zip(lv.iter()).zip(targets.iter()).zip(mask.iter())
                        {
                            if m {
                                let sig = 1.0 / (1.0 + (-l).exp());
                                *o += scale * (sig - t);
                            }
                        }
                    }
                    self.nodes[logits.0].value = lv;
                }
                Op::SqErrSum { x, target, mask } => {
                    let (x, target, mask) = (*x, target.clone(), mask.clone());
                    let gv = g[0];
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    {
                        let gx = self.ensure_grad(x);
                        for (((o, &v), &t), &m) in
                            gx.iter_mut().zip(xv.iter()).zip(target.iter()).zip(mask.iter())
                        {
                            if m {
                                *o += gv * 2.0 * (v - t);
                            }
                        }
                    }
                    self.nodes[x.0].value = xv;
                }
                Op::MomentPenalty {
                    x,
                    mean_target,
                    var_target,
                    mu,
                    var,
                } => {
                    let x = *x;
                    let (mean_target, var_target) = (*mean_target, *var_target);
                    let mu = mu.clone();
                    let var = var.clone();
                    let c = mu.len();
                    let n = self.nodes[x.0].value.len();
                    let m = n / c;
                    let gv = g[0] / c as f64;
                    let xv = std::mem::take(&mut self.nodes[x.0].value);
                    {
                        let gx = self.ensure_grad(x);
                        for p in 0..m {
                            for ci in 0..c {
                                let xval = xv[p * c + ci];
                                let dmu = 2.0 * (mu[ci] - mean_target) / m as f64;
                                let dvar =
                                    2.0 * (var[ci] - var_target) * 2.0 * (xval - mu[ci]) / m as f64;
                                gx[p * c + ci] += gv * (dmu + dvar);
                            }
                        }
                    }
                    self.nodes[x.0].value = xv;
                }
                Op::Custom { inputs, .. } => {
                    let inputs = inputs.clone();
                    // Temporarily take inputs' grads; the op accumulates.
                    let mut grads_tmp: Vec<Option<Vec<f64>>> = inputs
                        .iter()
                        .map(|&id| {
                            if self.needs_grad(id) {
                                Some(std::mem::take(self.ensure_grad(id)))
                            } else {
                                None
                            }
                        })
                        .collect();
                    let out_value = std::mem::take(&mut self.nodes[i].value);
                    {
                        let input_values: Vec<&[f64]> = inputs
                            .iter()
                            .map(|&id| self.nodes[id.0].value.as_slice())
                            .collect();
                        let Op::Custom { op, .. } = &self.nodes[i].op else {
                            unreachable!()
                        };
                        op.backward(&out_value, &g, &input_values, &mut grads_tmp);
                    }
                    self.nodes[i].value = out_value;
                    for (id, gslot) in inputs.iter().zip(grads_tmp) {
                        if let Some(buf) = gslot {
                            *self.ensure_grad(*id) = buf;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn depthwise_forward(
    x: &[f64],
    (f, s, c): (usize, usize, usize),
    kernel: &[f64],
    klen: usize,
    axis: Axis,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let half = (klen / 2) as isize;
    match axis {
        Axis::Frequency => {
            let block = s * c;
            for t in 0..klen {
                let d = t as isize - half;
                let krow = &kernel[t * c..(t + 1) * c];
                let lo = (-d).max(0) as usize;
                let hi = ((f as isize - d).min(f as isize)).max(0) as usize;
                for fi in lo..hi {
                    let src = ((fi as isize + d) as usize) * block;
                    let dst = fi * block;
                    let src_b = &x[src..src + block];
                    let dst_b = &mut out[dst..dst + block];
                    for si in 0..s {
                        let sb = si * c;
                        for ci in 0..c {
                            dst_b[sb + ci] += src_b[sb + ci] * krow[ci];
                        }
                    }
                }
            }
        }
        Axis::Time => {
            for t in 0..klen {
                let d = t as isize - half;
                let krow = &kernel[t * c..(t + 1) * c];
                let lo = (-d).max(0) as usize;
                let hi = ((s as isize - d).min(s as isize)).max(0) as usize;
                for fi in 0..f {
                    let fbase = fi * s * c;
                    for si in lo..hi {
                        let src = fbase + ((si as isize + d) as usize) * c;
                        let dst = fbase + si * c;
                        for ci in 0..c {
                            out[dst + ci] += x[src + ci] * krow[ci];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    (f, s, c): (usize, usize, usize),
    kernel: &[f64],
    klen: usize,
    axis: Axis,
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gk: Option<&mut [f64]>,
) {
    let half = (klen / 2) as isize;
    match axis {
        Axis::Frequency => {
            let block = s * c;
            for t in 0..klen {
                let d = t as isize - half;
                let krow = &kernel[t * c..(t + 1) * c];
                let lo = (-d).max(0) as usize;
                let hi = ((f as isize - d).min(f as isize)).max(0) as usize;
                for fi in lo..hi {
                    let src = ((fi as isize + d) as usize) * block;
                    let dst = fi * block;
                    if let Some(gx) = gx.as_deref_mut() {
                        for si in 0..s {
                            let sb = si * c;
                            for ci in 0..c {
                                gx[src + sb + ci] += g[dst + sb + ci] * krow[ci];
                            }
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        let krow_g = &mut gk[t * c..(t + 1) * c];
                        for si in 0..s {
                            let sb = si * c;
                            for ci in 0..c {
                                krow_g[ci] += g[dst + sb + ci] * x[src + sb + ci];
                            }
                        }
                    }
                }
            }
        }
        Axis::Time => {
            for t in 0..klen {
                let d = t as isize - half;
                let lo = (-d).max(0) as usize;
                let hi = ((s as isize - d).min(s as isize)).max(0) as usize;
                for fi in 0..f {
                    let fbase = fi * s * c;
                    for si in lo..hi {
                        let src = fbase + ((si as isize + d) as usize) * c;
                        let dst = fbase + si * c;
                        if let Some(gx) = gx.as_deref_mut() {
                            let krow = &kernel[t * c..(t + 1) * c];
                            for ci in 0..c {
                                gx[src + ci] += g[dst + ci] * krow[ci];
                            }
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            let krow_g = &mut gk[t * c..(t + 1) * c];
                            for ci in 0..c {
                                krow_g[ci] += g[dst + ci] * x[src + ci];
                            }
                        }
                    }
                }
            }
        }
    }
}
