//! The autodiff tape: eager forward evaluation with recorded op nodes,
//! reverse-mode gradient accumulation, and full re-evaluation after
//! leaf edits (used by the finite-difference checker).

use super::kernels::{self, ConvDims};
use super::{Dims5, Element, Tensor, TensorError};
use crate::transform::Transform;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Registered operations. Leaves (`Param`, `Input`, `Constant`) carry
/// values but no computation; everything else has a forward rule and an
/// adjoint rule.
#[derive(Debug, Clone)]
pub enum Op {
    Param,
    Input,
    Constant,
    /// Inputs `[x, w]` or `[x, w, bias]`.
    Conv3d { stride: usize, pad: usize },
    /// Nearest-neighbor upsampling of the three spatial axes.
    Upsample3d { factor: usize },
    /// Inputs `[x, gamma, beta]`; normalizes over the spatial extent
    /// per sample and channel.
    InstanceNorm { eps: f64 },
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    Log,
    Exp,
    Recip,
    Clamp { lo: f64, hi: f64 },
    Add,
    Sub,
    Mul,
    ScalarMul { factor: f64 },
    Sum,
    Mean,
    /// Concatenate two 5-D tensors along the channel axis.
    Concat,
    SliceChannels { start: usize, len: usize },
    /// Inputs `[x, mask]`; zeroes entries where the constant mask is 0.
    MaskSelect,
    /// Permute/flip/shift the spatial axes of a 5-D tensor.
    SpatialTransform { t: Transform },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::Constant => "constant",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample3d { .. } => "upsample3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Recip => "recip",
            Op::Clamp { .. } => "clamp",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Concat => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::MaskSelect => "mask_select",
            Op::SpatialTransform { .. } => "spatial_transform",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Param | Op::Input | Op::Constant)
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    label: Option<String>,
}

/// An eager autodiff tape. Nodes are appended in execution order, so
/// the vector itself is a topological order: every input of a node
/// precedes it.
#[derive(Debug, Clone)]
pub struct Graph<E: Element> {
    nodes: Vec<Node>,
    values: Vec<Tensor<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.label {
            Some(l) => format!("{}#{} ({l})", node.op.name(), id.0),
            None => format!("{}#{}", node.op.name(), id.0),
        }
    }

    fn push_leaf(&mut self, op: Op, label: Option<String>, value: Tensor<E>) -> NodeId {
        assert!(
            value.all_finite(),
            "leaf {:?} fed a non-finite value",
            label
        );
        let requires_grad = matches!(op, Op::Param);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: vec![],
            requires_grad,
            label,
        });
        self.values.push(value);
        self.grads.push(None);
        id
    }

    /// Trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<E>) -> NodeId {
        self.push_leaf(Op::Param, Some(name.into()), value)
    }

    /// Named non-trainable leaf (network inputs, targets).
    pub fn input(&mut self, name: impl Into<String>, value: Tensor<E>) -> NodeId {
        self.push_leaf(Op::Input, Some(name.into()), value)
    }

    /// Anonymous non-trainable leaf (masks, noise, detached values).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push_leaf(Op::Constant, None, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    /// Scalar value of a single-element node, as `f64`.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TensorError> {
        self.values[id.0]
            .item()
            .map(|v| v.to_f64())
            .ok_or_else(|| TensorError::NotScalar {
                node: self.describe(id),
                shape: self.values[id.0].shape().to_vec(),
            })
    }

    /// Gradient accumulated for `id` by the last [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].op.is_leaf()
    }

    /// All `Param` leaves in creation order.
    pub fn params(&self) -> Vec<(String, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param))
            .map(|(i, n)| (n.label.clone().unwrap_or_default(), NodeId(i)))
            .collect()
    }

    /// Replace a leaf's value (same shape required).
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor<E>) -> Result<(), TensorError> {
        if !self.nodes[id.0].op.is_leaf() {
            return Err(TensorError::InvalidArgument(format!(
                "{} is not a leaf",
                self.describe(id)
            )));
        }
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::Shape {
                node: self.describe(id),
                detail: format!(
                    "leaf has shape {:?}, replacement {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Add `delta` to one element of a leaf (finite differences).
    pub(crate) fn nudge_leaf(&mut self, id: NodeId, flat: usize, delta: f64) {
        debug_assert!(self.nodes[id.0].op.is_leaf());
        let slot = &mut self.values[id.0].data_mut()[flat];
        *slot = *slot + E::from_f64(delta);
    }

    fn record(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor<E>,
    ) -> Result<NodeId, TensorError> {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                node: format!("{}#{}", op.name(), id.0),
            });
        }
        self.nodes.push(Node {
            op,
            inputs,
            requires_grad,
            label: None,
        });
        self.values.push(value);
        self.grads.push(None);
        Ok(id)
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, TensorError> {
        let value = self.eval(&op, &inputs, NodeId(self.nodes.len()))?;
        self.record(op, inputs, value)
    }

    // ---- op builders -----------------------------------------------------

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.apply(Op::Conv3d { stride, pad }, inputs)
    }

    pub fn upsample3d(&mut self, x: NodeId, factor: usize) -> Result<NodeId, TensorError> {
        self.apply(Op::Upsample3d { factor }, vec![x])
    }

    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        self.apply(Op::InstanceNorm { eps }, vec![x, gamma, beta])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sigmoid, vec![x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Square, vec![x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sqrt, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Log, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Exp, vec![x])
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Recip, vec![x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, TensorError> {
        self.apply(Op::Clamp { lo, hi }, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn scalar_mul(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.apply(Op::ScalarMul { factor }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mean, vec![x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Concat, vec![a, b])
    }

    pub fn slice_channels(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        self.apply(Op::SliceChannels { start, len }, vec![x])
    }

    pub fn mask_select(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[mask.0].requires_grad {
            return Err(TensorError::NonDifferentiable {
                node: format!("mask_select#{} (mask input)", self.nodes.len()),
            });
        }
        self.apply(Op::MaskSelect, vec![x, mask])
    }

    pub fn spatial_transform(&mut self, x: NodeId, t: Transform) -> Result<NodeId, TensorError> {
        self.apply(Op::SpatialTransform { t }, vec![x])
    }

    // ---- forward evaluation ----------------------------------------------

    fn shape_err(&self, op: &Op, at: NodeId, detail: String) -> TensorError {
        TensorError::Shape {
            node: format!("{}#{}", op.name(), at.0),
            detail,
        }
    }

    fn dims5(&self, op: &Op, at: NodeId, x: NodeId) -> Result<Dims5, TensorError> {
        Dims5::from_shape(self.values[x.0].shape()).ok_or_else(|| {
            self.shape_err(
                op,
                at,
                format!(
                    "expected a 5-D [n,c,d,h,w] tensor, got {:?}",
                    self.values[x.0].shape()
                ),
            )
        })
    }

    fn same_shape(&self, op: &Op, at: NodeId, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(self.shape_err(
                op,
                at,
                format!(
                    "operands have shapes {:?} and {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        Ok(())
    }

    fn eval(&self, op: &Op, inputs: &[NodeId], at: NodeId) -> Result<Tensor<E>, TensorError> {
        let val = |id: NodeId| &self.values[id.0];
        match op {
            Op::Param | Op::Input | Op::Constant => unreachable!("leaves are never re-evaluated"),
            Op::Conv3d { stride, pad } => {
                let xd = self.dims5(op, at, inputs[0])?;
                let wd = ConvDims::from_shape(val(inputs[1]).shape()).ok_or_else(|| {
                    self.shape_err(
                        op,
                        at,
                        format!("weight must be 5-D, got {:?}", val(inputs[1]).shape()),
                    )
                })?;
                if wd.ci != xd.c {
                    return Err(self.shape_err(
                        op,
                        at,
                        format!("input has {} channels, weight expects {}", xd.c, wd.ci),
                    ));
                }
                if kernels::conv_out_dims(xd, wd, *stride, *pad).is_none() {
                    return Err(self.shape_err(
                        op,
                        at,
                        format!(
                            "kernel {:?} with stride {stride} pad {pad} does not fit input {:?}",
                            val(inputs[1]).shape(),
                            val(inputs[0]).shape()
                        ),
                    ));
                }
                if let Some(&b) = inputs.get(2) {
                    if val(b).shape() != [wd.co] {
                        return Err(self.shape_err(
                            op,
                            at,
                            format!("bias shape {:?}, expected [{}]", val(b).shape(), wd.co),
                        ));
                    }
                }
                let bias = inputs.get(2).map(|&b| val(b).data());
                let (out, od) = kernels::conv3d_forward(
                    val(inputs[0]).data(),
                    xd,
                    val(inputs[1]).data(),
                    wd,
                    bias,
                    *stride,
                    *pad,
                );
                Tensor::from_vec(od.shape(), out)
            }
            Op::Upsample3d { factor } => {
                if *factor == 0 {
                    return Err(TensorError::InvalidArgument(
                        "upsample factor must be >= 1".into(),
                    ));
                }
                let xd = self.dims5(op, at, inputs[0])?;
                let (out, od) = kernels::upsample3d_forward(val(inputs[0]).data(), xd, *factor);
                Tensor::from_vec(od.shape(), out)
            }
            Op::InstanceNorm { eps } => {
                let xd = self.dims5(op, at, inputs[0])?;
                for (what, id) in [("gamma", inputs[1]), ("beta", inputs[2])] {
                    if val(id).shape() != [xd.c] {
                        return Err(self.shape_err(
                            op,
                            at,
                            format!("{what} shape {:?}, expected [{}]", val(id).shape(), xd.c),
                        ));
                    }
                }
                let out = kernels::instance_norm_forward(
                    val(inputs[0]).data(),
                    xd,
                    val(inputs[1]).data(),
                    val(inputs[2]).data(),
                    *eps,
                );
                Tensor::from_vec(xd.shape(), out)
            }
            Op::Relu => Ok(val(inputs[0]).map(|x| if x > E::ZERO { x } else { E::ZERO })),
            Op::Sigmoid => Ok(val(inputs[0]).map(sigmoid)),
            Op::Square => Ok(val(inputs[0]).map(|x| x * x)),
            Op::Sqrt => Ok(val(inputs[0]).map(E::sqrt)),
            Op::Log => Ok(val(inputs[0]).map(E::ln)),
            Op::Exp => Ok(val(inputs[0]).map(E::exp)),
            Op::Recip => Ok(val(inputs[0]).map(|x| E::ONE / x)),
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (E::from_f64(*lo), E::from_f64(*hi));
                Ok(val(inputs[0]).map(|x| {
                    if x < lo {
                        lo
                    } else if x > hi {
                        hi
                    } else {
                        x
                    }
                }))
            }
            Op::Add | Op::Sub | Op::Mul | Op::MaskSelect => {
                self.same_shape(op, at, inputs[0], inputs[1])?;
                let a = val(inputs[0]).data();
                let b = val(inputs[1]).data();
                let data: Vec<E> = match op {
                    Op::Add => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
                    Op::Sub => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
                    _ => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
                };
                Tensor::from_vec(val(inputs[0]).shape().to_vec(), data)
            }
            Op::ScalarMul { factor } => {
                let f = E::from_f64(*factor);
                Ok(val(inputs[0]).map(|x| x * f))
            }
            Op::Sum => {
                let mut acc = E::ZERO;
                for &v in val(inputs[0]).data() {
                    acc += v;
                }
                Ok(Tensor::scalar(acc))
            }
            Op::Mean => {
                let n = val(inputs[0]).numel();
                let mut acc = E::ZERO;
                for &v in val(inputs[0]).data() {
                    acc += v;
                }
                Ok(Tensor::scalar(acc / E::from_f64(n as f64)))
            }
            Op::Concat => {
                let a = self.dims5(op, at, inputs[0])?;
                let b = self.dims5(op, at, inputs[1])?;
                if (a.n, a.d, a.h, a.w) != (b.n, b.d, b.h, b.w) {
                    return Err(self.shape_err(
                        op,
                        at,
                        format!("non-channel dims differ: {:?} vs {:?}", a, b),
                    ));
                }
                let sp = a.spatial_len();
                let mut data = Vec::with_capacity(val(inputs[0]).numel() + val(inputs[1]).numel());
                let av = val(inputs[0]).data();
                let bv = val(inputs[1]).data();
                for n in 0..a.n {
                    data.extend_from_slice(&av[n * a.c * sp..(n + 1) * a.c * sp]);
                    data.extend_from_slice(&bv[n * b.c * sp..(n + 1) * b.c * sp]);
                }
                Tensor::from_vec(vec![a.n, a.c + b.c, a.d, a.h, a.w], data)
            }
            Op::SliceChannels { start, len } => {
                let xd = self.dims5(op, at, inputs[0])?;
                if start + len > xd.c || *len == 0 {
                    return Err(self.shape_err(
                        op,
                        at,
                        format!("channel slice {start}..{} of {} channels", start + len, xd.c),
                    ));
                }
                let sp = xd.spatial_len();
                let xv = val(inputs[0]).data();
                let mut data = Vec::with_capacity(xd.n * len * sp);
                for n in 0..xd.n {
                    let base = (n * xd.c + start) * sp;
                    data.extend_from_slice(&xv[base..base + len * sp]);
                }
                Tensor::from_vec(vec![xd.n, *len, xd.d, xd.h, xd.w], data)
            }
            Op::SpatialTransform { t } => {
                let xd = self.dims5(op, at, inputs[0])?;
                let spatial = xd.spatial();
                let out_sp = t.out_dims(spatial);
                let sp = xd.spatial_len();
                let xv = val(inputs[0]).data();
                let mut data = Vec::with_capacity(xv.len());
                let mut scratch = Vec::new();
                for g in 0..xd.n * xd.c {
                    t.apply_slice(spatial, &xv[g * sp..(g + 1) * sp], &mut scratch);
                    data.extend_from_slice(&scratch);
                }
                Tensor::from_vec(vec![xd.n, xd.c, out_sp[0], out_sp[1], out_sp[2]], data)
            }
        }
    }

    /// Re-evaluate every non-leaf node from current leaf values, in
    /// recorded order. Bit-identical to the original evaluation for
    /// unchanged leaves.
    pub fn reforward(&mut self) -> Result<(), TensorError> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let value = self.eval(&op, &inputs, NodeId(i))?;
            if !value.all_finite() {
                return Err(TensorError::NonFinite {
                    node: self.describe(NodeId(i)),
                });
            }
            self.values[i] = value;
        }
        Ok(())
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulate gradients of the scalar `output` into every node that
    /// requires them. Leaf gradients are then available via [`Graph::grad`].
    pub fn backward(&mut self, output: NodeId) -> Result<(), TensorError> {
        if self.values[output.0].numel() != 1 {
            return Err(TensorError::NotScalar {
                node: self.describe(output),
                shape: self.values[output.0].shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let seed_shape = self.values[output.0].shape().to_vec();
        self.grads[output.0] = Some(Tensor::full(&seed_shape, E::ONE));

        for i in (0..=output.0).rev() {
            if self.grads[i].is_none() || self.nodes[i].op.is_leaf() || !self.nodes[i].requires_grad
            {
                continue;
            }
            let g = self.grads[i].clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            let inputs = self.nodes[i].inputs.clone();
            let needed: Vec<bool> = inputs
                .iter()
                .map(|inp| self.nodes[inp.0].requires_grad)
                .collect();
            let contributions = self.adjoint(&op, &inputs, NodeId(i), &g, &needed)?;
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !contrib.all_finite() {
                    return Err(TensorError::NonFinite {
                        node: format!("{} (backward)", self.describe(NodeId(i))),
                    });
                }
                match &mut self.grads[input.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contribution for each input of a node; `None` for
    /// inputs that never receive gradients (masks).
    fn adjoint(
        &self,
        op: &Op,
        inputs: &[NodeId],
        at: NodeId,
        g: &Tensor<E>,
        needed: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>, TensorError> {
        let val = |id: NodeId| &self.values[id.0];
        let out_val = &self.values[at.0];
        let ew = |data: Vec<E>, like: &Tensor<E>| {
            Tensor::from_vec(like.shape().to_vec(), data).map(Some)
        };
        match op {
            Op::Param | Op::Input | Op::Constant => Ok(vec![]),
            Op::Conv3d { stride, pad } => {
                let xd = Dims5::from_shape(val(inputs[0]).shape()).expect("validated");
                let wd = ConvDims::from_shape(val(inputs[1]).shape()).expect("validated");
                let od = Dims5::from_shape(out_val.shape()).expect("validated");
                let mut out: Vec<Option<Tensor<E>>> = Vec::with_capacity(inputs.len());
                if needed[0] {
                    let dx = kernels::conv3d_backward_input(g.data(), od, val(inputs[1]).data(), wd, xd, *stride, *pad);
                    out.push(Some(Tensor::from_vec(xd.shape(), dx)?));
                } else {
                    out.push(None);
                }
                if needed[1] {
                    let dw = kernels::conv3d_backward_weight(g.data(), od, val(inputs[0]).data(), xd, wd, *stride, *pad);
                    out.push(Some(Tensor::from_vec(val(inputs[1]).shape().to_vec(), dw)?));
                } else {
                    out.push(None);
                }
                if inputs.len() == 3 {
                    if needed[2] {
                        let db = kernels::conv3d_backward_bias(g.data(), od);
                        out.push(Some(Tensor::from_vec(vec![wd.co], db)?));
                    } else {
                        out.push(None);
                    }
                }
                Ok(out)
            }
            Op::Upsample3d { factor } => {
                let xd = Dims5::from_shape(val(inputs[0]).shape()).expect("validated");
                let od = Dims5::from_shape(out_val.shape()).expect("validated");
                let dx = kernels::upsample3d_backward(g.data(), od, xd, *factor);
                Ok(vec![Some(Tensor::from_vec(xd.shape(), dx)?)])
            }
            Op::InstanceNorm { eps } => {
                let xd = Dims5::from_shape(val(inputs[0]).shape()).expect("validated");
                let (dx, dgamma, dbeta) = kernels::instance_norm_backward(
                    g.data(),
                    val(inputs[0]).data(),
                    xd,
                    val(inputs[1]).data(),
                    *eps,
                );
                Ok(vec![
                    Some(Tensor::from_vec(xd.shape(), dx)?),
                    Some(Tensor::from_vec(vec![xd.c], dgamma)?),
                    Some(Tensor::from_vec(vec![xd.c], dbeta)?),
                ])
            }
            Op::Relu => {
                let x = val(inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > E::ZERO { g } else { E::ZERO })
                    .collect();
                ew(data, x).map(|t| vec![t])
            }
            Op::Sigmoid => {
                let y = out_val;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (E::ONE - y))
                    .collect();
                ew(data, y).map(|t| vec![t])
            }
            Op::Square => {
                let x = val(inputs[0]);
                let two = E::from_f64(2.0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| two * x * g)
                    .collect();
                ew(data, x).map(|t| vec![t])
            }
            Op::Sqrt => {
                let y = out_val;
                let half = E::from_f64(0.5);
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| half * g / y)
                    .collect();
                ew(data, y).map(|t| vec![t])
            }
            Op::Log => {
                let x = val(inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g / x)
                    .collect();
                ew(data, x).map(|t| vec![t])
            }
            Op::Exp => {
                let y = out_val;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                ew(data, y).map(|t| vec![t])
            }
            Op::Recip => {
                let y = out_val;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| -g * y * y)
                    .collect();
                ew(data, y).map(|t| vec![t])
            }
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (E::from_f64(*lo), E::from_f64(*hi));
                let x = val(inputs[0]);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > lo && x < hi { g } else { E::ZERO })
                    .collect();
                ew(data, x).map(|t| vec![t])
            }
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => {
                let neg = g.map(|v| -v);
                Ok(vec![Some(g.clone()), Some(neg)])
            }
            Op::Mul => {
                let a = val(inputs[0]);
                let b = val(inputs[1]);
                let da: Vec<E> = b.data().iter().zip(g.data()).map(|(&b, &g)| b * g).collect();
                let db: Vec<E> = a.data().iter().zip(g.data()).map(|(&a, &g)| a * g).collect();
                Ok(vec![
                    Some(Tensor::from_vec(a.shape().to_vec(), da)?),
                    Some(Tensor::from_vec(b.shape().to_vec(), db)?),
                ])
            }
            Op::ScalarMul { factor } => {
                let f = E::from_f64(*factor);
                Ok(vec![Some(g.map(|v| v * f))])
            }
            Op::Sum => {
                let gv = g.item().expect("sum output is scalar");
                Ok(vec![Some(Tensor::full(val(inputs[0]).shape(), gv))])
            }
            Op::Mean => {
                let n = val(inputs[0]).numel();
                let gv = g.item().expect("mean output is scalar") / E::from_f64(n as f64);
                Ok(vec![Some(Tensor::full(val(inputs[0]).shape(), gv))])
            }
            Op::Concat => {
                let a = Dims5::from_shape(val(inputs[0]).shape()).expect("validated");
                let b = Dims5::from_shape(val(inputs[1]).shape()).expect("validated");
                let sp = a.spatial_len();
                let gd = g.data();
                let mut da = Vec::with_capacity(val(inputs[0]).numel());
                let mut db = Vec::with_capacity(val(inputs[1]).numel());
                let row = (a.c + b.c) * sp;
                for n in 0..a.n {
                    da.extend_from_slice(&gd[n * row..n * row + a.c * sp]);
                    db.extend_from_slice(&gd[n * row + a.c * sp..(n + 1) * row]);
                }
                Ok(vec![
                    Some(Tensor::from_vec(a.shape(), da)?),
                    Some(Tensor::from_vec(b.shape(), db)?),
                ])
            }
            Op::SliceChannels { start, len } => {
                let xd = Dims5::from_shape(val(inputs[0]).shape()).expect("validated");
                let sp = xd.spatial_len();
                let mut dx = vec![E::ZERO; val(inputs[0]).numel()];
                let gd = g.data();
                for n in 0..xd.n {
                    let dst = (n * xd.c + start) * sp;
                    let src = n * len * sp;
                    dx[dst..dst + len * sp].copy_from_slice(&gd[src..src + len * sp]);
                }
                Ok(vec![Some(Tensor::from_vec(xd.shape(), dx)?)])
            }
            Op::MaskSelect => {
                let mask = val(inputs[1]);
                let data = mask
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&m, &g)| m * g)
                    .collect();
                Ok(vec![ew(data, mask)?, None])
            }
            Op::SpatialTransform { t } => {
                let od = Dims5::from_shape(out_val.shape()).expect("validated");
                let inv = t.invert();
                let sp = od.spatial_len();
                let gd = g.data();
                let mut dx = Vec::with_capacity(gd.len());
                let mut scratch = Vec::new();
                for grp in 0..od.n * od.c {
                    inv.apply_slice(od.spatial(), &gd[grp * sp..(grp + 1) * sp], &mut scratch);
                    dx.extend_from_slice(&scratch);
                }
                Ok(vec![Some(Tensor::from_vec(
                    val(inputs[0]).shape().to_vec(),
                    dx,
                )?)])
            }
        }
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", t64(&[1], &[0.0]));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", t64(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_sums_the_window() {
        // 3x3x3 ones against a single 3x3x3 ones kernel, valid padding:
        // one output voxel holding the 27-term dot product.
        let mut g = Graph::<f64>::new();
        let x = g.input("x", Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let w = g.param("w", Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[27.0]);

        // d(sum)/dw is the input window itself: all ones.
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t64(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t64(&[1], &[0.0]));
        let y = g.sigmoid(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t64(&[2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", t64(&[2], &[1.0, 2.0]));
        let b = g.input("b", t64(&[3], &[1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(TensorError::Shape { node, .. }) => assert!(node.starts_with("add#")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", t64(&[1], &[0.0]));
        assert!(matches!(
            g.log(x),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn mean_times_count_equals_sum() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..97).map(|i| (i as f64).sin()).collect();
        let x = g.input("x", t64(&[97], &data));
        let m = g.mean(x).unwrap();
        let s = g.sum(x).unwrap();
        let m = g.scalar_value(m).unwrap();
        let s = g.scalar_value(s).unwrap();
        assert!((m * 97.0 - s).abs() < 1e-12);
    }

    #[test]
    fn reforward_is_bit_identical_without_edits() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t64(&[4], &[0.3, -1.2, 2.4, 0.01]));
        let y = g.sigmoid(x).unwrap();
        let sq = g.square(y).unwrap();
        let out = g.sum(sq).unwrap();
        let before = g.scalar_value(out).unwrap();
        g.reforward().unwrap();
        assert_eq!(g.scalar_value(out).unwrap().to_bits(), before.to_bits());
    }

    #[test]
    fn masked_values_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.constant(t64(&[4], &[1.0, 0.0, 1.0, 0.0]));
        let y = g.mask_select(x, m).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.param("a", Tensor::full(&[1, 2, 2, 2, 2], 1.0));
        let b = g.param("b", Tensor::full(&[1, 1, 2, 2, 2], 2.0));
        let cat = g.concat(a, b).unwrap();
        assert_eq!(g.shape(cat), &[1, 3, 2, 2, 2]);
        // Select only the b-half so a receives zero gradient.
        let sl = g.slice_channels(cat, 2, 1).unwrap();
        let s = g.sum(sl).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
