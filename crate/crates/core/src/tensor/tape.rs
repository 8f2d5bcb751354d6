//! Define-by-run computation tape.
//!
//! Every operation appends a node holding its output value and enough
//! information to run the backward rule. Node order is creation order, which
//! is a topological order of the graph, so a single reverse sweep visits each
//! node exactly once and accumulates (never overwrites) operand gradients.

use super::kernels;
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    ConvT2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Relu {
        input: TensorId,
    },
    Sigmoid {
        input: TensorId,
    },
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
    },
    Affine {
        input: TensorId,
        mul: T,
    },
    ConcatC {
        a: TensorId,
        b: TensorId,
    },
    SliceC {
        input: TensorId,
        from: usize,
    },
    SliceN {
        input: TensorId,
        index: usize,
    },
    Reduce {
        input: TensorId,
        axis: Axis,
        kind: ReduceKind,
        argmax: Vec<u32>,
    },
    SumAll {
        input: TensorId,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Shape,
    value: Vec<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are stored per node; gradients are filled by
/// [`Tape::backward`] and read back with [`Tape::grad`] or copied into a
/// [`ParamSet`] with [`Tape::grads_into`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    param_leaves: BTreeMap<String, TensorId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-axis step for broadcast-aware iteration; zero on singleton axes.
fn strides_for(op: Shape, out: Shape) -> [usize; 4] {
    let sw = if op.w == out.w { 1 } else { 0 };
    let sh = if op.h == out.h { op.w } else { 0 };
    let sc = if op.c == out.c { op.h * op.w } else { 0 };
    let sn = if op.n == out.n { op.c * op.h * op.w } else { 0 };
    [sn, sc, sh, sw]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            param_leaves: BTreeMap::new(),
        }
    }

    fn push(&mut self, op: Op<T>, shape: Shape, value: Vec<T>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(value.len(), shape.numel());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn value_scalar(&self, id: TensorId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Registers a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> TensorId {
        self.push(Op::Leaf, t.shape, t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<TensorId> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                dim: "numel",
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    /// Registers the named parameter as a differentiable leaf. Repeated
    /// registration of the same name returns the existing leaf.
    pub fn param(&mut self, name: &str, params: &ParamSet<T>) -> Result<TensorId> {
        if let Some(id) = self.param_leaves.get(name) {
            return Ok(*id);
        }
        let t = params.get(name).ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })?;
        let id = self.push(Op::Leaf, t.shape, t.data.clone(), true);
        self.param_leaves.insert(name.to_string(), id);
        Ok(id)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let ishape = self.shape(input);
        let wshape = self.shape(weight);
        if wshape.c != ishape.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "in_channels",
                expected: wshape.c,
                got: ishape.c,
            });
        }
        if wshape.h != wshape.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "kernel",
                expected: wshape.h,
                got: wshape.w,
            });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::InvalidConfig(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        if ishape.h + 2 * padding < wshape.h || ishape.w + 2 * padding < wshape.w {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "spatial",
                expected: wshape.h,
                got: ishape.h + 2 * padding,
            });
        }
        if let Some(b) = bias {
            let bshape = self.shape(b);
            if bshape.numel() != wshape.n {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias",
                    expected: wshape.n,
                    got: bshape.numel(),
                });
            }
        }
        let oshape = kernels::conv2d_out_shape(ishape, wshape, stride, padding);
        let mut out = vec![T::ZERO; oshape.numel()];
        kernels::conv2d_forward(
            &self.nodes[input.0].value,
            ishape,
            &self.nodes[weight.0].value,
            wshape,
            bias.map(|b| self.nodes[b.0].value.as_slice()),
            stride,
            padding,
            &mut out,
            oshape,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            oshape,
            out,
            rg,
        ))
    }

    /// Kernel 2x2, stride 2; output spatial dims are exactly doubled.
    pub fn conv_transpose2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId> {
        let ishape = self.shape(input);
        let wshape = self.shape(weight); // (IC, OC, 2, 2)
        if wshape.n != ishape.c {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                dim: "in_channels",
                expected: wshape.n,
                got: ishape.c,
            });
        }
        if wshape.h != 2 || wshape.w != 2 {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                dim: "kernel",
                expected: 2,
                got: wshape.h,
            });
        }
        if let Some(b) = bias {
            if self.shape(b).numel() != wshape.c {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose2d",
                    dim: "bias",
                    expected: wshape.c,
                    got: self.shape(b).numel(),
                });
            }
        }
        let oshape = Shape {
            n: ishape.n,
            c: wshape.c,
            h: 2 * ishape.h,
            w: 2 * ishape.w,
        };
        let mut out = vec![T::ZERO; oshape.numel()];
        kernels::conv_transpose2d_forward(
            &self.nodes[input.0].value,
            ishape,
            &self.nodes[weight.0].value,
            wshape.c,
            bias.map(|b| self.nodes[b.0].value.as_slice()),
            &mut out,
            oshape,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.map_or(false, |b| self.rg(b));
        Ok(self.push(
            Op::ConvT2d {
                input,
                weight,
                bias,
            },
            oshape,
            out,
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let ishape = self.shape(input);
        if ishape.h % 2 != 0 || ishape.w % 2 != 0 {
            return Err(Error::OddSpatial {
                op: "maxpool2",
                h: ishape.h,
                w: ishape.w,
            });
        }
        let oshape = Shape {
            n: ishape.n,
            c: ishape.c,
            h: ishape.h / 2,
            w: ishape.w / 2,
        };
        let mut out = vec![T::ZERO; oshape.numel()];
        let mut argmax = Vec::new();
        kernels::maxpool2_forward(&self.nodes[input.0].value, ishape, &mut out, oshape, &mut argmax);
        let rg = self.rg(input);
        Ok(self.push(Op::MaxPool2 { input, argmax }, oshape, out, rg))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let shape = self.shape(input);
        let value: Vec<T> = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| v.max(T::ZERO))
            .collect();
        let rg = self.rg(input);
        self.push(Op::Relu { input }, shape, value, rg)
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let shape = self.shape(input);
        let value: Vec<T> = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| sigmoid_stable(v))
            .collect();
        let rg = self.rg(input);
        self.push(Op::Sigmoid { input }, shape, value, rg)
    }

    /// `y = mul * x + add`, with constant coefficients.
    pub fn affine(&mut self, input: TensorId, mul: T, add: T) -> TensorId {
        let shape = self.shape(input);
        let value: Vec<T> = self.nodes[input.0]
            .value
            .iter()
            .map(|&v| mul * v + add)
            .collect();
        let rg = self.rg(input);
        self.push(Op::Affine { input, mul }, shape, value, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise op over equal shapes, or a broadcast where one operand is
    /// a spatial map (C = 1) or a channel vector (H = W = 1).
    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = broadcast_out(sa, sb).ok_or_else(|| Error::BroadcastMismatch {
            op: match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            lhs: sa.to_string(),
            rhs: sb.to_string(),
        })?;
        let [an, ac, ah, aw] = strides_for(sa, out);
        let [bn, bc, bh, bw] = strides_for(sb, out);
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(out.numel());
        for n in 0..out.n {
            for c in 0..out.c {
                for h in 0..out.h {
                    let ia = n * an + c * ac + h * ah;
                    let ib = n * bn + c * bc + h * bh;
                    for w in 0..out.w {
                        let x = va[ia + w * aw];
                        let y = vb[ib + w * bw];
                        value.push(match kind {
                            BinaryKind::Add => x + y,
                            BinaryKind::Sub => x - y,
                            BinaryKind::Mul => x * y,
                            BinaryKind::Div => x / y,
                        });
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary { kind, a, b }, out, value, rg))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        for (dim, ea, eb) in [
            ("batch", sa.n, sb.n),
            ("height", sa.h, sb.h),
            ("width", sa.w, sb.w),
        ] {
            if ea != eb {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dim: match dim {
                        "batch" => "batch",
                        "height" => "height",
                        _ => "width",
                    },
                    expected: ea,
                    got: eb,
                });
            }
        }
        let out = Shape {
            n: sa.n,
            c: sa.c + sb.c,
            h: sa.h,
            w: sa.w,
        };
        let plane = sa.h * sa.w;
        let mut value = vec![T::ZERO; out.numel()];
        for n in 0..out.n {
            for c in 0..sa.c {
                let src = &self.nodes[a.0].value[sa.plane(n, c)..][..plane];
                value[out.plane(n, c)..][..plane].copy_from_slice(src);
            }
            for c in 0..sb.c {
                let src = &self.nodes[b.0].value[sb.plane(n, c)..][..plane];
                value[out.plane(n, sa.c + c)..][..plane].copy_from_slice(src);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatC { a, b }, out, value, rg))
    }

    /// Channels `[from, to)` of the input.
    pub fn slice_channels(&mut self, input: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let s = self.shape(input);
        if from >= to || to > s.c {
            return Err(Error::ShapeMismatch {
                op: "slice_channels",
                dim: "channel",
                expected: s.c,
                got: to,
            });
        }
        let out = Shape {
            n: s.n,
            c: to - from,
            h: s.h,
            w: s.w,
        };
        let plane = s.h * s.w;
        let mut value = vec![T::ZERO; out.numel()];
        for n in 0..s.n {
            for c in from..to {
                let src = &self.nodes[input.0].value[s.plane(n, c)..][..plane];
                value[out.plane(n, c - from)..][..plane].copy_from_slice(src);
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Op::SliceC { input, from }, out, value, rg))
    }

    /// Single batch element `index` as a `1xCxHxW` tensor.
    pub fn slice_batch(&mut self, input: TensorId, index: usize) -> Result<TensorId> {
        let s = self.shape(input);
        if index >= s.n {
            return Err(Error::ShapeMismatch {
                op: "slice_batch",
                dim: "batch",
                expected: s.n,
                got: index,
            });
        }
        let out = Shape {
            n: 1,
            c: s.c,
            h: s.h,
            w: s.w,
        };
        let len = out.numel();
        let value = self.nodes[input.0].value[index * len..][..len].to_vec();
        let rg = self.rg(input);
        Ok(self.push(Op::SliceN { input, index }, out, value, rg))
    }

    /// Channel-axis reduce yields `Nx1xHxW`; spatial-axis reduce yields
    /// `NxCx1x1`. Max reductions route gradient to the first maximal element
    /// in row-major order.
    pub fn reduce(&mut self, input: TensorId, axis: Axis, kind: ReduceKind) -> TensorId {
        let s = self.shape(input);
        let out = match axis {
            Axis::Channel => Shape {
                n: s.n,
                c: 1,
                h: s.h,
                w: s.w,
            },
            Axis::Spatial => Shape {
                n: s.n,
                c: s.c,
                h: 1,
                w: 1,
            },
        };
        let v = &self.nodes[input.0].value;
        let plane = s.h * s.w;
        let mut value = vec![T::ZERO; out.numel()];
        let mut argmax = Vec::new();
        match (axis, kind) {
            (Axis::Channel, ReduceKind::Mean) => {
                let inv = T::from_f64(1.0 / s.c as f64);
                for n in 0..s.n {
                    let dst = &mut value[n * plane..][..plane];
                    for c in 0..s.c {
                        let src = &v[s.plane(n, c)..][..plane];
                        for (d, x) in dst.iter_mut().zip(src) {
                            *d += *x;
                        }
                    }
                    for d in dst.iter_mut() {
                        *d = *d * inv;
                    }
                }
            }
            (Axis::Channel, ReduceKind::Max) => {
                argmax = vec![0u32; out.numel()];
                for n in 0..s.n {
                    for i in 0..plane {
                        let mut best = v[s.plane(n, 0) + i];
                        let mut best_c = 0usize;
                        for c in 1..s.c {
                            let x = v[s.plane(n, c) + i];
                            if x > best {
                                best = x;
                                best_c = c;
                            }
                        }
                        value[n * plane + i] = best;
                        argmax[n * plane + i] = best_c as u32;
                    }
                }
            }
            (Axis::Spatial, ReduceKind::Mean) => {
                let inv = T::from_f64(1.0 / plane as f64);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let mut acc = T::ZERO;
                        for x in &v[s.plane(n, c)..][..plane] {
                            acc += *x;
                        }
                        value[n * s.c + c] = acc * inv;
                    }
                }
            }
            (Axis::Spatial, ReduceKind::Max) => {
                argmax = vec![0u32; out.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let src = &v[s.plane(n, c)..][..plane];
                        let mut best = src[0];
                        let mut best_i = 0usize;
                        for (i, x) in src.iter().enumerate().skip(1) {
                            if *x > best {
                                best = *x;
                                best_i = i;
                            }
                        }
                        value[n * s.c + c] = best;
                        argmax[n * s.c + c] = best_i as u32;
                    }
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            Op::Reduce {
                input,
                axis,
                kind,
                argmax,
            },
            out,
            value,
            rg,
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let mut acc = T::ZERO;
        for x in &self.nodes[input.0].value {
            acc += *x;
        }
        let rg = self.rg(input);
        self.push(Op::SumAll { input }, Shape::scalar(), vec![acc], rg)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populates gradients of every `requires_grad` node reachable from
    /// `loss`. `loss` must be scalar; calling twice without
    /// [`Tape::reset_backward`] is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let numel = self.nodes[loss.0].shape.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf gradients stay available for queries
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    pub fn reset_backward(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Accumulates leaf gradients into the matching parameters.
    pub fn grads_into(&self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, id) in &self.param_leaves {
            if let Some(g) = self.grad(*id) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn take_or_alloc_grad(&mut self, id: TensorId) -> Vec<T> {
        let numel = self.nodes[id.0].shape.numel();
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| vec![T::ZERO; numel])
    }

    fn put_grad(&mut self, id: TensorId, g: Vec<T>) {
        self.grads[id.0] = Some(g);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Ops are dispatched on a borrowed copy of the identifying fields so
        // the node table can be re-borrowed mutably for gradient writes.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (input, weight, bias, stride, padding) =
                    (*input, *weight, *bias, *stride, *padding);
                let ishape = self.shape(input);
                let wshape = self.shape(weight);
                let oshape = self.nodes[i].shape;
                if self.rg(input) {
                    let mut gin = self.take_or_alloc_grad(input);
                    kernels::conv2d_backward_input(
                        g,
                        oshape,
                        &self.nodes[weight.0].value,
                        wshape,
                        stride,
                        padding,
                        &mut gin,
                        ishape,
                    );
                    self.put_grad(input, gin);
                }
                if self.rg(weight) {
                    let mut gw = self.take_or_alloc_grad(weight);
                    let mut gb = bias
                        .filter(|b| self.rg(*b))
                        .map(|b| self.take_or_alloc_grad(b));
                    kernels::conv2d_backward_weight(
                        &self.nodes[input.0].value,
                        ishape,
                        g,
                        oshape,
                        wshape,
                        stride,
                        padding,
                        &mut gw,
                        gb.as_deref_mut(),
                    );
                    self.put_grad(weight, gw);
                    if let (Some(b), Some(gbv)) = (bias, gb) {
                        self.put_grad(b, gbv);
                    }
                } else if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut gb = self.take_or_alloc_grad(b);
                    let plane = oshape.h * oshape.w;
                    for oc in 0..oshape.c {
                        let mut acc = T::ZERO;
                        for n in 0..oshape.n {
                            for x in &g[oshape.plane(n, oc)..][..plane] {
                                acc += *x;
                            }
                        }
                        gb[oc] += acc;
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::ConvT2d {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let ishape = self.shape(input);
                let oshape = self.nodes[i].shape;
                let oc_count = oshape.c;
                let mut gin = self.take_or_alloc_grad(input);
                let mut gw = self.take_or_alloc_grad(weight);
                let mut gb = bias
                    .filter(|b| self.rg(*b))
                    .map(|b| self.take_or_alloc_grad(b));
                kernels::conv_transpose2d_backward(
                    &self.nodes[input.0].value,
                    ishape,
                    &self.nodes[weight.0].value,
                    oc_count,
                    g,
                    oshape,
                    &mut gin,
                    &mut gw,
                    gb.as_deref_mut(),
                );
                if self.rg(input) {
                    self.put_grad(input, gin);
                }
                if self.rg(weight) {
                    self.put_grad(weight, gw);
                }
                if let (Some(b), Some(gbv)) = (bias, gb) {
                    self.put_grad(b, gbv);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let oshape = self.nodes[i].shape;
                let ishape = self.shape(input);
                // argmax indices are in-plane; borrow rules force a copy of
                // the (small) index table before mutating gradients.
                let argmax = argmax.clone();
                let mut gin = self.take_or_alloc_grad(input);
                kernels::maxpool2_backward(g, oshape, &argmax, &mut gin, ishape);
                self.put_grad(input, gin);
            }
            Op::Relu { input } => {
                let input = *input;
                let mut gin = self.take_or_alloc_grad(input);
                for ((gi, go), x) in gin.iter_mut().zip(g).zip(&self.nodes[input.0].value) {
                    if *x > T::ZERO {
                        *gi += *go;
                    }
                }
                self.put_grad(input, gin);
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let mut gin = self.take_or_alloc_grad(input);
                for ((gi, go), s) in gin.iter_mut().zip(g).zip(&self.nodes[i].value) {
                    *gi += *go * *s * (T::ONE - *s);
                }
                self.put_grad(input, gin);
            }
            Op::Affine { input, mul } => {
                let (input, mul) = (*input, *mul);
                let mut gin = self.take_or_alloc_grad(input);
                for (gi, go) in gin.iter_mut().zip(g) {
                    *gi += *go * mul;
                }
                self.put_grad(input, gin);
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                self.backprop_binary(i, kind, a, b, g);
            }
            Op::ConcatC { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a);
                let sb = self.shape(b);
                let out = self.nodes[i].shape;
                let plane = sa.h * sa.w;
                if self.rg(a) {
                    let mut ga = self.take_or_alloc_grad(a);
                    for n in 0..out.n {
                        for c in 0..sa.c {
                            let src = &g[out.plane(n, c)..][..plane];
                            for (x, y) in ga[sa.plane(n, c)..][..plane].iter_mut().zip(src) {
                                *x += *y;
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.rg(b) {
                    let mut gb = self.take_or_alloc_grad(b);
                    for n in 0..out.n {
                        for c in 0..sb.c {
                            let src = &g[out.plane(n, sa.c + c)..][..plane];
                            for (x, y) in gb[sb.plane(n, c)..][..plane].iter_mut().zip(src) {
                                *x += *y;
                            }
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::SliceC { input, from } => {
                let (input, from) = (*input, *from);
                let s = self.shape(input);
                let out = self.nodes[i].shape;
                let plane = s.h * s.w;
                let mut gin = self.take_or_alloc_grad(input);
                for n in 0..out.n {
                    for c in 0..out.c {
                        let src = &g[out.plane(n, c)..][..plane];
                        for (x, y) in gin[s.plane(n, from + c)..][..plane].iter_mut().zip(src) {
                            *x += *y;
                        }
                    }
                }
                self.put_grad(input, gin);
            }
            Op::SliceN { input, index } => {
                let (input, index) = (*input, *index);
                let len = self.nodes[i].shape.numel();
                let mut gin = self.take_or_alloc_grad(input);
                for (x, y) in gin[index * len..][..len].iter_mut().zip(g) {
                    *x += *y;
                }
                self.put_grad(input, gin);
            }
            Op::Reduce {
                input,
                axis,
                kind,
                argmax,
            } => {
                let (input, axis, kind) = (*input, *axis, *kind);
                let argmax = argmax.clone();
                let s = self.shape(input);
                let plane = s.h * s.w;
                let mut gin = self.take_or_alloc_grad(input);
                match (axis, kind) {
                    (Axis::Channel, ReduceKind::Mean) => {
                        let inv = T::from_f64(1.0 / s.c as f64);
                        for n in 0..s.n {
                            let src = &g[n * plane..][..plane];
                            for c in 0..s.c {
                                for (x, y) in gin[s.plane(n, c)..][..plane].iter_mut().zip(src) {
                                    *x += *y * inv;
                                }
                            }
                        }
                    }
                    (Axis::Channel, ReduceKind::Max) => {
                        for n in 0..s.n {
                            for i2 in 0..plane {
                                let c = argmax[n * plane + i2] as usize;
                                gin[s.plane(n, c) + i2] += g[n * plane + i2];
                            }
                        }
                    }
                    (Axis::Spatial, ReduceKind::Mean) => {
                        let inv = T::from_f64(1.0 / plane as f64);
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let gv = g[n * s.c + c] * inv;
                                for x in gin[s.plane(n, c)..][..plane].iter_mut() {
                                    *x += gv;
                                }
                            }
                        }
                    }
                    (Axis::Spatial, ReduceKind::Max) => {
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let idx = argmax[n * s.c + c] as usize;
                                gin[s.plane(n, c) + idx] += g[n * s.c + c];
                            }
                        }
                    }
                }
                self.put_grad(input, gin);
            }
            Op::SumAll { input } => {
                let input = *input;
                let gv = g[0];
                let mut gin = self.take_or_alloc_grad(input);
                for x in gin.iter_mut() {
                    *x += gv;
                }
                self.put_grad(input, gin);
            }
        }
    }

    fn backprop_binary(&mut self, i: usize, kind: BinaryKind, a: TensorId, b: TensorId, g: &[T]) {
        if a == b {
            // Shared operand: both contributions go into one buffer.
            if !self.rg(a) {
                return;
            }
            let mut ga = self.take_or_alloc_grad(a);
            {
                let va = &self.nodes[a.0].value;
                for ((acc, gv), x) in ga.iter_mut().zip(g).zip(va) {
                    *acc += match kind {
                        BinaryKind::Add => *gv + *gv,
                        BinaryKind::Sub => T::ZERO,
                        BinaryKind::Mul => (*gv * *x) + (*gv * *x),
                        BinaryKind::Div => *gv / *x - *gv * *x / (*x * *x),
                    };
                }
            }
            self.put_grad(a, ga);
            return;
        }
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = self.nodes[i].shape;
        let [an, ac, ah, aw] = strides_for(sa, out);
        let [bn, bc, bh, bw] = strides_for(sb, out);
        let need_a = self.rg(a);
        let need_b = self.rg(b);
        let mut ga = if need_a {
            Some(self.take_or_alloc_grad(a))
        } else {
            None
        };
        let mut gb = if need_b {
            Some(self.take_or_alloc_grad(b))
        } else {
            None
        };
        {
            let va = &self.nodes[a.0].value;
            let vb = &self.nodes[b.0].value;
            let mut gi = 0usize;
            for n in 0..out.n {
                for c in 0..out.c {
                    for h in 0..out.h {
                        let ia0 = n * an + c * ac + h * ah;
                        let ib0 = n * bn + c * bc + h * bh;
                        for w in 0..out.w {
                            let gv = g[gi];
                            let ia = ia0 + w * aw;
                            let ib = ib0 + w * bw;
                            match kind {
                                BinaryKind::Add => {
                                    if let Some(ga) = ga.as_mut() {
                                        ga[ia] += gv;
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[ib] += gv;
                                    }
                                }
                                BinaryKind::Sub => {
                                    if let Some(ga) = ga.as_mut() {
                                        ga[ia] += gv;
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[ib] += -gv;
                                    }
                                }
                                BinaryKind::Mul => {
                                    if let Some(ga) = ga.as_mut() {
                                        ga[ia] += gv * vb[ib];
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[ib] += gv * va[ia];
                                    }
                                }
                                BinaryKind::Div => {
                                    if let Some(ga) = ga.as_mut() {
                                        ga[ia] += gv / vb[ib];
                                    }
                                    if let Some(gb) = gb.as_mut() {
                                        gb[ib] += -gv * va[ia] / (vb[ib] * vb[ib]);
                                    }
                                }
                            }
                            gi += 1;
                        }
                    }
                }
            }
        }
        if let Some(ga) = ga {
            self.put_grad(a, ga);
        }
        if let Some(gb) = gb {
            self.put_grad(b, gb);
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Output shape for the restricted broadcast: equal shapes, or one operand a
/// spatial map (C = 1) or channel vector (H = W = 1) of the other.
fn broadcast_out(a: Shape, b: Shape) -> Option<Shape> {
    if a == b {
        return Some(a);
    }
    let compat = |big: Shape, small: Shape| -> bool {
        if big.n != small.n {
            return false;
        }
        let spatial_map = small.c == 1 && small.h == big.h && small.w == big.w;
        let channel_vec = small.c == big.c && small.h == 1 && small.w == 1;
        spatial_map || channel_vec
    };
    if compat(a, b) {
        Some(a)
    } else if compat(b, a) {
        Some(b)
    } else {
        None
    }
}
