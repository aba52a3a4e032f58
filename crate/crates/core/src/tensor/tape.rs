//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations append nodes to the tape in execution order; every node only
//! references earlier nodes, so a single reverse sweep visits the graph in
//! reverse topological order exactly once. Leaves inserted with
//! [`Tape::param`] keep their gradient after [`Tape::backward`]; gradients of
//! interior nodes are dropped as soon as they have been propagated.

use super::{matmul_nn, matmul_nt, matmul_tn, numel_of, softmax_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    AddScalar(ValueId),
    MulScalar(ValueId, f64),
    AddBias {
        input: ValueId,
        bias: ValueId,
    },
    Matmul {
        a: ValueId,
        b: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: ValueId,
        b: ValueId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(ValueId),
    Log(ValueId),
    Abs(ValueId),
    Reshape(ValueId),
    Permute {
        input: ValueId,
        axes: Vec<usize>,
    },
    Concat {
        axis: usize,
        parts: Vec<ValueId>,
    },
    Slice {
        input: ValueId,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAxis {
        input: ValueId,
        axis: usize,
        scale: f64,
    },
    SumAll {
        input: ValueId,
        scale: f64,
    },
    SoftmaxLast(ValueId),
    LogSoftmaxLast(ValueId),
    Gather {
        input: ValueId,
        indices: Vec<usize>,
    },
    MaskedTemporalConv(Box<ConvCtx>),
}

struct ConvCtx {
    input: ValueId,
    weight: ValueId,
    stride: usize,
    kernel: usize,
    frame_valid: Vec<bool>,
    // (n, t, v, c_in, c_out, t_out)
    dims: (usize, usize, usize, usize, usize, usize),
    col: Tensor,
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Records forward operations and runs the reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant: no gradient is tracked through it.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a tracked parameter; its gradient survives `backward`.
    pub fn param(&mut self, value: Tensor) -> ValueId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a tracked leaf after `backward`. `None` when the node is
    /// untracked or unreached.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary_same_shape(&mut self, op_name: &str, a: ValueId, b: ValueId) -> Result<()> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::shape(op_name, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += x;
        }
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= x;
        }
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= x;
        }
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += c;
        }
        let rg = self.tracked(a);
        self.push(out, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let rg = self.tracked(a);
        self.push(out, rg, Op::MulScalar(a, c))
    }

    /// Add a vector over the trailing axis: `out[..., c] = input[..., c] + bias[c]`.
    pub fn add_bias(&mut self, input: ValueId, bias: ValueId) -> Result<ValueId> {
        let c = *self
            .value(input)
            .shape()
            .last()
            .ok_or_else(|| Error::shape("add_bias", "rank >= 1", "rank 0"))?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("[{c}]"),
                format!("{:?}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(input).clone();
        let bias_data = self.nodes[bias.0].value.data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(bias_data) {
                *o += bv;
            }
        }
        let rg = self.tracked(input) || self.tracked(bias);
        Ok(self.push(out, rg, Op::AddBias { input, bias }))
    }

    /// 2-D matrix product `(m x k) . (k x n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                "(m x k) . (k x n)".to_string(),
                format!("{sa:?} . {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            out.data_mut(),
        );
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Batched matrix product `(B x m x k) . (B x k x n)`.
    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(
                "bmm",
                "(B x m x k) . (B x k x n)".to_string(),
                format!("{sa:?} . {sb:?}"),
            ));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            matmul_nn(
                &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, rg, Op::Bmm { a, b, batch, m, k, n }))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.tracked(a);
        self.push(out, rg, Op::Relu(a))
    }

    /// Natural log; the caller guarantees strictly positive inputs.
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o <= 0.0 {
                return Err(Error::Numeric(format!("log of non-positive value {o}")));
            }
            *o = o.ln();
        }
        let rg = self.tracked(a);
        Ok(self.push(out, rg, Op::Log(a)))
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.abs();
        }
        let rg = self.tracked(a);
        self.push(out, rg, Op::Abs(a))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.tracked(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&mut self, a: ValueId, axes: &[usize]) -> Result<ValueId> {
        let shape = self.value(a).shape().to_vec();
        check_permutation(&shape, axes)?;
        let out = permute_tensor(&self.nodes[a.0].value, axes);
        let rg = self.tracked(a);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, axis: usize, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", ">= 1 part", "0 parts"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis < {}", first.len()),
                format!("axis {axis}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{first:?} up to axis {axis}"),
                    format!("{s:?}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let mut offset = 0;
        for &p in parts {
            let extent = self.value(p).shape()[axis];
            let src = self.nodes[p.0].value.data();
            let dst = out.data_mut();
            for o in 0..outer {
                let src_base = o * extent * inner;
                let dst_base = o * total * inner + offset * inner;
                dst[dst_base..dst_base + extent * inner]
                    .copy_from_slice(&src[src_base..src_base + extent * inner]);
            }
            offset += extent;
        }
        let rg = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous slice `[start, start + len)` along one axis.
    pub fn slice(&mut self, a: ValueId, axis: usize, start: usize, len: usize) -> Result<ValueId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis < {} and range within {:?}", shape.len(), shape),
                format!("axis {axis}, range {start}..{}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        let src = self.nodes[a.0].value.data();
        let dst = out.data_mut();
        for o in 0..outer {
            let src_base = (o * extent + start) * inner;
            let dst_base = o * len * inner;
            dst[dst_base..dst_base + len * inner].copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let rg = self.tracked(a);
        Ok(self.push(
            out,
            rg,
            Op::Slice {
                input: a,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn sum_axis(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: ValueId, axis: usize) -> Result<ValueId> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: ValueId, axis: usize, mean: bool) -> Result<ValueId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis < {}", shape.len()),
                format!("axis {axis}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let scale = if mean { 1.0 / extent as f64 } else { 1.0 };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = Tensor::zeros(&out_shape);
        let src = self.nodes[a.0].value.data();
        let dst = out.data_mut();
        for o in 0..outer {
            for e in 0..extent {
                let src_base = (o * extent + e) * inner;
                let dst_base = o * inner;
                for i in 0..inner {
                    dst[dst_base + i] += src[src_base + i];
                }
            }
        }
        if mean {
            for v in dst.iter_mut() {
                *v *= scale;
            }
        }
        let rg = self.tracked(a);
        Ok(self.push(out, rg, Op::SumAxis { input: a, axis, scale }))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.tracked(a);
        self.push(Tensor::scalar(total), rg, Op::SumAll { input: a, scale: 1.0 })
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).numel().max(1) as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.tracked(a);
        self.push(
            Tensor::scalar(total / n),
            rg,
            Op::SumAll {
                input: a,
                scale: 1.0 / n,
            },
        )
    }

    pub fn softmax_last(&mut self, a: ValueId) -> Result<ValueId> {
        let cols = *self
            .value(a)
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax_last", "rank >= 1", "rank 0"))?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_row(row);
        }
        let rg = self.tracked(a);
        Ok(self.push(out, rg, Op::SoftmaxLast(a)))
    }

    /// Log-softmax over the last axis via the log-sum-exp stabilization.
    pub fn log_softmax_last(&mut self, a: ValueId) -> Result<ValueId> {
        let cols = *self
            .value(a)
            .shape()
            .last()
            .ok_or_else(|| Error::shape("log_softmax_last", "rank >= 1", "rank 0"))?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.tracked(a);
        Ok(self.push(out, rg, Op::LogSoftmaxLast(a)))
    }

    /// Index-select from a 1-D tensor.
    pub fn gather(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("gather", "rank 1", format!("rank {}", shape.len())));
        }
        let len = shape[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::shape(
                "gather",
                format!("indices < {len}"),
                format!("index {bad}"),
            ));
        }
        let src = self.nodes[a.0].value.data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::from_vec(&[indices.len()], data)?;
        let rg = self.tracked(a);
        Ok(self.push(
            out,
            rg,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Per-slot 1-D convolution along the time axis with symmetric zero
    /// padding. `input` is `(N, T, V, C_in)`, `weight` is `(K*C_in, C_out)`,
    /// `frame_valid` flags real frames per `(n, t)`. Invalid input frames
    /// contribute zero, receive zero gradient, and output frames whose center
    /// is invalid are zeroed.
    pub fn masked_temporal_conv(
        &mut self,
        input: ValueId,
        weight: ValueId,
        stride: usize,
        frame_valid: &[bool],
    ) -> Result<ValueId> {
        if stride < 1 {
            return Err(Error::Config("temporal stride must be >= 1".into()));
        }
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(
                "masked_temporal_conv",
                "(N, T, V, C) input",
                format!("{shape:?}"),
            ));
        }
        let (n, t, v, c_in) = (shape[0], shape[1], shape[2], shape[3]);
        let w_shape = self.value(weight).shape().to_vec();
        if w_shape.len() != 2 || c_in == 0 || w_shape[0] % c_in != 0 {
            return Err(Error::shape(
                "masked_temporal_conv",
                format!("(K*{c_in} x C_out) weight"),
                format!("{w_shape:?}"),
            ));
        }
        let kernel = w_shape[0] / c_in;
        let c_out = w_shape[1];
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {kernel}")));
        }
        if frame_valid.len() != n * t {
            return Err(Error::shape(
                "masked_temporal_conv",
                format!("frame mask of {} entries", n * t),
                format!("{} entries", frame_valid.len()),
            ));
        }
        let pad = (kernel - 1) / 2;
        let t_out = (t + stride - 1) / stride;
        let rows = n * t_out * v;
        let mut col = Tensor::zeros(&[rows, kernel * c_in]);
        {
            let x = self.nodes[input.0].value.data();
            let col_data = col.data_mut();
            for ni in 0..n {
                for to in 0..t_out {
                    let center = to * stride;
                    if !frame_valid[ni * t + center] {
                        continue;
                    }
                    for k in 0..kernel {
                        let ti = center as isize + k as isize - pad as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        if !frame_valid[ni * t + ti] {
                            continue;
                        }
                        for vi in 0..v {
                            let row = (ni * t_out + to) * v + vi;
                            let src = ((ni * t + ti) * v + vi) * c_in;
                            let dst = row * kernel * c_in + k * c_in;
                            col_data[dst..dst + c_in].copy_from_slice(&x[src..src + c_in]);
                        }
                    }
                }
            }
        }
        let mut out = Tensor::zeros(&[n, t_out, v, c_out]);
        matmul_nn(
            col.data(),
            self.nodes[weight.0].value.data(),
            rows,
            kernel * c_in,
            c_out,
            out.data_mut(),
        );
        let rg = self.tracked(input) || self.tracked(weight);
        Ok(self.push(
            out,
            rg,
            Op::MaskedTemporalConv(Box::new(ConvCtx {
                input,
                weight,
                stride,
                kernel,
                frame_valid: frame_valid.to_vec(),
                dims: (n, t, v, c_in, c_out, t_out),
                col,
            })),
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of every tracked leaf
    /// reachable from `loss` are populated; intermediate gradients are
    /// released once propagated.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            propagate(node, &grad, head);
        }
        Ok(())
    }
}

fn accum(head: &mut [Node], id: ValueId, update: impl FnOnce(&mut Tensor)) {
    let node = &mut head[id.0];
    if !node.requires_grad {
        return;
    }
    let shape = node.value.shape().to_vec();
    let grad = node.grad.get_or_insert_with(|| Tensor::zeros(&shape));
    update(grad);
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(node: &Node, grad: &Tensor, head: &mut [Node]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(head, *a, |g| add_into(g, grad.data()));
            accum(head, *b, |g| add_into(g, grad.data()));
        }
        Op::Sub(a, b) => {
            accum(head, *a, |g| add_into(g, grad.data()));
            accum(head, *b, |g| {
                for (d, &s) in g.data_mut().iter_mut().zip(grad.data()) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            if head[a.0].requires_grad {
                let other: Vec<f64> = head[b.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| x * g)
                    .collect();
                accum(head, *a, |g| add_into(g, &other));
            }
            if head[b.0].requires_grad {
                let other: Vec<f64> = head[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| x * g)
                    .collect();
                accum(head, *b, |g| add_into(g, &other));
            }
        }
        Op::AddScalar(a) => accum(head, *a, |g| add_into(g, grad.data())),
        Op::MulScalar(a, c) => {
            let c = *c;
            accum(head, *a, |g| {
                for (d, &s) in g.data_mut().iter_mut().zip(grad.data()) {
                    *d += c * s;
                }
            });
        }
        Op::AddBias { input, bias } => {
            accum(head, *input, |g| add_into(g, grad.data()));
            if head[bias.0].requires_grad {
                let c = head[bias.0].value.numel();
                let mut sums = vec![0.0; c];
                for row in grad.data().chunks(c) {
                    for (s, &v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accum(head, *bias, |g| add_into(g, &sums));
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if head[a.0].requires_grad {
                let mut da = vec![0.0; m * k];
                matmul_nt(grad.data(), head[b.0].value.data(), m, n, k, &mut da);
                accum(head, *a, |g| add_into(g, &da));
            }
            if head[b.0].requires_grad {
                let mut db = vec![0.0; k * n];
                matmul_tn(head[a.0].value.data(), grad.data(), k, m, n, &mut db);
                accum(head, *b, |g| add_into(g, &db));
            }
        }
        Op::Bmm { a, b, batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            if head[a.0].requires_grad {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    matmul_nt(
                        &grad.data()[i * m * n..(i + 1) * m * n],
                        &head[b.0].value.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                accum(head, *a, |g| add_into(g, &da));
            }
            if head[b.0].requires_grad {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    matmul_tn(
                        &head[a.0].value.data()[i * m * k..(i + 1) * m * k],
                        &grad.data()[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                accum(head, *b, |g| add_into(g, &db));
            }
        }
        Op::Relu(a) => {
            if head[a.0].requires_grad {
                let masked: Vec<f64> = head[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accum(head, *a, |g| add_into(g, &masked));
            }
        }
        Op::Log(a) => {
            if head[a.0].requires_grad {
                let scaled: Vec<f64> = head[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g / x)
                    .collect();
                accum(head, *a, |g| add_into(g, &scaled));
            }
        }
        Op::Abs(a) => {
            if head[a.0].requires_grad {
                let signed: Vec<f64> = head[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accum(head, *a, |g| add_into(g, &signed));
            }
        }
        Op::Reshape(a) => accum(head, *a, |g| add_into(g, grad.data())),
        Op::Permute { input, axes } => {
            if head[input.0].requires_grad {
                let mut inverse = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inverse[from] = to;
                }
                let back = permute_tensor(grad, &inverse);
                accum(head, *input, |g| add_into(g, back.data()));
            }
        }
        Op::Concat { axis, parts } => {
            let axis = *axis;
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[axis];
            let mut offset = 0;
            for &p in parts {
                let extent = head[p.0].value.shape()[axis];
                if head[p.0].requires_grad {
                    let mut part_grad = vec![0.0; outer * extent * inner];
                    for o in 0..outer {
                        let src_base = o * total * inner + offset * inner;
                        let dst_base = o * extent * inner;
                        part_grad[dst_base..dst_base + extent * inner]
                            .copy_from_slice(&grad.data()[src_base..src_base + extent * inner]);
                    }
                    accum(head, p, |g| add_into(g, &part_grad));
                }
                offset += extent;
            }
        }
        Op::Slice {
            input,
            axis,
            start,
            len,
        } => {
            if head[input.0].requires_grad {
                let in_shape = head[input.0].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let extent = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut full = vec![0.0; numel_of(&in_shape)];
                for o in 0..outer {
                    let dst_base = (o * extent + start) * inner;
                    let src_base = o * len * inner;
                    full[dst_base..dst_base + len * inner]
                        .copy_from_slice(&grad.data()[src_base..src_base + len * inner]);
                }
                accum(head, *input, |g| add_into(g, &full));
            }
        }
        Op::SumAxis { input, axis, scale } => {
            if head[input.0].requires_grad {
                let in_shape = head[input.0].value.shape().to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let extent = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut full = vec![0.0; numel_of(&in_shape)];
                for o in 0..outer {
                    for e in 0..extent {
                        let dst_base = (o * extent + e) * inner;
                        let src_base = o * inner;
                        for i in 0..inner {
                            full[dst_base + i] = grad.data()[src_base + i] * scale;
                        }
                    }
                }
                accum(head, *input, |g| add_into(g, &full));
            }
        }
        Op::SumAll { input, scale } => {
            let g0 = grad.data()[0] * scale;
            accum(head, *input, |g| {
                for d in g.data_mut() {
                    *d += g0;
                }
            });
        }
        Op::SoftmaxLast(a) => {
            if head[a.0].requires_grad {
                let cols = *node.value.shape().last().unwrap();
                let mut gin = vec![0.0; grad.data().len()];
                for (r, (y_row, g_row)) in node
                    .value
                    .data()
                    .chunks(cols)
                    .zip(grad.data().chunks(cols))
                    .enumerate()
                {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(&y, &g)| y * g).sum();
                    for j in 0..cols {
                        gin[r * cols + j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                accum(head, *a, |g| add_into(g, &gin));
            }
        }
        Op::LogSoftmaxLast(a) => {
            if head[a.0].requires_grad {
                let cols = *node.value.shape().last().unwrap();
                let mut gin = vec![0.0; grad.data().len()];
                for (r, (y_row, g_row)) in node
                    .value
                    .data()
                    .chunks(cols)
                    .zip(grad.data().chunks(cols))
                    .enumerate()
                {
                    let gsum: f64 = g_row.iter().sum();
                    for j in 0..cols {
                        gin[r * cols + j] = g_row[j] - y_row[j].exp() * gsum;
                    }
                }
                accum(head, *a, |g| add_into(g, &gin));
            }
        }
        Op::Gather { input, indices } => {
            if head[input.0].requires_grad {
                let len = head[input.0].value.numel();
                let mut full = vec![0.0; len];
                for (pos, &idx) in indices.iter().enumerate() {
                    full[idx] += grad.data()[pos];
                }
                accum(head, *input, |g| add_into(g, &full));
            }
        }
        Op::MaskedTemporalConv(ctx) => {
            let (n, t, v, c_in, c_out, t_out) = ctx.dims;
            let rows = n * t_out * v;
            let kc = ctx.kernel * c_in;
            if head[ctx.weight.0].requires_grad {
                let mut dw = vec![0.0; kc * c_out];
                matmul_tn(ctx.col.data(), grad.data(), kc, rows, c_out, &mut dw);
                accum(head, ctx.weight, |g| add_into(g, &dw));
            }
            if head[ctx.input.0].requires_grad {
                let mut dcol = vec![0.0; rows * kc];
                matmul_nt(
                    grad.data(),
                    head[ctx.weight.0].value.data(),
                    rows,
                    c_out,
                    kc,
                    &mut dcol,
                );
                let pad = (ctx.kernel - 1) / 2;
                let mut dx = vec![0.0; n * t * v * c_in];
                for ni in 0..n {
                    for to in 0..t_out {
                        let center = to * ctx.stride;
                        if !ctx.frame_valid[ni * t + center] {
                            continue;
                        }
                        for k in 0..ctx.kernel {
                            let ti = center as isize + k as isize - pad as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let ti = ti as usize;
                            if !ctx.frame_valid[ni * t + ti] {
                                continue;
                            }
                            for vi in 0..v {
                                let row = (ni * t_out + to) * v + vi;
                                let src = row * kc + k * c_in;
                                let dst = ((ni * t + ti) * v + vi) * c_in;
                                for c in 0..c_in {
                                    dx[dst + c] += dcol[src + c];
                                }
                            }
                        }
                    }
                }
                accum(head, ctx.input, |g| add_into(g, &dx));
            }
        }
    }
}

fn check_permutation(shape: &[usize], axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(
            "permute",
            format!("permutation of 0..{}", shape.len()),
            format!("{axes:?}"),
        ));
    }
    Ok(())
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    if rank <= 1 {
        return Tensor::from_vec(&out_shape, t.data().to_vec()).expect("same element count");
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // stride of output axis d in the input layout
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let out_data = out.data_mut();
    let src = t.data();
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for slot in out_data.iter_mut() {
        *slot = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src_off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src_off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> ValueId {
        tape.param(Tensor::from_vec(shape, data).unwrap())
    }

    #[test]
    fn relu_forward_matches_expected() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[1, 2], vec![0.0, 0.0]);
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = param(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = param(&mut tape, &[2, 1], vec![1.0, 1.0]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_of_linear_form_is_the_fixed_factor() {
        // loss = sum(w * x) with fixed x => grad(w) = x
        let mut tape = Tape::new();
        let w = param(&mut tape, &[3], vec![0.5, -1.0, 2.0]);
        let x = tape.leaf(Tensor::from_vec(&[3], vec![3.0, 4.0, 5.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        let mut tape = Tape::new();
        let w = param(&mut tape, &[2], vec![-1.0, 2.0]);
        let r = tape.relu(w);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = param(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(crate::error::Error::Shape { .. })));
    }

    #[test]
    fn shape_mismatch_reports_expected_and_actual() {
        let mut tape = Tape::new();
        let a = param(&mut tape, &[2], vec![1.0, 2.0]);
        let b = param(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        match tape.add(a, b) {
            Err(crate::error::Error::Shape { expected, actual, .. }) => {
                assert!(expected.contains('2'));
                assert!(actual.contains('3'));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn permute_roundtrip_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = param(&mut tape, &[2, 3, 4], data.clone());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), data.as_slice());
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::new();
        let a = param(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = param(&mut tape, &[2, 1], vec![5.0, 6.0]);
        let cat = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(cat, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
    }

    #[test]
    fn masked_conv_kernel_one_is_identity_on_valid_frames() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[1, 3, 1, 1], vec![1.0, 2.0, 3.0]);
        let w = tape.leaf(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
        let y = tape.masked_temporal_conv(x, w, 1, &[true, true, true]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn masked_conv_gives_invalid_frames_zero_gradient() {
        let mut tape = Tape::new();
        let x = param(&mut tape, &[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let w = param(&mut tape, &[3, 1], vec![1.0, 1.0, 1.0]);
        let valid = [true, true, true, false];
        let y = tape.masked_temporal_conv(x, w, 1, &valid).unwrap();
        // last output frame has an invalid center: all zero
        assert_eq!(&tape.value(y).data()[3..], &[0.0]);
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        assert_eq!(gx.data()[3], 0.0, "invalid frame must get zero gradient");
        assert!(gx.data()[..3].iter().all(|&g| g > 0.0));
    }

    #[test]
    fn gather_scatter_adds_duplicate_indices() {
        let mut tape = Tape::new();
        let w = param(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let g = tape.gather(w, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 1.0, 3.0]);
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    /// Central finite differences on a small composite touching most ops.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let build = |vals: &[f64]| -> (Tape, ValueId, ValueId) {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::from_vec(&[2, 3], vals.to_vec()).unwrap());
            let x = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.5, 0.9]).unwrap());
            let h = tape.matmul(w, x).unwrap();
            let r = tape.relu(h);
            let s = tape.softmax_last(r).unwrap();
            let t = tape.mul_scalar(s, 2.0);
            let loss = tape.mean_all(t);
            (tape, w, loss)
        };
        let base = [0.4, -0.2, 0.8, 1.3, -0.9, 0.1];
        let (mut tape, w, loss) = build(&base);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w).unwrap().data().to_vec();
        let eps = 1e-5;
        for i in 0..base.len() {
            let mut plus = base;
            plus[i] += eps;
            let mut minus = base;
            minus[i] -= eps;
            let (tp, _, lp) = build(&plus);
            let (tm, _, lm) = build(&minus);
            let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "grad[{i}]: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }
}
