//! Reverse-mode automatic differentiation over a small static op set.
//!
//! A [`Graph`] is a topologically ordered list of nodes built through the
//! builder methods; leaves are inputs, parameters, or constants. [`forward`]
//! evaluates every node given leaf bindings and [`backward`] propagates the
//! gradient of the designated scalar loss node back to the leaves.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub enum Op {
    Input,
    Param,
    Const(Tensor),
    /// `[m, k] × [k, n]`.
    MatMul(NodeId, NodeId),
    /// Same-shape elementwise sum.
    Add(NodeId, NodeId),
    /// `x[n, c, ..] + b[c]`, broadcasting the bias along axis 1.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    /// NCHW input, OCKK weights, square kernel, zero padding.
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    /// 2×2 window, stride 2, floor on odd sizes.
    MaxPool2(NodeId),
    Flatten(NodeId),
    /// Mean over the batch of `-Σ_k t_k log softmax(z)_k`.
    SoftmaxXent { logits: NodeId, target: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2(..) => "maxpool2",
            Op::Flatten(..) => "flatten",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::MaxPool2(a) | Op::Flatten(a) => {
                vec![a]
            }
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::SoftmaxXent { logits, target } => vec![logits, target],
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param | Op::Const(_))
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Computation graph with a designated scalar loss node.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    loss: Option<NodeId>,
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    /// Leaf nodes that receive gradients: inputs and parameters.
    pub fn differentiable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input | Op::Param))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown node {}", id.0)))
    }

    fn positive(shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimensions must be positive: {shape:?}")));
        }
        Ok(())
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        Self::positive(shape)?;
        Ok(self.push(Op::Input, shape.to_vec()))
    }

    pub fn param(&mut self, shape: &[usize]) -> Result<NodeId> {
        Self::positive(shape)?;
        Ok(self.push(Op::Param, shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        Self::positive(value.shape())?;
        let shape = value.shape().to_vec();
        Ok(self.push(Op::Const(value), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} × {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?);
        if sa != sb {
            return Err(Error::Shape(format!("add {sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.check(x)?.to_vec(), self.check(b)?);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape(format!("add_bias {sx:?} + {sb:?}")));
        }
        Ok(self.push(Op::AddBias(x, b), sx))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?.to_vec(), self.check(b)?);
        if sa != sb {
            return Err(Error::Shape(format!("mul {sa:?} * {sb:?}")));
        }
        Ok(self.push(Op::Mul(a, b), sa))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        Ok(self.push(Op::Scale(a, factor), sa))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::Sum(a), vec![1]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        Ok(self.push(Op::Relu(a), sa))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.check(x)?.to_vec(), self.check(w)?.to_vec());
        if !(1..=2).contains(&stride) {
            return Err(Error::Shape(format!("conv2d stride {stride} not in 1..=2")));
        }
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::Shape(format!("conv2d x {sx:?} w {sw:?}")));
        }
        let k = sw[2];
        let (ho, wo) = match (conv_out(sx[2], k, stride, pad), conv_out(sx[3], k, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::Shape(format!("conv2d kernel {k} larger than input {sx:?}"))),
        };
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, vec![sx[0], sw[0], ho, wo]))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::Shape(format!("maxpool2 on {sx:?}")));
        }
        Ok(self.push(Op::MaxPool2(x), vec![sx[0], sx[1], sx[2] / 2, sx[3] / 2]))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.check(x)?.to_vec();
        let rest: usize = sx[1..].iter().product();
        Ok(self.push(Op::Flatten(x), vec![sx[0], rest.max(1)]))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.check(logits)?.to_vec(), self.check(target)?);
        if sl.len() != 2 || sl != st {
            return Err(Error::Shape(format!("softmax_xent logits {sl:?} target {st:?}")));
        }
        Ok(self.push(Op::SoftmaxXent { logits, target }, vec![1]))
    }

    /// Designates the scalar node that `backward` differentiates.
    pub fn set_loss(&mut self, id: NodeId) -> Result<()> {
        let s = self.check(id)?;
        if s.iter().product::<usize>() != 1 {
            return Err(Error::LossNotScalar(s.to_vec()));
        }
        self.loss = Some(id);
        Ok(())
    }
}

/// Node values produced by [`forward`].
#[derive(Debug, Clone)]
pub struct Values {
    values: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn loss(&self, graph: &Graph) -> Option<f64> {
        graph.loss.map(|id| self.values[id.0].item())
    }
}

/// Gradients of the loss with respect to leaves produced by [`backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub type Bindings = HashMap<NodeId, Tensor>;

/// Evaluates every node of `graph`, reading leaf values from `bindings`.
pub fn forward(graph: &Graph, bindings: &Bindings) -> Result<Values> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        let v = match &node.op {
            Op::Input | Op::Param => {
                let t = bindings.get(&NodeId(i)).ok_or(Error::UnboundLeaf(i))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "binding for node {i} has shape {:?}, expected {:?}",
                        t.shape(),
                        node.shape
                    )));
                }
                t.clone()
            }
            Op::Const(t) => t.clone(),
            op => eval(op, &node.shape, &values)?,
        };
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("node {i} ({})", node.op.name())));
        }
        values.push(v);
    }
    Ok(Values { values })
}

fn eval(op: &Op, shape: &[usize], values: &[Tensor]) -> Result<Tensor> {
    let v = |id: NodeId| &values[id.0];
    Ok(match *op {
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(Mat::new(a.data(), m, k), Mat::new(b.data(), k, n), 0.0, &mut out);
            Tensor::new(shape.to_vec(), out)?
        }
        Op::Add(a, b) => v(a).zip_map(v(b), |x, y| x + y)?,
        Op::Mul(a, b) => v(a).zip_map(v(b), |x, y| x * y)?,
        Op::AddBias(x, b) => {
            let (x, b) = (v(x), v(b));
            let c = x.shape()[1];
            let inner: usize = x.shape()[2..].iter().product();
            let mut out = x.clone();
            for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                let bias = b.data()[chunk_idx % c];
                for o in chunk {
                    *o += bias;
                }
            }
            out
        }
        Op::Scale(a, f) => v(a).map(|x| x * f),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Conv2d { x, w, stride, pad } => conv2d_forward(v(x), v(w), stride, pad, shape)?,
        Op::MaxPool2(x) => maxpool_forward(v(x), shape)?,
        Op::Flatten(x) => v(x).clone().reshape(shape)?,
        Op::SoftmaxXent { logits, target } => {
            let (z, t) = (v(logits), v(target));
            let (b, k) = (z.shape()[0], z.shape()[1]);
            let mut total = 0.0;
            for i in 0..b {
                let row = &z.data()[i * k..(i + 1) * k];
                let lse = log_sum_exp(row);
                let trow = &t.data()[i * k..(i + 1) * k];
                total -= row.iter().zip(trow).map(|(&zi, &ti)| ti * (zi - lse)).sum::<f64>();
            }
            Tensor::scalar(total / b as f64)
        }
        Op::Input | Op::Param | Op::Const(_) => unreachable!("leaves are bound, not evaluated"),
    })
}

/// Numerically stable `ln Σ exp(z)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of one row, computed with max subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize, out: &[usize]) -> Self {
        Self {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
            ho: out[2],
            wo: out[3],
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one example `[C, H, W]` into `[C·K·K, Ho·Wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n_cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih as usize >= self.h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw as usize >= self.w {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds columns back into `[C, H, W]`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n_cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.w {
                                dst[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize, out_shape: &[usize]) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad, out_shape);
    let (n, o) = (x.shape()[0], w.shape()[0]);
    let per_in = g.c * g.h * g.w;
    let per_out = o * g.cols();
    let mut out = vec![0.0; n * per_out];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for i in 0..n {
        g.im2col(&x.data()[i * per_in..(i + 1) * per_in], &mut cols);
        gemm(
            Mat::new(w.data(), o, g.rows()),
            Mat::new(&cols, g.rows(), g.cols()),
            0.0,
            &mut out[i * per_out..(i + 1) * per_out],
        );
    }
    Tensor::new(out_shape.to_vec(), out)
}

fn maxpool_forward(x: &Tensor, out_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let (r, s) = (2 * oh, 2 * ow);
                let m = xd[base + r * w + s]
                    .max(xd[base + r * w + s + 1])
                    .max(xd[base + (r + 1) * w + s])
                    .max(xd[base + (r + 1) * w + s + 1]);
                out.push(m);
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Gradients of the loss with respect to every input and parameter leaf.
pub fn backward(graph: &Graph, values: &Values) -> Result<Gradients> {
    let leaves = graph.differentiable_leaves();
    backward_wrt(graph, values, &leaves)
}

/// Gradients with respect to the listed leaves only; branches that cannot
/// reach any of them are skipped.
pub fn backward_wrt(graph: &Graph, values: &Values, wrt: &[NodeId]) -> Result<Gradients> {
    let loss = graph
        .loss
        .ok_or_else(|| Error::InvalidArgument("graph has no loss node".into()))?;
    let loss_shape = &graph.nodes[loss.0].shape;
    if loss_shape.iter().product::<usize>() != 1 {
        return Err(Error::LossNotScalar(loss_shape.clone()));
    }
    let n = graph.nodes.len();
    if values.values.len() != n {
        return Err(Error::InvalidArgument("values do not belong to this graph".into()));
    }

    // needs[i]: node i lies on a path from some requested leaf.
    let mut needs = vec![false; n];
    for id in wrt {
        if id.0 >= n || !graph.nodes[id.0].op.is_leaf() {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", id.0)));
        }
        needs[id.0] = true;
    }
    for i in 0..n {
        if !needs[i] {
            needs[i] = graph.nodes[i].op.inputs().iter().any(|j| needs[j.0]);
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[loss.0] = Some(Tensor::full(loss_shape, 1.0));

    for i in (0..n).rev() {
        let node = &graph.nodes[i];
        if node.op.is_leaf() || !needs[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let contributions = local_backward(&node.op, &node.shape, &g, &values.values, &needs)?;
        // Keep the upstream gradient if this node is itself requested.
        grads[i] = Some(g);
        for (id, contrib) in contributions {
            match &mut grads[id.0] {
                Some(acc) => acc.axpy(1.0, &contrib)?,
                slot @ None => *slot = Some(contrib),
            }
        }
    }

    let mut out: Vec<Option<Tensor>> = vec![None; n];
    for id in wrt {
        let g = grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&graph.nodes[id.0].shape));
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of node {}", id.0)));
        }
        out[id.0] = Some(g);
    }
    Ok(Gradients { grads: out })
}

fn local_backward(
    op: &Op,
    shape: &[usize],
    g: &Tensor,
    values: &[Tensor],
    needs: &[bool],
) -> Result<Vec<(NodeId, Tensor)>> {
    let v = |id: NodeId| &values[id.0];
    let want = |id: NodeId| needs[id.0];
    let mut out = Vec::with_capacity(2);
    match *op {
        Op::MatMul(a, b) => {
            let (av, bv) = (v(a), v(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if want(a) {
                let mut ga = vec![0.0; m * k];
                gemm(Mat::new(g.data(), m, n), Mat::new(bv.data(), k, n).t(), 0.0, &mut ga);
                out.push((a, Tensor::new(vec![m, k], ga)?));
            }
            if want(b) {
                let mut gb = vec![0.0; k * n];
                gemm(Mat::new(av.data(), m, k).t(), Mat::new(g.data(), m, n), 0.0, &mut gb);
                out.push((b, Tensor::new(vec![k, n], gb)?));
            }
        }
        Op::Add(a, b) => {
            if want(a) {
                out.push((a, g.clone()));
            }
            if want(b) {
                out.push((b, g.clone()));
            }
        }
        Op::AddBias(x, b) => {
            if want(x) {
                out.push((x, g.clone()));
            }
            if want(b) {
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut gb = vec![0.0; c];
                for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                    gb[chunk_idx % c] += chunk.iter().sum::<f64>();
                }
                out.push((b, Tensor::from_vec(gb)));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                out.push((a, g.zip_map(v(b), |gi, bi| gi * bi)?));
            }
            if want(b) {
                out.push((b, g.zip_map(v(a), |gi, ai| gi * ai)?));
            }
        }
        Op::Scale(a, f) => {
            if want(a) {
                out.push((a, g.map(|gi| gi * f)));
            }
        }
        Op::Sum(a) => {
            if want(a) {
                out.push((a, Tensor::full(v(a).shape(), g.item())));
            }
        }
        Op::Relu(a) => {
            if want(a) {
                out.push((a, g.zip_map(v(a), |gi, ai| if ai > 0.0 { gi } else { 0.0 })?));
            }
        }
        Op::Flatten(a) => {
            if want(a) {
                out.push((a, g.clone().reshape(v(a).shape())?));
            }
        }
        Op::MaxPool2(x) => {
            if want(x) {
                out.push((x, maxpool_backward(v(x), g)?));
            }
        }
        Op::Conv2d { x, w, stride, pad } => {
            let (xv, wv) = (v(x), v(w));
            let geom = ConvGeom::new(xv.shape(), wv.shape(), stride, pad, shape);
            let (n, o) = (xv.shape()[0], wv.shape()[0]);
            let per_in = geom.c * geom.h * geom.w;
            let per_out = o * geom.cols();
            let mut cols = vec![0.0; geom.rows() * geom.cols()];
            let mut gw = want(w).then(|| vec![0.0; wv.len()]);
            let mut gx = want(x).then(|| vec![0.0; xv.len()]);
            for i in 0..n {
                let gout = &g.data()[i * per_out..(i + 1) * per_out];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv.data()[i * per_in..(i + 1) * per_in], &mut cols);
                    gemm(
                        Mat::new(gout, o, geom.cols()),
                        Mat::new(&cols, geom.rows(), geom.cols()).t(),
                        1.0,
                        gw,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        Mat::new(wv.data(), o, geom.rows()).t(),
                        Mat::new(gout, o, geom.cols()),
                        0.0,
                        &mut cols,
                    );
                    geom.col2im(&cols, &mut gx[i * per_in..(i + 1) * per_in]);
                }
            }
            if let Some(gw) = gw {
                out.push((w, Tensor::new(wv.shape().to_vec(), gw)?));
            }
            if let Some(gx) = gx {
                out.push((x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
        }
        Op::SoftmaxXent { logits, target } => {
            let (z, t) = (v(logits), v(target));
            let (b, k) = (z.shape()[0], z.shape()[1]);
            let scale = g.item() / b as f64;
            let mut gz = want(logits).then(|| vec![0.0; b * k]);
            let mut gt = want(target).then(|| vec![0.0; b * k]);
            for i in 0..b {
                let row = &z.data()[i * k..(i + 1) * k];
                let trow = &t.data()[i * k..(i + 1) * k];
                if let Some(gz) = gz.as_mut() {
                    let p = softmax(row);
                    let tsum: f64 = trow.iter().sum();
                    for j in 0..k {
                        gz[i * k + j] = scale * (tsum * p[j] - trow[j]);
                    }
                }
                if let Some(gt) = gt.as_mut() {
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        gt[i * k + j] = -scale * (row[j] - lse);
                    }
                }
            }
            if let Some(gz) = gz {
                out.push((logits, Tensor::new(vec![b, k], gz)?));
            }
            if let Some(gt) = gt {
                out.push((target, Tensor::new(vec![b, k], gt)?));
            }
        }
        Op::Input | Op::Param | Op::Const(_) => {}
    }
    Ok(out)
}

fn maxpool_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; x.len()];
    let xd = x.data();
    let gd = g.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let (r, s) = (2 * oh, 2 * ow);
                let cands = [
                    base + r * w + s,
                    base + r * w + s + 1,
                    base + (r + 1) * w + s,
                    base + (r + 1) * w + s + 1,
                ];
                // first maximum in window order wins ties
                let mut best = cands[0];
                for &idx in &cands[1..] {
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                gx[best] += gd[plane * ho * wo + oh * wo + ow];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}

/// Compares analytic gradients against central differences with step `step`
/// on every coordinate of every input and parameter leaf. Returns the largest
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check(graph: &Graph, bindings: &Bindings, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let loss_id = graph
        .loss
        .ok_or_else(|| Error::InvalidArgument("graph has no loss node".into()))?;
    let values = forward(graph, bindings)?;
    let grads = backward(graph, &values)?;
    let mut worst: f64 = 0.0;
    let mut probe = bindings.clone();
    for leaf in graph.differentiable_leaves() {
        let analytic = grads.get(leaf).expect("leaf gradient").clone();
        for j in 0..analytic.len() {
            let orig = bindings[&leaf].data()[j];
            probe.get_mut(&leaf).expect("bound").data_mut()[j] = orig + step;
            let plus = forward(graph, &probe)?.get(loss_id).item();
            probe.get_mut(&leaf).expect("bound").data_mut()[j] = orig - step;
            let minus = forward(graph, &probe)?.get(loss_id).item();
            probe.get_mut(&leaf).expect("bound").data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: Vec<(NodeId, Tensor)>) -> Bindings {
        pairs.into_iter().collect()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input(&[1]).unwrap();
        let y = g.mul(x, x).unwrap();
        g.set_loss(y).unwrap();
        let b = bind(vec![(x, Tensor::scalar(3.0))]);
        let vals = forward(&g, &b).unwrap();
        assert_eq!(vals.get(y).item(), 9.0);
        let grads = backward(&g, &vals).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn zero_weights_give_uniform_cross_entropy() {
        let mut g = Graph::new();
        let x = g.input(&[1, 3]).unwrap();
        let w = g.param(&[3, 4]).unwrap();
        let t = g.input(&[1, 4]).unwrap();
        let z = g.matmul(x, w).unwrap();
        let l = g.softmax_xent(z, t).unwrap();
        g.set_loss(l).unwrap();
        let b = bind(vec![
            (x, Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap()),
            (w, Tensor::zeros(&[3, 4])),
            (t, Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap()),
        ]);
        let loss = forward(&g, &b).unwrap().get(l).item();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.input(&[2, 2]).unwrap();
        let i = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let y = g.matmul(a, i).unwrap();
        let s = g.sum(y).unwrap();
        g.set_loss(s).unwrap();
        let av = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let vals = forward(&g, &bind(vec![(a, av.clone())])).unwrap();
        assert_eq!(vals.get(y), &av);
    }

    #[test]
    fn softmax_xent_gradient_is_p_minus_onehot() {
        let mut g = Graph::new();
        let z = g.input(&[1, 3]).unwrap();
        let t = g.input(&[1, 3]).unwrap();
        let l = g.softmax_xent(z, t).unwrap();
        g.set_loss(l).unwrap();
        let zv = vec![0.2, -1.3, 0.7];
        let vals = forward(
            &g,
            &bind(vec![
                (z, Tensor::new(vec![1, 3], zv.clone()).unwrap()),
                (t, Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap()),
            ]),
        )
        .unwrap();
        let grads = backward_wrt(&g, &vals, &[z]).unwrap();
        let p = softmax(&zv);
        let expected = [p[0], p[1] - 1.0, p[2]];
        for (a, e) in grads.get(z).unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input(&[3]).unwrap();
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.set_loss(s).unwrap();
        let vals = forward(&g, &bind(vec![(x, Tensor::from_vec(vec![-1.0, 0.0, 2.0]))])).unwrap();
        let grads = backward(&g, &vals).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(&[2]).unwrap();
        assert!(matches!(g.set_loss(x), Err(Error::LossNotScalar(_))));
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = Graph::new();
        let x = g.input(&[2]).unwrap();
        let s = g.sum(x).unwrap();
        g.set_loss(s).unwrap();
        assert!(matches!(forward(&g, &Bindings::new()), Err(Error::UnboundLeaf(0))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.input(&[1]).unwrap();
        let y = g.scale(x, 1e308).unwrap();
        let z = g.scale(y, 10.0).unwrap();
        let s = g.sum(z).unwrap();
        g.set_loss(s).unwrap();
        let err = forward(&g, &bind(vec![(x, Tensor::scalar(10.0))])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn conv_shape_inference() {
        let mut g = Graph::new();
        let x = g.input(&[2, 3, 28, 28]).unwrap();
        let w = g.param(&[8, 3, 3, 3]).unwrap();
        let c = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8, 14, 14]);
        assert!(g.conv2d(x, w, 3, 0).is_err());
        let p = g.maxpool2(c).unwrap();
        assert_eq!(g.shape(p), &[2, 8, 7, 7]);
    }

    #[test]
    fn grad_check_is_zero_on_constant_function() {
        let mut g = Graph::new();
        let x = g.input(&[3]).unwrap();
        let z = g.scale(x, 0.0).unwrap();
        let s = g.sum(z).unwrap();
        g.set_loss(s).unwrap();
        let err = grad_check(&g, &bind(vec![(x, Tensor::from_vec(vec![1.0, 2.0, 3.0]))]), 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
