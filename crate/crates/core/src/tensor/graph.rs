use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError, TensorResult};

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2dParams {
    /// Stride 1 with "same" padding for an odd square kernel of size `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride: 1,
            pad: dilation * (k - 1) / 2,
            dilation,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }
}

/// Every operation the graph can record.
///
/// Binary elementwise kinds accept two same-shape operands or one operand with a
/// single element, which is broadcast.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift(f64),
    MatMul,
    /// Inputs: `x [Cin,H,W]`, `w [Cout,Cin,kh,kw]`, optional `b [Cout]`.
    Conv2d(Conv2dParams),
    Relu,
    Sigmoid,
    MaxPool2x2,
    AvgPool2x2,
    Upsample2x,
    /// Concatenation along axis 0.
    Concat,
    Sum,
    Mean,
    /// Sum over one axis, keeping it with extent 1.
    SumAxis(usize),
    Abs,
    Square,
    Sqrt,
    Log,
    Exp,
    Power(f64),
    /// Half-open `(start, end)` per axis.
    Slice(Vec<(usize, usize)>),
    /// Edge replication on the last two axes.
    PadReplicate {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    Reshape(Vec<usize>),
    Clamp {
        min: f64,
        max: f64,
    },
    /// Flat-index gather producing a rank-1 tensor.
    Gather(Arc<[usize]>),
    /// Bilinear backward warp of a `[C,H,W]` frame: `out(i) = x(i + (u,v)(i))`, zero outside.
    Warp {
        u: Arc<[f64]>,
        v: Arc<[f64]>,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale(_) => "scalar-mul",
            Primitive::Shift(_) => "scalar-add",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d(_) => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::MaxPool2x2 => "maxpool2x2",
            Primitive::AvgPool2x2 => "avgpool2x2",
            Primitive::Upsample2x => "nearest-upsample2x",
            Primitive::Concat => "channel-concat",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum-axis",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Power(_) => "power",
            Primitive::Slice(_) => "slice",
            Primitive::PadReplicate { .. } => "pad-replicate",
            Primitive::Reshape(_) => "reshape",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Gather(_) => "gather",
            Primitive::Warp { .. } => "warp",
        }
    }
}

enum Saved {
    Nothing,
    Argmax(Vec<usize>),
}

struct Node {
    value: Tensor,
    prim: Option<Primitive>,
    inputs: Vec<usize>,
    saved: Saved,
    requires_grad: bool,
}

/// Append-only record of primitive applications. Confined to one thread.
pub struct Graph {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor; it participates in differentiation iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let mut tensor = tensor;
        tensor.clear_grad();
        let requires_grad = tensor.requires_grad();
        self.push(Node {
            value: tensor,
            prim: None,
            inputs: Vec::new(),
            saved: Saved::Nothing,
            requires_grad,
        })
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> TensorResult<Var<'g>> {
        self.apply(Primitive::Concat, parts)
    }

    /// Applies `prim` to `inputs`, recording it for differentiation.
    pub fn apply<'g>(&'g self, prim: Primitive, inputs: &[Var<'g>]) -> TensorResult<Var<'g>> {
        if inputs.iter().any(|v| v.graph.id != self.id) {
            return Err(TensorError::ForeignVar);
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            let (value, saved) = forward(&prim, &vals)?;
            let rg = ids.iter().any(|&i| nodes[i].requires_grad);
            (value, saved, rg)
        };
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: prim.name(),
                index,
            });
        }
        Ok(self.push(Node {
            value,
            prim: Some(prim),
            inputs: ids,
            saved,
            requires_grad,
        }))
    }

    /// Reverse pass from a scalar `root`. Every leaf that requires a gradient gets one;
    /// leaves the root does not depend on get zeros.
    pub fn backward(&self, root: Var<'_>) -> TensorResult<()> {
        if root.graph.id != self.id {
            return Err(TensorError::ForeignVar);
        }
        let mut nodes = self.nodes.borrow_mut();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.prim.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = backward_rule(node, &g, &nodes);
            for (k, gi) in input_grads.into_iter().enumerate() {
                let Some(gi) = gi else { continue };
                let src = node.inputs[k];
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (id, node) in nodes.iter_mut().enumerate() {
            if node.prim.is_none() && node.requires_grad {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn node(&self) -> Ref<'g, Node> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.node().value.numel()
    }

    pub fn value(&self) -> Tensor {
        let mut t = self.node().value.clone();
        t.clear_grad();
        t
    }

    pub fn data(&self) -> Vec<f64> {
        self.node().value.data().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.node().value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    /// Gradient populated by [`Graph::backward`] (leaves only).
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node().value.grad().map(<[f64]>::to_vec)
    }

    fn unary(&self, prim: Primitive) -> TensorResult<Var<'g>> {
        self.graph.apply(prim, &[*self])
    }

    pub fn add(&self, other: Var<'g>) -> TensorResult<Var<'g>> {
        self.graph.apply(Primitive::Add, &[*self, other])
    }
    pub fn sub(&self, other: Var<'g>) -> TensorResult<Var<'g>> {
        self.graph.apply(Primitive::Sub, &[*self, other])
    }
    pub fn mul(&self, other: Var<'g>) -> TensorResult<Var<'g>> {
        self.graph.apply(Primitive::Mul, &[*self, other])
    }
    pub fn div(&self, other: Var<'g>) -> TensorResult<Var<'g>> {
        self.graph.apply(Primitive::Div, &[*self, other])
    }
    pub fn scale(&self, c: f64) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Scale(c))
    }
    pub fn shift(&self, c: f64) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Shift(c))
    }
    /// `c - self`
    pub fn rsub(&self, c: f64) -> TensorResult<Var<'g>> {
        self.scale(-1.0)?.shift(c)
    }
    pub fn matmul(&self, other: Var<'g>) -> TensorResult<Var<'g>> {
        self.graph.apply(Primitive::MatMul, &[*self, other])
    }
    pub fn conv2d(&self, weight: Var<'g>, bias: Option<Var<'g>>, params: Conv2dParams) -> TensorResult<Var<'g>> {
        match bias {
            Some(b) => self.graph.apply(Primitive::Conv2d(params), &[*self, weight, b]),
            None => self.graph.apply(Primitive::Conv2d(params), &[*self, weight]),
        }
    }
    pub fn relu(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Relu)
    }
    pub fn sigmoid(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Sigmoid)
    }
    pub fn maxpool2x2(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::MaxPool2x2)
    }
    pub fn avgpool2x2(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::AvgPool2x2)
    }
    pub fn upsample2x(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Upsample2x)
    }
    pub fn sum(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Sum)
    }
    pub fn mean(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Mean)
    }
    pub fn sum_axis(&self, axis: usize) -> TensorResult<Var<'g>> {
        self.unary(Primitive::SumAxis(axis))
    }
    pub fn abs(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Abs)
    }
    pub fn square(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Square)
    }
    pub fn sqrt(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Sqrt)
    }
    pub fn log(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Log)
    }
    pub fn exp(&self) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Exp)
    }
    pub fn powf(&self, p: f64) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Power(p))
    }
    pub fn slice(&self, ranges: Vec<(usize, usize)>) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Slice(ranges))
    }
    pub fn pad_replicate(&self, top: usize, bottom: usize, left: usize, right: usize) -> TensorResult<Var<'g>> {
        self.unary(Primitive::PadReplicate {
            top,
            bottom,
            left,
            right,
        })
    }
    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Reshape(shape))
    }
    pub fn clamp(&self, min: f64, max: f64) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Clamp { min, max })
    }
    pub fn clamp_min(&self, min: f64) -> TensorResult<Var<'g>> {
        self.clamp(min, f64::INFINITY)
    }
    pub fn gather(&self, indices: Arc<[usize]>) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Gather(indices))
    }
    pub fn warp(&self, u: Arc<[f64]>, v: Arc<[f64]>) -> TensorResult<Var<'g>> {
        self.unary(Primitive::Warp { u, v })
    }
}

fn arity(prim: &Primitive, inputs: &[&Tensor], expected: usize) -> TensorResult<()> {
    if inputs.len() != expected {
        return Err(TensorError::Arity {
            op: prim.name(),
            expected,
            got: inputs.len(),
        });
    }
    Ok(())
}

fn rank3(op: &'static str, t: &Tensor) -> TensorResult<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::BadShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 3 [C,H,W]".into(),
        }),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_flat, in_flat)` for every element of a slice.
fn for_each_slice_index(shape: &[usize], ranges: &[(usize, usize)], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = ranges.iter().map(|r| r.1 - r.0).collect();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for out_flat in 0..total {
        let in_flat: usize = (0..rank).map(|d| (idx[d] + ranges[d].0) * in_strides[d]).sum();
        f(out_flat, in_flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn binary_shape(prim: &Primitive, a: &Tensor, b: &Tensor) -> TensorResult<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op: prim.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn binary_map(a: &Tensor, b: &Tensor, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    let ai = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
    let bi = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
    (0..n).map(|i| f(ai(i), bi(i))).collect()
}

fn forward(prim: &Primitive, inputs: &[&Tensor]) -> TensorResult<(Tensor, Saved)> {
    let op = prim.name();
    let unary_map = |f: &dyn Fn(f64) -> f64| -> TensorResult<(Tensor, Saved)> {
        arity(prim, inputs, 1)?;
        let x = inputs[0];
        Ok((Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?, Saved::Nothing))
    };
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let shape = binary_shape(prim, a, b)?;
            let n = shape.iter().product();
            let data = match prim {
                Primitive::Add => binary_map(a, b, n, |x, y| x + y),
                Primitive::Sub => binary_map(a, b, n, |x, y| x - y),
                Primitive::Mul => binary_map(a, b, n, |x, y| x * y),
                _ => binary_map(a, b, n, |x, y| x / y),
            };
            Ok((Tensor::new(shape, data)?, Saved::Nothing))
        }
        Primitive::Scale(c) => unary_map(&|v| v * c),
        Primitive::Shift(c) => unary_map(&|v| v + c),
        Primitive::MatMul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => {
                    Ok((Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?, Saved::Nothing))
                }
                _ => Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                }),
            }
        }
        Primitive::Conv2d(p) => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(TensorError::Arity {
                    op,
                    expected: 3,
                    got: inputs.len(),
                });
            }
            let g = conv_geom(p, inputs[0], inputs[1], inputs.get(2).copied())?;
            let out = kernels::conv2d_forward(&g, inputs[0].data(), inputs[1].data(), inputs.get(2).map(|b| b.data()));
            Ok((Tensor::new(vec![g.cout, g.ho, g.wo], out)?, Saved::Nothing))
        }
        Primitive::Relu => unary_map(&|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Sigmoid => unary_map(&sigmoid),
        Primitive::MaxPool2x2 | Primitive::AvgPool2x2 => {
            arity(prim, inputs, 1)?;
            let (c, h, w) = rank3(op, inputs[0])?;
            if h < 2 || w < 2 {
                return Err(TensorError::BadShape {
                    op,
                    shape: inputs[0].shape().to_vec(),
                    reason: "spatial extent below 2".into(),
                });
            }
            if matches!(prim, Primitive::MaxPool2x2) {
                let (v, arg) = kernels::maxpool2(inputs[0].data(), c, h, w);
                Ok((Tensor::new(vec![c, h / 2, w / 2], v)?, Saved::Argmax(arg)))
            } else {
                let v = kernels::avgpool2(inputs[0].data(), c, h, w);
                Ok((Tensor::new(vec![c, h / 2, w / 2], v)?, Saved::Nothing))
            }
        }
        Primitive::Upsample2x => {
            arity(prim, inputs, 1)?;
            let (c, h, w) = rank3(op, inputs[0])?;
            Ok((Tensor::new(vec![c, 2 * h, 2 * w], kernels::upsample2(inputs[0].data(), c, h, w))?, Saved::Nothing))
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::Arity { op, expected: 1, got: 0 });
            }
            let first = inputs[0].shape();
            if first.is_empty() {
                return Err(TensorError::BadShape {
                    op,
                    shape: first.to_vec(),
                    reason: "cannot concatenate rank-0 tensors".into(),
                });
            }
            let mut lead = 0;
            let mut data = Vec::new();
            for t in inputs {
                if t.shape().len() != first.len() || t.shape()[1..] != first[1..] {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: first.to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = first.to_vec();
            shape[0] = lead;
            Ok((Tensor::new(shape, data)?, Saved::Nothing))
        }
        Primitive::Sum | Primitive::Mean => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(TensorError::BadShape {
                    op,
                    shape: x.shape().to_vec(),
                    reason: "empty tensor".into(),
                });
            }
            let s: f64 = x.data().iter().sum();
            let v = if matches!(prim, Primitive::Mean) { s / x.numel() as f64 } else { s };
            Ok((Tensor::scalar(v), Saved::Nothing))
        }
        Primitive::SumAxis(axis) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let shape = x.shape();
            if *axis >= shape.len() {
                return Err(TensorError::BadShape {
                    op,
                    shape: shape.to_vec(),
                    reason: format!("axis {axis} out of range"),
                });
            }
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut oshape = shape.to_vec();
            oshape[*axis] = 1;
            Ok((Tensor::new(oshape, out)?, Saved::Nothing))
        }
        Primitive::Abs => unary_map(&f64::abs),
        Primitive::Square => unary_map(&|v| v * v),
        Primitive::Exp => unary_map(&f64::exp),
        Primitive::Sqrt | Primitive::Log => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let is_log = matches!(prim, Primitive::Log);
            if let Some(index) = x.data().iter().position(|&v| if is_log { !(v > 0.0) } else { !(v >= 0.0) }) {
                return Err(TensorError::Domain {
                    op,
                    index,
                    value: x.data()[index],
                });
            }
            unary_map(if is_log { &f64::ln } else { &f64::sqrt })
        }
        Primitive::Power(p) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if p.fract() != 0.0 {
                if let Some(index) = x.data().iter().position(|&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op,
                        index,
                        value: x.data()[index],
                    });
                }
            }
            unary_map(&|v| v.powf(*p))
        }
        Primitive::Slice(ranges) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let shape = x.shape();
            if ranges.len() != shape.len() || ranges.iter().zip(shape).any(|(r, &n)| r.0 > r.1 || r.1 > n) {
                return Err(TensorError::BadShape {
                    op,
                    shape: shape.to_vec(),
                    reason: format!("slice ranges {ranges:?} out of bounds"),
                });
            }
            let out_shape: Vec<usize> = ranges.iter().map(|r| r.1 - r.0).collect();
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_slice_index(shape, ranges, |o, i| out[o] = x.data()[i]);
            Ok((Tensor::new(out_shape, out)?, Saved::Nothing))
        }
        Primitive::PadReplicate {
            top,
            bottom,
            left,
            right,
        } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let shape = x.shape();
            if shape.len() < 2 || shape[shape.len() - 1] == 0 || shape[shape.len() - 2] == 0 {
                return Err(TensorError::BadShape {
                    op,
                    shape: shape.to_vec(),
                    reason: "needs two non-empty trailing axes".into(),
                });
            }
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let lead: usize = shape[..shape.len() - 2].iter().product();
            let (ho, wo) = (h + top + bottom, w + left + right);
            let mut out = Vec::with_capacity(lead * ho * wo);
            for l in 0..lead {
                for oy in 0..ho {
                    let iy = oy.saturating_sub(*top).min(h - 1);
                    for ox in 0..wo {
                        let ix = ox.saturating_sub(*left).min(w - 1);
                        out.push(x.data()[(l * h + iy) * w + ix]);
                    }
                }
            }
            let mut oshape = shape.to_vec();
            let r = oshape.len();
            oshape[r - 2] = ho;
            oshape[r - 1] = wo;
            Ok((Tensor::new(oshape, out)?, Saved::Nothing))
        }
        Primitive::Reshape(shape) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok((Tensor::new(shape.clone(), x.data().to_vec())?, Saved::Nothing))
        }
        Primitive::Clamp { min, max } => unary_map(&|v| v.max(*min).min(*max)),
        Primitive::Gather(idx) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel()) {
                return Err(TensorError::BadShape {
                    op,
                    shape: x.shape().to_vec(),
                    reason: format!("index {bad} out of bounds"),
                });
            }
            Ok((Tensor::from_vec(idx.iter().map(|&i| x.data()[i]).collect()), Saved::Nothing))
        }
        Primitive::Warp { u, v } => {
            arity(prim, inputs, 1)?;
            let (c, h, w) = rank3(op, inputs[0])?;
            if u.len() != h * w || v.len() != h * w {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: inputs[0].shape().to_vec(),
                    rhs: vec![u.len()],
                });
            }
            let out = kernels::warp_forward(inputs[0].data(), c, h, w, u, v);
            Ok((Tensor::new(vec![c, h, w], out)?, Saved::Nothing))
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_geom(p: &Conv2dParams, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> TensorResult<ConvGeom> {
    let op = "conv2d";
    let (cin, h, wd) = rank3(op, x)?;
    let (cout, cin_w, kh, kw) = match *w.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(TensorError::BadShape {
                op,
                shape: w.shape().to_vec(),
                reason: "kernel must be [Cout,Cin,kh,kw]".into(),
            })
        }
    };
    if cin != cin_w {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    if p.stride == 0 || p.dilation == 0 {
        return Err(TensorError::BadShape {
            op,
            shape: w.shape().to_vec(),
            reason: "stride and dilation must be positive".into(),
        });
    }
    let span_h = p.dilation * (kh - 1) + 1;
    let span_w = p.dilation * (kw - 1) + 1;
    if h + 2 * p.pad < span_h || wd + 2 * p.pad < span_w {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    Ok(ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride: p.stride,
        pad: p.pad,
        dilation: p.dilation,
        ho: (h + 2 * p.pad - span_h) / p.stride + 1,
        wo: (wd + 2 * p.pad - span_w) / p.stride + 1,
    })
}

/// Reduces a broadcast gradient back to the operand's shape.
fn unbroadcast(g: Vec<f64>, operand: &Tensor) -> Vec<f64> {
    if operand.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn backward_rule(node: &Node, g: &[f64], nodes: &[Node]) -> Vec<Option<Vec<f64>>> {
    let prim = node.prim.as_ref().expect("backward on leaf");
    let inp = |k: usize| &nodes[node.inputs[k]].value;
    let needs = |k: usize| nodes[node.inputs[k]].requires_grad;
    let y = node.value.data();
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        if !needs(0) {
            return vec![None];
        }
        vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
    };
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (a, b) = (inp(0), inp(1));
            let at = |i: usize| if a.numel() == 1 { a.data()[0] } else { a.data()[i] };
            let bt = |i: usize| if b.numel() == 1 { b.data()[0] } else { b.data()[i] };
            let n = g.len();
            let ga = needs(0).then(|| {
                let full: Vec<f64> = match prim {
                    Primitive::Add | Primitive::Sub => g.to_vec(),
                    Primitive::Mul => (0..n).map(|i| g[i] * bt(i)).collect(),
                    _ => (0..n).map(|i| g[i] / bt(i)).collect(),
                };
                unbroadcast(full, a)
            });
            let gb = needs(1).then(|| {
                let full: Vec<f64> = match prim {
                    Primitive::Add => g.to_vec(),
                    Primitive::Sub => g.iter().map(|v| -v).collect(),
                    Primitive::Mul => (0..n).map(|i| g[i] * at(i)).collect(),
                    _ => (0..n).map(|i| -g[i] * at(i) / (bt(i) * bt(i))).collect(),
                };
                unbroadcast(full, b)
            });
            vec![ga, gb]
        }
        Primitive::Scale(c) => elementwise(&|_| *c),
        Primitive::Shift(_) | Primitive::Reshape(_) => elementwise(&|_| 1.0),
        Primitive::MatMul => {
            let (a, b) = (inp(0), inp(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs(0).then(|| kernels::matmul(g, &kernels::transpose(b.data(), k, n), m, n, k));
            let gb = needs(1).then(|| kernels::matmul(&kernels::transpose(a.data(), m, k), g, k, m, n));
            vec![ga, gb]
        }
        Primitive::Conv2d(p) => {
            let bias = node.inputs.get(2).map(|&i| &nodes[i].value);
            let geom = conv_geom(p, inp(0), inp(1), bias).expect("validated in forward");
            let (gx, gw, gb) = kernels::conv2d_backward(&geom, inp(0).data(), inp(1).data(), g, needs(0), needs(1));
            let mut out = vec![needs(0).then_some(gx), needs(1).then_some(gw)];
            if node.inputs.len() == 3 {
                out.push(needs(2).then_some(gb));
            }
            out
        }
        Primitive::Relu => elementwise(&|i| if inp(0).data()[i] > 0.0 { 1.0 } else { 0.0 }),
        Primitive::Sigmoid => elementwise(&|i| y[i] * (1.0 - y[i])),
        Primitive::MaxPool2x2 => {
            let Saved::Argmax(arg) = &node.saved else { unreachable!("maxpool saves argmax") };
            let mut gx = vec![0.0; inp(0).numel()];
            for (o, &src) in arg.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![Some(gx)]
        }
        Primitive::AvgPool2x2 => {
            let s = inp(0).shape();
            vec![Some(kernels::avgpool2_backward(g, s[0], s[1], s[2]))]
        }
        Primitive::Upsample2x => {
            let s = inp(0).shape();
            vec![Some(kernels::upsample2_backward(g, s[0], s[1], s[2]))]
        }
        Primitive::Concat => {
            let mut offset = 0;
            (0..node.inputs.len())
                .map(|k| {
                    let n = inp(k).numel();
                    let part = needs(k).then(|| g[offset..offset + n].to_vec());
                    offset += n;
                    part
                })
                .collect()
        }
        Primitive::Sum => vec![needs(0).then(|| vec![g[0]; inp(0).numel()])],
        Primitive::Mean => {
            let n = inp(0).numel();
            vec![needs(0).then(|| vec![g[0] / n as f64; n])]
        }
        Primitive::SumAxis(axis) => {
            let shape = inp(0).shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut gx = vec![0.0; inp(0).numel()];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Primitive::Abs => elementwise(&|i| {
            let v = inp(0).data()[i];
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Primitive::Square => elementwise(&|i| 2.0 * inp(0).data()[i]),
        Primitive::Sqrt => elementwise(&|i| if y[i] > 0.0 { 0.5 / y[i] } else { 0.0 }),
        Primitive::Log => elementwise(&|i| 1.0 / inp(0).data()[i]),
        Primitive::Exp => elementwise(&|i| y[i]),
        Primitive::Power(p) => elementwise(&|i| p * inp(0).data()[i].powf(p - 1.0)),
        Primitive::Slice(ranges) => {
            let mut gx = vec![0.0; inp(0).numel()];
            for_each_slice_index(inp(0).shape(), ranges, |o, i| gx[i] += g[o]);
            vec![Some(gx)]
        }
        Primitive::PadReplicate { top, left, .. } => {
            let shape = inp(0).shape();
            let r = shape.len();
            let (h, w) = (shape[r - 2], shape[r - 1]);
            let os = node.value.shape();
            let (ho, wo) = (os[r - 2], os[r - 1]);
            let lead: usize = shape[..r - 2].iter().product();
            let mut gx = vec![0.0; inp(0).numel()];
            for l in 0..lead {
                for oy in 0..ho {
                    let iy = oy.saturating_sub(*top).min(h - 1);
                    for ox in 0..wo {
                        let ix = ox.saturating_sub(*left).min(w - 1);
                        gx[(l * h + iy) * w + ix] += g[(l * ho + oy) * wo + ox];
                    }
                }
            }
            vec![Some(gx)]
        }
        Primitive::Clamp { min, max } => elementwise(&|i| {
            let v = inp(0).data()[i];
            if v >= *min && v <= *max {
                1.0
            } else {
                0.0
            }
        }),
        Primitive::Gather(idx) => {
            let mut gx = vec![0.0; inp(0).numel()];
            for (o, &i) in idx.iter().enumerate() {
                gx[i] += g[o];
            }
            vec![Some(gx)]
        }
        Primitive::Warp { u, v } => {
            let s = inp(0).shape();
            vec![Some(kernels::warp_backward(g, s[0], s[1], s[2], u, v))]
        }
    }
}
