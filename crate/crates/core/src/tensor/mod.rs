//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op eagerly computes its value and, when at least one input requires
//! a gradient, records itself as the producing node of the result. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every reachable tensor
//! that requires one. Graphs are rebuilt on every forward pass.

mod kernels;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

pub use kernels::SparseOperator;
use kernels::{broadcast_shape, broadcast_strides, contiguous_strides, gemm, StridedWalk};

use crate::error::{Error, Result};

/// Identifies the kind of operation that produced a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Tanh,
    MaskedSoftmax,
    Sum,
    Mean,
    Norm,
    Reshape,
    Permute,
    Narrow,
    Scale,
    Propagate,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Tanh,
        OpKind::MaskedSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Norm,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::Scale,
        OpKind::Propagate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Norm => "norm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::Scale => "scale",
            OpKind::Propagate => "propagate",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static CORRUPTED: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hook: while `f` runs on this thread, the backward rule of `kind`
/// scales its incoming gradient by 1.5. Used to prove the gradient checker
/// catches a broken rule.
pub fn with_corrupted_backward<T>(kind: OpKind, f: impl FnOnce() -> T) -> T {
    struct Reset(Option<OpKind>);
    impl Drop for Reset {
        fn drop(&mut self) {
            CORRUPTED.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(CORRUPTED.with(|c| c.replace(Some(kind))));
    f()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Boolean mask for [`Tensor::masked_softmax`]; `true` marks an allowed entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Rc<[bool]>,
}

impl Mask {
    pub fn new(shape: &[usize], allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("mask", shape, &[allowed.len()]));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            allowed: allowed.into(),
        })
    }

    pub fn full(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            allowed: vec![true; n].into(),
        }
    }

    /// Lower-triangular (diagonal included) `rows x cols` mask repeated over
    /// the leading `batch` dims.
    pub fn causal(batch: &[usize], rows: usize, cols: usize) -> Self {
        let reps: usize = batch.iter().product();
        let mut allowed = Vec::with_capacity(reps * rows * cols);
        for _ in 0..reps {
            for i in 0..rows {
                allowed.extend((0..cols).map(|k| k <= i));
            }
        }
        let mut shape = batch.to_vec();
        shape.extend([rows, cols]);
        Mask {
            shape,
            allowed: allowed.into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }
}

enum Op {
    MatMul(Tensor, Tensor),
    Binary(BinaryKind, Tensor, Tensor),
    Tanh(Tensor),
    MaskedSoftmax {
        input: Tensor,
        axis: usize,
    },
    Sum(Tensor),
    Mean(Tensor),
    Norm(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Narrow {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    Scale(Tensor, f64),
    Propagate(Arc<SparseOperator>, Tensor),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::MatMul(..) => OpKind::MatMul,
            Op::Binary(BinaryKind::Add, ..) => OpKind::Add,
            Op::Binary(BinaryKind::Sub, ..) => OpKind::Sub,
            Op::Binary(BinaryKind::Mul, ..) => OpKind::Mul,
            Op::Tanh(_) => OpKind::Tanh,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Norm(_) => OpKind::Norm,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Scale(..) => OpKind::Scale,
            Op::Propagate(..) => OpKind::Propagate,
        }
    }

    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![a, b],
            Op::Tanh(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Norm(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Scale(x, _)
            | Op::Propagate(_, x) => vec![x],
            Op::MaskedSoftmax { input, .. } | Op::Narrow { input, .. } => vec![input],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// A node in the differentiation graph. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::kind))
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Result of an op: tracked only if some input is.
    fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let tracked = op.inputs().iter().any(|t| t.requires_grad());
        Tensor::from_parts(shape, data, tracked, tracked.then_some(op))
    }

    fn checked(shape: &[usize], data: Vec<f64>) -> Result<(Vec<usize>, Vec<f64>)> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok((shape.to_vec(), data))
    }

    /// A constant: never accumulates gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let (shape, data) = Tensor::checked(shape, data)?;
        Ok(Tensor::from_parts(shape, data, false, None))
    }

    /// A leaf that receives a gradient on backward.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let (shape, data) = Tensor::checked(shape, data)?;
        Ok(Tensor::from_parts(shape, data, true, None))
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Which op produced this tensor (`None` for leaves and untracked results).
    pub fn op_kind(&self) -> Option<OpKind> {
        self.0.op.as_ref().map(Op::kind)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    fn accumulate_with(&self, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    fn accumulate(&self, contribution: &[f64]) {
        self.accumulate_with(|g| {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        });
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product over the last two axes, leading axes broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let spec = MatMulSpec::new(self.shape(), other.shape())?;
        let mut out = vec![0.0; spec.out_shape.iter().product()];
        spec.forward(self.data(), other.data(), &mut out);
        Ok(Tensor::derived(
            spec.out_shape,
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    /// Elementwise `add`/`sub`/`mul` with numpy broadcasting.
    pub fn binary(&self, other: &Tensor, kind: BinaryKind) -> Result<Tensor> {
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (shape, data) = if self.shape() == other.shape() {
            let data = self.data().iter().zip(other.data()).map(|(&x, &y)| f(x, y)).collect();
            (self.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(self.shape(), other.shape())
                .ok_or_else(|| Error::dim(kind_name(kind), self.shape(), other.shape()))?;
            let walk = StridedWalk::new(
                &shape,
                [
                    broadcast_strides(self.shape(), &shape),
                    broadcast_strides(other.shape(), &shape),
                ],
            );
            let (a, b) = (self.data(), other.data());
            let data = walk.map(|[i, j]| f(a[i], b[j])).collect();
            (shape, data)
        };
        Ok(Tensor::derived(
            shape,
            data,
            Op::Binary(kind, self.clone(), other.clone()),
        ))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.tanh()).collect();
        Tensor::derived(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::derived(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    /// Softmax along `axis` restricted to entries the mask allows; masked
    /// entries come out as exactly zero.
    pub fn masked_softmax(&self, mask: &Mask, axis: usize) -> Result<Tensor> {
        if mask.shape() != self.shape() {
            return Err(Error::dim("masked_softmax", self.shape(), mask.shape()));
        }
        if axis >= self.shape().len() {
            return Err(Error::dim("masked_softmax", self.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let allowed = mask.allowed();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len)
                    .filter(|&l| allowed[at(l)])
                    .map(|l| x[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateMask {
                        slice: o * inner + i,
                    });
                }
                let mut total = 0.0;
                for l in 0..len {
                    if allowed[at(l)] {
                        let e = (x[at(l)] - max).exp();
                        out[at(l)] = e;
                        total += e;
                    }
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        Ok(Tensor::derived(
            self.shape().to_vec(),
            out,
            Op::MaskedSoftmax {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::derived(vec![], vec![s], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::derived(vec![], vec![s / n], Op::Mean(self.clone()))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn norm_last(&self) -> Result<Tensor> {
        let (&width, lead) = self
            .shape()
            .split_last()
            .ok_or_else(|| Error::dim("norm", self.shape(), &[1]))?;
        let data = if width == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            self.data()
                .chunks_exact(width)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        Ok(Tensor::derived(lead.to_vec(), data, Op::Norm(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        Ok(Tensor::derived(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", self.shape(), perm));
        }
        let in_strides = contiguous_strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = self.data();
        let data = StridedWalk::new(&out_shape, [strides]).map(|[i]| x[i]).collect();
        Ok(Tensor::derived(
            out_shape,
            data,
            Op::Permute(self.clone(), perm.to_vec()),
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape().len() || start + len > self.shape()[axis] {
            return Err(Error::dim("narrow", self.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::derived(
            shape,
            data,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Applies a constant sparse operator along the second-to-last axis:
    /// `out[.., i, c] = Σ_j A[i, j] x[.., j, c]`.
    pub fn propagate(&self, operator: &Arc<SparseOperator>) -> Result<Tensor> {
        let rank = self.shape().len();
        if rank < 2 || self.shape()[rank - 2] != operator.size() {
            return Err(Error::dim(
                "propagate",
                &[operator.size(), operator.size()],
                self.shape(),
            ));
        }
        let width = self.shape()[rank - 1];
        let batch = self.shape()[..rank - 2].iter().product();
        let mut out = vec![0.0; self.numel()];
        operator.apply_add(self.data(), &mut out, batch, width);
        Ok(Tensor::derived(
            self.shape().to_vec(),
            out,
            Op::Propagate(operator.clone(), self.clone()),
        ))
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from this scalar into every reachable tensor that
    /// requires a gradient. Each node's rule runs exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        self.accumulate(&[1.0]);
        let corrupted = CORRUPTED.with(Cell::get);
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let Some(mut g) = node.grad() else { continue };
            if corrupted == Some(op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            node.apply_backward(op, &g);
        }
        Ok(())
    }

    /// Depth-first post-order over tracked nodes.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.ptr()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn apply_backward(&self, op: &Op, g: &[f64]) {
        match op {
            Op::MatMul(a, b) => {
                let spec = MatMulSpec::new(a.shape(), b.shape()).expect("validated in forward");
                if a.requires_grad() {
                    a.accumulate_with(|ga| spec.grad_lhs(g, b.data(), ga));
                }
                if b.requires_grad() {
                    b.accumulate_with(|gb| spec.grad_rhs(g, a.data(), gb));
                }
            }
            Op::Binary(kind, a, b) => binary_backward(*kind, a, b, self.shape(), g),
            Op::Tanh(x) => {
                let y = self.data();
                x.accumulate_with(|gx| {
                    for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Scale(x, factor) => x.accumulate_with(|gx| {
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += gi * factor;
                }
            }),
            Op::MaskedSoftmax { input, axis, .. } => {
                let (outer, len, inner) = split_axis(self.shape(), *axis);
                let y = self.data();
                input.accumulate_with(|gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => x.accumulate_with(|gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let share = g[0] / x.numel().max(1) as f64;
                x.accumulate_with(|gx| gx.iter_mut().for_each(|d| *d += share));
            }
            Op::Norm(x) => {
                let width = *x.shape().last().expect("norm input has an axis");
                let (xs, ys) = (x.data(), self.data());
                x.accumulate_with(|gx| {
                    if width == 0 {
                        return;
                    }
                    for (r, row) in gx.chunks_exact_mut(width).enumerate() {
                        // Zero subgradient at the origin.
                        if ys[r] > 0.0 {
                            let s = g[r] / ys[r];
                            for (c, d) in row.iter_mut().enumerate() {
                                *d += s * xs[r * width + c];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => x.accumulate(g),
            Op::Permute(x, perm) => {
                let in_strides = contiguous_strides(x.shape());
                let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                x.accumulate_with(|gx| {
                    for (o, [i]) in StridedWalk::new(self.shape(), [strides]).enumerate() {
                        gx[i] += g[o];
                    }
                });
            }
            Op::Narrow { input, axis, start } => {
                let (outer, full, inner) = split_axis(input.shape(), *axis);
                let len = self.shape()[*axis];
                input.accumulate_with(|gx| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Propagate(operator, x) => {
                let rank = x.shape().len();
                let width = x.shape()[rank - 1];
                let batch = x.shape()[..rank - 2].iter().product();
                x.accumulate_with(|gx| operator.apply_transpose_add(g, gx, batch, width));
            }
        }
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
    }
}

fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, out_shape: &[usize], g: &[f64]) {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let (av, bv) = (a.data(), b.data());
    a.accumulate_with(|ga| {
        for (o, [i, j]) in StridedWalk::new(out_shape, [sa.clone(), sb.clone()]).enumerate() {
            ga[i] += match kind {
                BinaryKind::Add | BinaryKind::Sub => g[o],
                BinaryKind::Mul => g[o] * bv[j],
            };
        }
    });
    b.accumulate_with(|gb| {
        for (o, [i, j]) in StridedWalk::new(out_shape, [sa, sb]).enumerate() {
            gb[j] += match kind {
                BinaryKind::Add => g[o],
                BinaryKind::Sub => -g[o],
                BinaryKind::Mul => g[o] * av[i],
            };
        }
    });
}

/// `(product of dims before axis, dim at axis, product of dims after axis)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Geometry of a broadcast batched matmul.
struct MatMulSpec {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    batch_shape: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    /// `b` has no batch axes, so `a`'s batch folds into its row count.
    fold_lhs: bool,
}

impl MatMulSpec {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (a_batch, a_mat) = a.split_at(a.len() - 2);
        let (b_batch, b_mat) = b.split_at(b.len() - 2);
        let (m, k, k2, n) = (a_mat[0], a_mat[1], b_mat[0], b_mat[1]);
        if k != k2 {
            return Err(Error::dim("matmul", a, b));
        }
        let batch_shape = broadcast_shape(a_batch, b_batch).ok_or_else(|| Error::dim("matmul", a, b))?;
        let mut a_batch_strides = broadcast_strides(a_batch, &batch_shape);
        a_batch_strides.iter_mut().for_each(|s| *s *= m * k);
        let mut b_batch_strides = broadcast_strides(b_batch, &batch_shape);
        b_batch_strides.iter_mut().for_each(|s| *s *= k * n);
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(MatMulSpec {
            m,
            k,
            n,
            out_shape,
            fold_lhs: b_batch.is_empty() && a_batch == batch_shape.as_slice(),
            batch_shape,
            a_batch_strides,
            b_batch_strides,
        })
    }

    fn batches(&self) -> impl Iterator<Item = (usize, [usize; 2])> + '_ {
        StridedWalk::new(
            &self.batch_shape,
            [self.a_batch_strides.clone(), self.b_batch_strides.clone()],
        )
        .enumerate()
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let row = |cols: usize| (cols as isize, 1isize);
        if self.fold_lhs {
            let rows = self.batch_shape.iter().product::<usize>() * m;
            gemm(rows, k, n, 1.0, a, row(k), b, row(n), 0.0, out, row(n));
            return;
        }
        for (bi, [ia, ib]) in self.batches() {
            gemm(
                m,
                k,
                n,
                1.0,
                &a[ia..ia + m * k],
                row(k),
                &b[ib..ib + k * n],
                row(n),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
                row(n),
            );
        }
    }

    /// `dA += G Bᵀ`, summed over broadcast batches.
    fn grad_lhs(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let bt = (1isize, n as isize);
        if self.fold_lhs {
            let rows = self.batch_shape.iter().product::<usize>() * m;
            gemm(rows, n, k, 1.0, g, (n as isize, 1), b, bt, 1.0, ga, (k as isize, 1));
            return;
        }
        for (bi, [ia, ib]) in self.batches() {
            gemm(
                m,
                n,
                k,
                1.0,
                &g[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
                &b[ib..ib + k * n],
                bt,
                1.0,
                &mut ga[ia..ia + m * k],
                (k as isize, 1),
            );
        }
    }

    /// `dB += Aᵀ G`, summed over broadcast batches.
    fn grad_rhs(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let at = (1isize, k as isize);
        if self.fold_lhs {
            let rows = self.batch_shape.iter().product::<usize>() * m;
            gemm(k, rows, n, 1.0, a, at, g, (n as isize, 1), 1.0, gb, (n as isize, 1));
            return;
        }
        for (bi, [ia, ib]) in self.batches() {
            gemm(
                k,
                m,
                n,
                1.0,
                &a[ia..ia + m * k],
                at,
                &g[bi * m * n..(bi + 1) * m * n],
                (n as isize, 1),
                1.0,
                &mut gb[ib..ib + k * n],
                (n as isize, 1),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    fn p(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::parameter(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[2.0, 3.0, 4.0, 5.0], &[2, 2]);
        assert_eq!(i.matmul(&b).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        let r = t(&[1.0, 2.0], &[1, 2]).matmul(&t(&[3.0, 4.0], &[2, 1])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[0.0; 6], &[2, 3]).matmul(&t(&[0.0; 4], &[2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        // [2,1,1,2] x [3,2,1] -> [2,3,1,1]
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 1, 1, 2]);
        let b = t(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2, 1]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_bt() {
        let a = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[1.0, -1.0, 2.0, 0.5, 3.0, 4.0], &[3, 2]);
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // ones(2x2) * Bᵀ: each row is the row sums of B.
        assert_eq!(a.grad().unwrap(), vec![0.0, 2.5, 7.0, 0.0, 2.5, 7.0]);
        assert!(b.grad().is_none());
    }

    #[test]
    fn elementwise_basics() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[3.0, 4.0], &[2]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let x = p(&[1.5, -2.0, 0.3], &[3]);
        let zero = Tensor::scalar(0.0);
        let y = x.mul(&zero).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
        assert_eq!(x.sub(&x).unwrap().data(), &[0.0; 3]);
        assert!(a.add(&t(&[1.0, 2.0, 3.0], &[3])).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let a = p(&[0.0; 6], &[2, 3]);
        let b = p(&[0.0; 3], &[1, 3]);
        a.add(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0; 3]);
        assert_eq!(a.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn tanh_values() {
        let x = t(&[0.0, 50.0], &[2]);
        let y = x.tanh();
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1] > 0.999 && y.data()[1] <= 1.0);
    }

    #[test]
    fn masked_softmax_cases() {
        let s = t(&[0.0, 0.0], &[2]);
        let y = s.masked_softmax(&Mask::full(&[2]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let s = t(&[5.0, 100.0], &[2]);
        let m = Mask::new(&[2], vec![true, false]).unwrap();
        assert_eq!(s.masked_softmax(&m, 0).unwrap().data(), &[1.0, 0.0]);
        let m = Mask::new(&[2], vec![false, false]).unwrap();
        assert!(matches!(
            s.masked_softmax(&m, 0),
            Err(Error::DegenerateMask { slice: 0 })
        ));
    }

    #[test]
    fn backward_simple_roots() {
        let w = p(&[1.0, -2.0, 3.0], &[3]);
        w.sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 3]);
        let w = p(&[1.0, -2.0, 3.0], &[3]);
        w.mul(&w).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, -4.0, 6.0]);
        assert!(matches!(w.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = s * s with s = tanh(w) shared, vs. two independent copies of s.
        let w = p(&[0.3, -0.7], &[2]);
        let s = w.tanh();
        s.mul(&s).unwrap().sum().backward().unwrap();
        let shared = w.grad().unwrap();

        let w2 = p(&[0.3, -0.7], &[2]);
        let (s1, s2) = (w2.tanh(), w2.tanh());
        s1.mul(&s2).unwrap().sum().backward().unwrap();
        let duplicated = w2.grad().unwrap();
        for (a, b) in shared.iter().zip(&duplicated) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_never_get_gradients() {
        let c = t(&[1.0, 2.0], &[2]);
        let w = p(&[3.0, 4.0], &[2]);
        let y = c.mul(&w).unwrap().sum();
        y.backward().unwrap();
        assert!(c.grad().is_none());
        assert!(!c.mul(&c).unwrap().requires_grad());
    }

    #[test]
    fn permute_and_narrow() {
        let x = t(&(0..6).map(f64::from).collect::<Vec<_>>(), &[2, 3]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = x.narrow(1, 1, 2).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.narrow(1, 2, 2).is_err());
    }

    #[test]
    fn corrupted_backward_hook_is_scoped() {
        let run = || {
            let w = p(&[1.0], &[1]);
            w.scale(2.0).sum().backward().unwrap();
            w.grad().unwrap()[0]
        };
        assert_eq!(with_corrupted_backward(OpKind::Scale, run), 3.0);
        assert_eq!(run(), 2.0);
    }
}
