use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::broadcast::{resolve, Broadcast};
use super::{matmul_dims, Tensor, TensorError, TensorResult};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Sin,
    Cos,
    Sqrt,
    Softplus,
    Sigmoid,
    Square,
    Abs,
    Exp,
    Ln,
    Relu,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Relu => "relu",
        }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Relu => x.max(T::zero()),
        }
    }

    /// d out / d x given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let two = T::lit(2.0);
        match self {
            Unary::Neg => -T::one(),
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => T::one() / (two * y),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Square => two * x,
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Exp => y,
            Unary::Ln => T::one() / x,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// `ln(1 + eˣ)` without overflow.
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize, trans_b: bool },
    Bmm { a: usize, b: usize },
    Binary { kind: Binary, a: usize, b: usize, ba: Broadcast, bb: Broadcast },
    Unary { kind: Unary, a: usize },
    Scale { a: usize, c: T },
    Offset { a: usize },
    Reduce { a: usize, axes: Vec<usize>, mean: bool },
    Reshape { a: usize },
    Narrow { a: usize, start: usize, len: usize },
    Concat { parts: Vec<usize> },
    Transpose { a: usize },
    Gather { a: usize, index: Rc<Vec<usize>> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of tensor operations.
///
/// A tape is built fresh for every objective evaluation. [`Tape::backward`]
/// replays the recorded operations in reverse and accumulates
/// `∂loss/∂leaf` into every leaf created with `requires_grad`; repeated
/// calls accumulate until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
    checked: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            checked: false,
        }
    }

    /// A tape that rejects non-finite results and out-of-domain inputs.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.leaf_grads.get_mut().clear();
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenation along the last axis; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape();
        let rank = first.len();
        if rank == 0 {
            return Err(TensorError::Axis { axis: 0, rank });
        }
        let outer = &first[..rank - 1];
        let mut width = 0;
        for v in &values {
            if v.rank() != rank || &v.shape()[..rank - 1] != outer {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: first.to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            width += v.shape()[rank - 1];
        }
        let rows: usize = outer.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &values {
                let w = v.shape()[rank - 1];
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = outer.to_vec();
        shape.push(width);
        let requires = parts.iter().any(|p| p.requires_grad());
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            requires,
            "concat",
        )
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> TensorResult<Var<'_, T>> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any was written.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> TensorResult<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => accumulate(&mut leaf_grads[id], g),
                Op::Matmul { a, b, trans_b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = matmul_dims(av.shape(), bv.shape(), *trans_b)?;
                    if needs(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        // ga = g · bᵀ, with b stored k×n (or n×k when trans_b)
                        T::gemm(m, n, k, g.data(), false, bv.data(), !*trans_b, &mut ga, false);
                        add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                    }
                    if needs(*b) {
                        let gb = if *trans_b {
                            let mut gb = vec![T::zero(); n * k];
                            T::gemm(n, m, k, g.data(), true, av.data(), false, &mut gb, false);
                            gb
                        } else {
                            let mut gb = vec![T::zero(); k * n];
                            T::gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                            gb
                        };
                        add_grad(&mut grads, *b, Tensor::new(bv.shape(), gb)?);
                    }
                }
                Op::Bmm { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = bv.shape()[2];
                    if needs(*a) {
                        let mut ga = vec![T::zero(); bs * m * k];
                        for s in 0..bs {
                            let (gs, bsl) = (&g.data()[s * m * n..], &bv.data()[s * k * n..]);
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = T::zero();
                                    for j in 0..n {
                                        acc = acc + gs[i * n + j] * bsl[p * n + j];
                                    }
                                    ga[s * m * k + i * k + p] = acc;
                                }
                            }
                        }
                        add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); bs * k * n];
                        for s in 0..bs {
                            let (gs, asl) = (&g.data()[s * m * n..], &av.data()[s * m * k..]);
                            for p in 0..k {
                                for j in 0..n {
                                    let mut acc = T::zero();
                                    for i in 0..m {
                                        acc = acc + asl[i * k + p] * gs[i * n + j];
                                    }
                                    gb[s * k * n + p * n + j] = acc;
                                }
                            }
                        }
                        add_grad(&mut grads, *b, Tensor::new(bv.shape(), gb)?);
                    }
                }
                Op::Binary { kind, a, b, ba, bb } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (x, y) = (av.data(), bv.data());
                    let gd = g.data();
                    if needs(*a) {
                        let mut ga = vec![T::zero(); av.len()];
                        for (i, &gi) in gd.iter().enumerate() {
                            let (ia, ib) = (ba.index(i), bb.index(i));
                            ga[ia] = ga[ia]
                                + match kind {
                                    Binary::Add | Binary::Sub => gi,
                                    Binary::Mul => gi * y[ib],
                                    Binary::Div => gi / y[ib],
                                };
                        }
                        add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                    }
                    if needs(*b) {
                        let mut gb = vec![T::zero(); bv.len()];
                        for (i, &gi) in gd.iter().enumerate() {
                            let (ia, ib) = (ba.index(i), bb.index(i));
                            gb[ib] = gb[ib]
                                + match kind {
                                    Binary::Add => gi,
                                    Binary::Sub => -gi,
                                    Binary::Mul => gi * x[ia],
                                    Binary::Div => -gi * x[ia] / (y[ib] * y[ib]),
                                };
                        }
                        add_grad(&mut grads, *b, Tensor::new(bv.shape(), gb)?);
                    }
                }
                Op::Unary { kind, a } => {
                    let av = &nodes[*a].value;
                    let out = node.value.data();
                    let ga: Vec<T> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(out)
                        .map(|((&gi, &x), &y)| gi * kind.derivative(x, y))
                        .collect();
                    add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                }
                Op::Scale { a, c } => {
                    add_grad(&mut grads, *a, g.map(|v| v * *c));
                }
                Op::Offset { a } => add_grad(&mut grads, *a, g),
                Op::Reduce { a, axes, mean } => {
                    let av = &nodes[*a].value;
                    let (map, count) = reduce_map(av.shape(), axes);
                    let scale = if *mean { T::one() / T::lit(count as f64) } else { T::one() };
                    let gd = g.data();
                    let ga: Vec<T> = map.iter().map(|&o| gd[o] * scale).collect();
                    add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                }
                Op::Reshape { a } => {
                    let shape = nodes[*a].value.shape().to_vec();
                    add_grad(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Narrow { a, start, len } => {
                    let av = &nodes[*a].value;
                    let w = *av.shape().last().unwrap();
                    let rows = av.len() / w;
                    let mut ga = vec![T::zero(); av.len()];
                    for r in 0..rows {
                        ga[r * w + start..r * w + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                }
                Op::Concat { parts } => {
                    let w = *g.shape().last().unwrap();
                    let rows = g.len() / w;
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let pw = *pv.shape().last().unwrap();
                        if needs(p) {
                            let mut gp = Vec::with_capacity(pv.len());
                            for r in 0..rows {
                                gp.extend_from_slice(&g.data()[r * w + offset..r * w + offset + pw]);
                            }
                            add_grad(&mut grads, p, Tensor::new(pv.shape(), gp)?);
                        }
                        offset += pw;
                    }
                }
                Op::Transpose { a } => {
                    add_grad(&mut grads, *a, transpose_last2(&g));
                }
                Op::Gather { a, index } => {
                    let av = &nodes[*a].value;
                    let w = av.len() / av.shape()[0].max(1);
                    let mut ga = vec![T::zero(); av.len()];
                    for (r, &src) in index.iter().enumerate() {
                        for j in 0..w {
                            ga[src * w + j] = ga[src * w + j] + g.data()[r * w + j];
                        }
                    }
                    add_grad(&mut grads, *a, Tensor::new(av.shape(), ga)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        None => *slot = Some(g),
    }
}

fn add_grad<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    accumulate(&mut grads[id], g);
}

/// For each element of a tensor of `shape`, the flat index of the
/// reduced output it contributes to, plus the reduced element count.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, usize) {
    let n: usize = shape.iter().product();
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let mut out_strides = vec![0usize; shape.len()];
    let mut stride = 1;
    for ax in (0..shape.len()).rev() {
        if !axes.contains(&ax) {
            out_strides[ax] = stride;
            stride *= shape[ax];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (map, count)
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let block = rows * cols;
    let batches = t.len() / block.max(1);
    let mut data = vec![T::zero(); t.len()];
    for b in 0..batches {
        for i in 0..rows {
            for j in 0..cols {
                data[b * block + j * rows + i] = t.data()[b * block + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, data).expect("transpose preserves length")
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "operands recorded on different tapes");
    }

    /// `self · other`.
    pub fn matmul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ`, the shape of a dense layer applied to a batch.
    pub fn matmul_t(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, T>, trans_b: bool) -> TensorResult<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k, n) = matmul_dims(a.shape(), b.shape(), trans_b)?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), trans_b, &mut out, false);
        let requires = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Tensor::new(&[m, n], out)?,
            Op::Matmul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            requires,
            "matmul",
        )
    }

    /// Batched product `[B,m,k] · [B,k,n] → [B,m,n]`.
    pub fn bmm(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        for s in 0..bs {
            let (asl, bsl) = (&a.data()[s * m * k..], &b.data()[s * k * n..]);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc = acc + asl[i * k + p] * bsl[p * n + j];
                    }
                    out[s * m * n + i * n + j] = acc;
                }
            }
        }
        let requires = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Tensor::new(&[bs, m, n], out)?,
            Op::Bmm { a: self.id, b: other.id },
            requires,
            "bmm",
        )
    }

    fn binary(self, other: Var<'t, T>, kind: Binary) -> TensorResult<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (shape, ba, bb) = resolve(a.shape(), b.shape()).ok_or_else(|| TensorError::Dimension {
            op: kind.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (x, y) = (a.data(), b.data());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (p, q) = (x[ba.index(i)], y[bb.index(i)]);
                match kind {
                    Binary::Add => p + q,
                    Binary::Sub => p - q,
                    Binary::Mul => p * q,
                    Binary::Div => p / q,
                }
            })
            .collect();
        let requires = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                ba,
                bb,
            },
            requires,
            kind.name(),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        self.binary(other, Binary::Div)
    }

    fn unary(self, kind: Unary) -> TensorResult<Var<'t, T>> {
        let a = self.value();
        if self.tape.checked {
            let bad = match kind {
                Unary::Sqrt => a.data().iter().any(|&x| x < T::zero()),
                Unary::Ln => a.data().iter().any(|&x| x <= T::zero()),
                _ => false,
            };
            if bad {
                return Err(TensorError::Domain { op: kind.name() });
            }
        }
        let out = a.map(|x| kind.apply(x));
        self.tape
            .push(out, Op::Unary { kind, a: self.id }, self.requires_grad(), kind.name())
    }

    pub fn neg(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Neg)
    }
    pub fn sin(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Sin)
    }
    pub fn cos(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Cos)
    }
    pub fn sqrt(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Sqrt)
    }
    /// `ln(1 + eˣ)`; its derivative is the logistic function.
    pub fn softplus(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Softplus)
    }
    pub fn sigmoid(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn square(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Square)
    }
    pub fn abs(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Abs)
    }
    pub fn exp(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Ln)
    }
    pub fn relu(self) -> TensorResult<Var<'t, T>> {
        self.unary(Unary::Relu)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: T) -> TensorResult<Var<'t, T>> {
        let out = self.value().map(|x| x * c);
        self.tape
            .push(out, Op::Scale { a: self.id, c }, self.requires_grad(), "scale")
    }

    /// Addition of a constant.
    pub fn offset(self, c: T) -> TensorResult<Var<'t, T>> {
        let out = self.value().map(|x| x + c);
        self.tape
            .push(out, Op::Offset { a: self.id }, self.requires_grad(), "offset")
    }

    fn reduce(self, axes: &[usize], mean: bool) -> TensorResult<Var<'t, T>> {
        let a = self.value();
        let rank = a.rank();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(TensorError::Axis { axis: bad, rank });
        }
        let (map, count) = reduce_map(a.shape(), &axes);
        let shape: Vec<usize> = a
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        let n: usize = shape.iter().product();
        let mut out = vec![T::zero(); n];
        for (&o, &x) in map.iter().zip(a.data()) {
            out[o] = out[o] + x;
        }
        if mean && count > 0 {
            let inv = T::one() / T::lit(count as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        self.tape.push(
            Tensor::new(&shape, out)?,
            Op::Reduce { a: self.id, axes, mean },
            self.requires_grad(),
            if mean { "mean" } else { "sum" },
        )
    }

    /// Sum over `axes`; reduced axes are removed from the shape.
    pub fn sum(self, axes: &[usize]) -> TensorResult<Var<'t, T>> {
        self.reduce(axes, false)
    }

    pub fn mean(self, axes: &[usize]) -> TensorResult<Var<'t, T>> {
        self.reduce(axes, true)
    }

    pub fn sum_all(self) -> TensorResult<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(&axes, false)
    }

    pub fn mean_all(self) -> TensorResult<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.value().rank()).collect();
        self.reduce(&axes, true)
    }

    pub fn reshape(self, shape: &[usize]) -> TensorResult<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape
            .push(out, Op::Reshape { a: self.id }, self.requires_grad(), "reshape")
    }

    /// Columns `start..start+len` of the last axis.
    pub fn narrow(self, start: usize, len: usize) -> TensorResult<Var<'t, T>> {
        let a = self.value();
        let rank = a.rank();
        if rank == 0 {
            return Err(TensorError::Axis { axis: 0, rank });
        }
        let w = a.shape()[rank - 1];
        if start + len > w {
            return Err(TensorError::Index {
                index: start + len,
                extent: w,
            });
        }
        let rows = a.len() / w.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = a.shape().to_vec();
        shape[rank - 1] = len;
        self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Narrow { a: self.id, start, len },
            self.requires_grad(),
            "narrow",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> TensorResult<Var<'t, T>> {
        let a = self.value();
        if a.rank() < 2 {
            return Err(TensorError::Axis { axis: 1, rank: a.rank() });
        }
        let out = transpose_last2(&a);
        self.tape
            .push(out, Op::Transpose { a: self.id }, self.requires_grad(), "transpose")
    }

    /// Rows `index[i]` of the leading axis.
    pub fn gather(self, index: Rc<Vec<usize>>) -> TensorResult<Var<'t, T>> {
        let a = self.value();
        if a.rank() == 0 {
            return Err(TensorError::Axis { axis: 0, rank: 0 });
        }
        let n = a.shape()[0];
        let w = a.len() / n.max(1);
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= n {
                return Err(TensorError::Index { index: i, extent: n });
            }
            data.extend_from_slice(&a.data()[i * w..(i + 1) * w]);
        }
        let mut shape = a.shape().to_vec();
        shape[0] = index.len();
        self.tape.push(
            Tensor::new(&shape, data)?,
            Op::Gather { a: self.id, index },
            self.requires_grad(),
            "gather",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    /// Largest relative error between tape gradients and central differences
    /// for every input of `f`.
    fn fd_error(inputs: &[Tensor<f64>], h: f64, f: impl for<'t> Fn(&[Var<'t, f64>]) -> TensorResult<Var<'t, f64>>) -> f64 {
        let eval = |xs: &[Tensor<f64>]| {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            f(&vars).unwrap().item()
        };
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&vars).unwrap();
        tape.backward(loss).unwrap();
        let mut worst = 0.0f64;
        for (k, x) in inputs.iter().enumerate() {
            let g = tape.grad(vars[k]).unwrap();
            for i in 0..x.len() {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += h;
                let up = eval(&xs);
                xs[k].data_mut()[i] -= 2.0 * h;
                let down = eval(&xs);
                let num = (up - down) / (2.0 * h);
                let err = (g.data()[i] - num).abs() / num.abs().max(g.data()[i].abs()).max(1e-8);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
        let c = tape.constant(Tensor::from_rows(&[[0.0], [1.0]]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[0.0]);
        assert!(matches!(a.matmul(r), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn matmul_backward_matches_differences() {
        let inputs = [random(&[3, 4], 1.0, 1), random(&[4, 2], 1.0, 2)];
        let err = fd_error(&inputs, 1e-5, |v| v[0].matmul(v[1])?.sin()?.sum_all());
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let z = tape.scalar(0.0f64);
        assert_eq!(z.sin().unwrap().item(), 0.0);
        assert_eq!(z.cos().unwrap().item(), 1.0);
        assert!((z.softplus().unwrap().item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_slope_at_two() {
        let err = fd_error(&[Tensor::scalar(2.0)], 1e-5, |v| v[0].softplus());
        assert!(err <= 1e-8, "{err}");
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        tape.backward(x.softplus().unwrap()).unwrap();
        let logistic = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((tape.grad(x).unwrap().item() - logistic).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_is_trailing_only() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let row = tape.constant(Tensor::ones(&[3]));
        assert_eq!(a.add(row).unwrap().value().data(), &[1.0; 6]);
        let bad = tape.constant(Tensor::ones(&[4]));
        assert!(matches!(a.add(bad), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn checked_tape_rejects_invalid_domains() {
        let tape = Tape::<f64>::checked();
        assert!(tape.scalar(-1.0).sqrt().is_err());
        assert!(tape.scalar(-1.0).ln().is_err());
        let plain = Tape::<f64>::new();
        assert!(plain.scalar(-1.0).sqrt().unwrap().item().is_nan());
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap());
        assert_eq!(x.sum_all().unwrap().item(), 6.0);
        let c = tape.constant(Tensor::full(&[2, 5], 4.0f64));
        assert_eq!(c.mean_all().unwrap().item(), 4.0);
        assert_eq!(c.sum(&[1]).unwrap().value().data(), &[20.0, 20.0]);
        assert!(matches!(c.sum(&[2]), Err(TensorError::Axis { .. })));
        tape.backward(x.mean_all().unwrap()).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap());
        tape.backward(w.mul(w).unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0f64));
        tape.backward(w.sin().unwrap()).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 1.0);
        assert!(matches!(tape.backward(tape.constant(Tensor::<f64>::zeros(&[2]))), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0f64));
        let loss = w.square().unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 12.0);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn detached_inputs_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.5f64));
        let c = tape.constant(Tensor::scalar(2.0f64));
        tape.backward(w.mul(c).unwrap().exp().unwrap()).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn three_layer_composite_matches_differences() {
        let inputs = [
            random(&[5, 3], 1.0, 3),
            random(&[3, 4], 1.0, 4),
            random(&[4], 1.0, 5),
            random(&[4, 2], 1.0, 6),
        ];
        let err = fd_error(&inputs, 1e-5, |v| {
            let h = v[0].matmul(v[1])?.add(v[2])?.sin()?;
            let h = h.matmul(v[3])?.softplus()?;
            let h = h.transpose()?.reshape(&[10])?.narrow(2, 6)?;
            h.square()?.offset(1.0)?.sqrt()?.mean_all()
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn structural_ops_match_differences() {
        let inputs = [random(&[4, 3], 2.0, 7), random(&[4, 2], 2.0, 8)];
        let idx = Rc::new(vec![3, 0, 0, 2]);
        let err = fd_error(&inputs, 1e-5, |v| {
            let tape = v[0].tape();
            let c = tape.concat(&[v[0], v[1]])?.gather(idx.clone())?;
            let d = c.sigmoid()?.div(c.abs()?.offset(1.0)?)?;
            d.mul(c.cos()?)?.sub(c.relu()?.scale(0.5)?)?.mean(&[0])?.sum_all()
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let x = random(&[6, 5], 3.0, 9);
        let grad = || {
            let tape = Tape::new();
            let v = tape.param(x.clone());
            let loss = v.matmul(v.transpose().unwrap()).unwrap().sin().unwrap().sum_all().unwrap();
            tape.backward(loss).unwrap();
            tape.grad(v).unwrap()
        };
        assert_eq!(grad().data(), grad().data());
    }
}
