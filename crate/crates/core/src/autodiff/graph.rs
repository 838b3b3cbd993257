//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records ops symbolically; shapes are only known once leaves
//! are bound in [`Graph::evaluate`]. Node ids are handed out in insertion
//! order, which is also a valid topological order, so the backward sweep is
//! a single reverse pass.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{axis_blocks, strides, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Sum(NodeId, usize),
    Mean(NodeId, usize),
    Broadcast(NodeId, Vec<usize>),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Dropout(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Broadcast(..) => "broadcast",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Gelu(_) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout(..) => "dropout",
        }
    }
}

/// Whether stochastic ops are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout on, masks drawn from a stream derived from `seed` and the node id.
    Train { seed: u64 },
}

/// Leaf name to value map consumed by [`Graph::evaluate`].
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn bind_all<'b, I>(&mut self, values: I) -> &mut Self
    where
        I: IntoIterator<Item = (&'b String, &'a Tensor)>,
    {
        for (name, value) in values {
            self.map.insert(name.clone(), value);
        }
        self
    }

    fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingBinding(name.to_string()))
    }
}

/// Forward values cached for the backward sweep.
#[derive(Debug, Clone)]
pub struct Values {
    cache: Vec<Option<Tensor>>,
    aux: Vec<Option<Vec<f64>>>,
}

impl Values {
    /// An empty cache; asking it for gradients is an error.
    pub fn empty() -> Self {
        Self {
            cache: Vec::new(),
            aux: Vec::new(),
        }
    }

    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        self.cache
            .get(id.0)
            .and_then(|v| v.as_ref())
            .ok_or(Error::NotEvaluated(id.0))
    }
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: HashMap<String, NodeId>,
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

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Non-trainable leaf. Repeated calls with one name share a node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, false)
    }

    /// Trainable leaf. Repeated calls with one name share a node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(x, c))
    }

    /// `[.., m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Swaps the last two axes. Rank is taken from the evaluated input.
    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Permute(x, Vec::new()))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        self.push(Op::Permute(x, axes.to_vec()))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { x, axis, start, end })
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Sum(x, axis))
    }

    pub fn mean(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Mean(x, axis))
    }

    /// Sum of every entry, as shape `[1]`.
    pub fn sum_all(&mut self, x: NodeId, numel: usize) -> NodeId {
        let flat = self.reshape(x, &[numel]);
        self.sum(flat, 0)
    }

    /// Expands size-1 axes and missing leading axes to `shape`.
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Broadcast(x, shape.to_vec()))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sqrt(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::Softmax(x, axis))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// the last axis' extent).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        self.push(Op::Dropout(x, rate))
    }

    /// Evaluates every node up to and including `root`.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings<'_>, mode: Mode) -> Result<Values> {
        let n = root.0 + 1;
        let mut values = Values {
            cache: Vec::with_capacity(n),
            aux: Vec::with_capacity(n),
        };
        for (i, op) in self.nodes[..n].iter().enumerate() {
            let (out, aux) = forward(op, i, &values, bindings, mode)?;
            if !out.is_finite() {
                return Err(Error::NonFinite { op: op.name(), node: i });
            }
            values.cache.push(Some(out));
            values.aux.push(aux);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// trainable leaf reachable from it.
    pub fn gradients(&self, values: &Values, loss: NodeId) -> Result<Gradients> {
        let loss_value = values.get(loss)?;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.nodes[i];
            match op {
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                Op::Input(_) | Op::Const(_) => {}
                _ => backward(op, i, g, values, &mut grads)?,
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

// ---------------------------------------------------------------------------
// forward

type Forward = (Tensor, Option<Vec<f64>>);

fn forward(op: &Op, node: usize, values: &Values, bindings: &Bindings<'_>, mode: Mode) -> Result<Forward> {
    let get = |id: NodeId| values.get(id);
    let out = match op {
        Op::Input(name) | Op::Param(name) => bindings.get(name)?.clone(),
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => binary("add", get(*a)?, get(*b)?, |x, y| x + y)?,
        Op::Sub(a, b) => binary("sub", get(*a)?, get(*b)?, |x, y| x - y)?,
        Op::Mul(a, b) => binary("mul", get(*a)?, get(*b)?, |x, y| x * y)?,
        Op::Scale(x, c) => get(*x)?.map(|v| v * c),
        Op::MatMul(a, b) => matmul_forward(get(*a)?, get(*b)?)?,
        Op::Permute(x, axes) => {
            let x = get(*x)?;
            let axes = resolve_perm(x.shape(), axes)?;
            permute(x, &axes)
        }
        Op::Reshape(x, shape) => get(*x)?.clone().reshaped(shape)?,
        Op::Concat(xs, axis) => {
            let parts = xs.iter().map(|&id| get(id)).collect::<Result<Vec<_>>>()?;
            concat_forward(&parts, *axis)?
        }
        Op::Slice { x, axis, start, end } => slice_forward(get(*x)?, *axis, *start, *end)?,
        Op::Sum(x, axis) => reduce_sum(get(*x)?, *axis, 1.0)?,
        Op::Mean(x, axis) => {
            let x = get(*x)?;
            check_axis("mean", x.shape(), *axis)?;
            reduce_sum(x, *axis, 1.0 / x.shape()[*axis] as f64)?
        }
        Op::Broadcast(x, shape) => {
            let x = get(*x)?;
            let src = broadcast_strides(x.shape(), shape)?;
            Tensor::from_parts(shape.clone(), gather(x.data(), shape, &src))
        }
        Op::Exp(x) => get(*x)?.map(f64::exp),
        Op::Log(x) => get(*x)?.map(f64::ln),
        Op::Sqrt(x) => get(*x)?.map(f64::sqrt),
        Op::Square(x) => get(*x)?.map(|v| v * v),
        Op::Softplus(x) => get(*x)?.map(softplus),
        Op::Gelu(x) => get(*x)?.map(gelu),
        Op::Softmax(x, axis) => softmax_forward(get(*x)?, *axis)?,
        Op::LayerNorm { x, gain, bias, eps } => {
            return layer_norm_forward(get(*x)?, get(*gain)?, get(*bias)?, *eps);
        }
        Op::Dropout(x, rate) => {
            let x = get(*x)?;
            return Ok(dropout_forward(x, *rate, node, mode));
        }
    };
    Ok((out, None))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// How two operand shapes combine: equal, or one is a trailing suffix of
/// the other (leading-axis expansion).
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    /// Right operand repeated over the left operand's leading axes.
    RightSmall,
    LeftSmall,
}

fn pairing(op: &'static str, a: &[usize], b: &[usize]) -> Result<Pairing> {
    if a == b {
        Ok(Pairing::Same)
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(Pairing::RightSmall)
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(Pairing::LeftSmall)
    } else {
        Err(Error::Shape {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (shape, data) = match pairing(op, a.shape(), b.shape())? {
        Pairing::Same => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Pairing::RightSmall => {
            let nb = b.numel();
            (
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % nb]))
                    .collect(),
            )
        }
        Pairing::LeftSmall => {
            let na = a.numel();
            (
                b.shape().to_vec(),
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % na], y))
                    .collect(),
            )
        }
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Sums `g` down to `numel` entries by folding leading repeats.
fn fold_leading(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    if n == g.numel() {
        return Tensor::from_parts(shape.to_vec(), g.data().to_vec());
    }
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// `c (+)= op(a) * op(b)` with `a` stored `[m,k]` (or `[k,m]` when
/// `ta`), `b` stored `[k,n]` (or `[n,k]` when `tb`), `c` stored `[m,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

enum MatMulKind {
    /// `[.., m, k] x [k, n]`, flattened to rows x k.
    Shared { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatMulKind> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        if b[0] != k {
            return Err(err());
        }
        let rows = a[..a.len() - 1].iter().product();
        return Ok(MatMulKind::Shared { rows, k, n: b[1] });
    }
    if a.len() == 3 && b.len() == 3 && a[0] == b[0] && b[1] == k {
        return Ok(MatMulKind::Batched {
            batch: a[0],
            m: a[1],
            k,
            n: b[2],
        });
    }
    Err(err())
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match matmul_kind(a.shape(), b.shape())? {
        MatMulKind::Shared { rows, k, n } => {
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Ok(Tensor::from_parts(shape, out))
        }
        MatMulKind::Batched { batch, m, k, n } => {
            let mut out = vec![0.0; batch * m * n];
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..],
                    false,
                    &b.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
            Ok(Tensor::from_parts(vec![batch, m, n], out))
        }
    }
}

fn resolve_perm(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let r = shape.len();
    if axes.is_empty() {
        if r < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let mut p: Vec<usize> = (0..r).collect();
        p.swap(r - 1, r - 2);
        return Ok(p);
    }
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Shape {
            op: "permute",
            lhs: shape.to_vec(),
            rhs: axes.to_vec(),
        });
    }
    Ok(axes.to_vec())
}

fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let st = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    Tensor::from_parts(out_shape.clone(), gather(x.data(), &out_shape, &src))
}

/// Walks `out_shape` in row-major order reading `data` through `src` strides.
fn gather(data: &[f64], out_shape: &[usize], src: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    strided_walk(out_shape, src, |off| out.push(data[off]));
    out
}

/// Adds `g` (laid out over `out_shape`) into `dst` through `src` strides.
fn scatter_add(g: &[f64], out_shape: &[usize], src: &[usize], dst: &mut [f64]) {
    let mut i = 0;
    strided_walk(out_shape, src, |off| {
        dst[off] += g[i];
        i += 1;
    });
}

fn strided_walk(shape: &[usize], src: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let last = rank - 1;
    let (inner_n, inner_s) = (shape[last], src[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner_n {
            f(base + j * inner_s);
        }
        // advance the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= src[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_strides(src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    let err = || Error::Shape {
        op: "broadcast",
        lhs: src.to_vec(),
        rhs: target.to_vec(),
    };
    if src.len() > target.len() {
        return Err(err());
    }
    let offset = target.len() - src.len();
    let st = strides(src);
    let mut out = vec![0; target.len()];
    for (j, &t) in target.iter().enumerate() {
        if j < offset {
            continue;
        }
        let s = src[j - offset];
        if s == t {
            out[j] = st[j - offset];
        } else if s != 1 {
            return Err(err());
        }
    }
    Ok(out)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn reduce_sum(x: &Tensor, axis: usize, factor: f64) -> Result<Tensor> {
    check_axis("sum", x.shape(), axis)?;
    let (outer, len, inner) = axis_blocks(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (acc, v) in dst.iter_mut().zip(row) {
                *acc += v;
            }
        }
        if factor != 1.0 {
            dst.iter_mut().for_each(|v| *v *= factor);
        }
    }
    Ok(Tensor::from_parts(reduced_shape(x.shape(), axis), out))
}

fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x.shape(), axis)?;
    let (outer, len, inner) = axis_blocks(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |l: usize| (o * len + l) * inner + j;
            let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (d[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    check_axis("concat", first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += p.shape()[axis];
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_blocks(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis("slice", x.shape(), axis)?;
    if start >= end || end > x.shape()[axis] {
        return Err(Error::Shape {
            op: "slice",
            lhs: x.shape().to_vec(),
            rhs: vec![axis, start, end],
        });
    }
    let (outer, len, inner) = axis_blocks(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

fn layer_norm_forward(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Forward> {
    let w = *x.shape().last().unwrap();
    if gain.shape() != [w] || bias.shape() != [w] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let rows = x.numel() / w;
    let mut out = vec![0.0; x.numel()];
    // aux layout: normalized inputs, then one inverse std per row
    let mut aux = vec![0.0; x.numel() + rows];
    for r in 0..rows {
        let row = &x.data()[r * w..(r + 1) * w];
        let mu = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..w {
            let xh = (row[j] - mu) * inv;
            aux[r * w + j] = xh;
            out[r * w + j] = xh * gain.data()[j] + bias.data()[j];
        }
        aux[x.numel() + r] = inv;
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), Some(aux)))
}

fn dropout_forward(x: &Tensor, rate: f64, node: usize, mode: Mode) -> Forward {
    match mode {
        Mode::Train { seed } if rate > 0.0 => {
            let stream = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
            (Tensor::from_parts(x.shape().to_vec(), out), Some(mask))
        }
        _ => (x.clone(), None),
    }
}

// ---------------------------------------------------------------------------
// backward

fn unary_grad(grads: &mut [Option<Tensor>], x: NodeId, g: &Tensor, xv: &Tensor, f: impl Fn(f64, f64) -> f64) {
    let data = g.data().iter().zip(xv.data()).map(|(&g, &x)| f(g, x)).collect();
    accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), data));
}

fn backward(op: &Op, node: usize, g: Tensor, values: &Values, grads: &mut [Option<Tensor>]) -> Result<()> {
    let get = |id: NodeId| values.get(id);
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (sa, sb) = (get(*a)?.shape().to_vec(), get(*b)?.shape().to_vec());
            let gb = fold_leading(&g, &sb);
            let gb = if matches!(op, Op::Sub(..)) { gb.map(|v| -v) } else { gb };
            accumulate(grads, *a, fold_leading(&g, &sa));
            accumulate(grads, *b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (get(*a)?, get(*b)?);
            let ga = binary("mul", &g, bv, |x, y| x * y)?;
            let gb = binary("mul", &g, av, |x, y| x * y)?;
            accumulate(grads, *a, fold_leading(&ga, av.shape()));
            accumulate(grads, *b, fold_leading(&gb, bv.shape()));
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
        Op::MatMul(a, b) => {
            let (av, bv) = (get(*a)?, get(*b)?);
            match matmul_kind(av.shape(), bv.shape())? {
                MatMulKind::Shared { rows, k, n } => {
                    let mut ga = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, rows, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
                MatMulKind::Batched { batch, m, k, n } => {
                    let mut ga = vec![0.0; batch * m * k];
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..];
                        gemm(m, n, k, gi, false, &bv.data()[i * k * n..], true, &mut ga[i * m * k..], 0.0);
                        gemm(k, m, n, &av.data()[i * m * k..], true, gi, false, &mut gb[i * k * n..], 0.0);
                    }
                    accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
            }
        }
        Op::Permute(x, axes) => {
            let xv = get(*x)?;
            let axes = resolve_perm(xv.shape(), axes)?;
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            accumulate(grads, *x, permute(&g, &inverse));
        }
        Op::Reshape(x, _) => {
            let shape = get(*x)?.shape().to_vec();
            accumulate(grads, *x, g.reshaped(&shape)?);
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            for &id in xs {
                let len = get(id)?.shape()[*axis];
                accumulate(grads, id, slice_forward(&g, *axis, start, start + len)?);
                start += len;
            }
        }
        Op::Slice { x, axis, start, end } => {
            let xv = get(*x)?;
            let (outer, len, inner) = axis_blocks(xv.shape(), *axis);
            let mut gx = vec![0.0; xv.numel()];
            let w = (end - start) * inner;
            for o in 0..outer {
                gx[(o * len + start) * inner..(o * len + end) * inner].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let xv = get(*x)?;
            let (outer, len, inner) = axis_blocks(xv.shape(), *axis);
            let factor = if matches!(op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            let mut gx = vec![0.0; xv.numel()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * factor;
                    }
                }
            }
            accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Broadcast(x, shape) => {
            let xv = get(*x)?;
            let src = broadcast_strides(xv.shape(), shape)?;
            let mut gx = vec![0.0; xv.numel()];
            scatter_add(g.data(), shape, &src, &mut gx);
            accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Exp(x) => {
            let out = values.get(NodeId(node))?;
            unary_grad(grads, *x, &g, out, |g, y| g * y);
        }
        Op::Log(x) => unary_grad(grads, *x, &g, get(*x)?, |g, x| g / x),
        Op::Sqrt(x) => {
            let out = values.get(NodeId(node))?;
            unary_grad(grads, *x, &g, out, |g, y| 0.5 * g / y);
        }
        Op::Square(x) => unary_grad(grads, *x, &g, get(*x)?, |g, x| 2.0 * g * x),
        Op::Softplus(x) => unary_grad(grads, *x, &g, get(*x)?, |g, x| g * sigmoid(x)),
        Op::Gelu(x) => unary_grad(grads, *x, &g, get(*x)?, |g, x| g * gelu_grad(x)),
        Op::Softmax(x, axis) => {
            let y = values.get(NodeId(node))?;
            let (outer, len, inner) = axis_blocks(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![0.0; y.numel()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + j;
                    let dot: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
        }
        Op::LayerNorm { x, gain, bias, .. } => {
            let xv = get(*x)?;
            let gv = get(*gain)?;
            let aux = values.aux[node].as_ref().ok_or(Error::NotEvaluated(node))?;
            let w = gv.numel();
            let rows = xv.numel() / w;
            let (xhat, inv) = aux.split_at(xv.numel());
            let mut gx = vec![0.0; xv.numel()];
            let mut gg = vec![0.0; w];
            let mut gbias = vec![0.0; w];
            let mut dxhat = vec![0.0; w];
            for r in 0..rows {
                let gr = &g.data()[r * w..(r + 1) * w];
                let xh = &xhat[r * w..(r + 1) * w];
                let (mut s1, mut s2) = (0.0, 0.0);
                for j in 0..w {
                    gg[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                    dxhat[j] = gr[j] * gv.data()[j];
                    s1 += dxhat[j];
                    s2 += dxhat[j] * xh[j];
                }
                let scale = inv[r] / w as f64;
                for j in 0..w {
                    gx[r * w + j] = scale * (w as f64 * dxhat[j] - s1 - xh[j] * s2);
                }
            }
            accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            accumulate(grads, *gain, Tensor::from_parts(vec![w], gg));
            accumulate(grads, *bias, Tensor::from_parts(vec![w], gbias));
        }
        Op::Dropout(x, _) => match &values.aux[node] {
            Some(mask) => {
                let data = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            None => accumulate(grads, *x, g),
        },
    }
    Ok(())
}
