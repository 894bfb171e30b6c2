//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value, the handles of its inputs, and (when any input is tracked) a
//! [`Backward`] rule. [`Graph::backward`] sweeps the tape once in reverse
//! recording order and accumulates gradients into tracked leaves.
//!
//! One graph serves one training step. Leaf gradients accumulate across
//! repeated `backward` calls until [`Graph::zero_grad`].

use crate::error::{shape_err, Error, Result};
use crate::tensor::{strides, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Gradient of the root with respect to `output`.
    pub grad: &'a [f64],
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: the gradient with respect to that input,
    /// or `None` when `needs` is false for it.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf. It is tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.push(Node {
            value: t,
            inputs: Vec::new(),
            op: None,
            tracked,
        })
    }

    /// Adds an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// Adds a tracked leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(true))
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an operation. The backward rule is kept only if
    /// at least one input is tracked.
    pub fn record<B: Backward + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = value.with_requires_grad(tracked);
        self.push(Node {
            value,
            inputs: inputs.to_vec(),
            op: tracked.then(|| Box::new(op) as Box<dyn Backward>),
            tracked,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn inputs_of(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Accumulates `d root / d leaf` into every tracked leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let numel = self.nodes[root.0].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward root must hold exactly one element, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                // Tracked leaf: deposit below, after the borrow ends.
                grads[i] = Some(g);
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].tracked).collect(),
            };
            let input_grads = op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input.0].tracked {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[input.0].value.numel(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].op.is_none() {
                    self.nodes[i].value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with one-sided broadcasting

/// For each flat index of `full`, the flat index of `small` it reads from.
/// `small` must have the same rank with every extent equal or 1.
fn broadcast_map(full: &[usize], small: &[usize]) -> Result<Option<Vec<usize>>> {
    if full == small {
        return Ok(None);
    }
    if full.len() != small.len() || full.iter().zip(small).any(|(&f, &s)| s != f && s != 1) {
        return Err(shape_err!("shape {small:?} does not broadcast to {full:?}"));
    }
    let small_strides = strides(small);
    let eff: Vec<usize> = small
        .iter()
        .zip(&small_strides)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    let n: usize = full.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; full.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..full.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < full[ax] {
                break;
            }
            off -= eff[ax] * full[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(map))
}

fn reduce_to(g: &[f64], map: &Option<Vec<usize>>, small_len: usize) -> Vec<f64> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; small_len];
            for (gi, &j) in g.iter().zip(map) {
                out[j] += gi;
            }
            out
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Arith {
    Add,
    Sub,
    Mul,
}

struct ArithOp {
    kind: Arith,
    map: Option<Vec<usize>>,
}

impl Backward for ArithOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Arith::Add => "add",
            Arith::Sub => "sub",
            Arith::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let g = ctx.grad;
        let bval = |i: usize| match &self.map {
            None => b.data()[i],
            Some(m) => b.data()[m[i]],
        };
        let ga = ctx.needs[0].then(|| match self.kind {
            Arith::Add | Arith::Sub => g.to_vec(),
            Arith::Mul => g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect(),
        });
        let gb = ctx.needs[1].then(|| {
            let full: Vec<f64> = match self.kind {
                Arith::Add => g.to_vec(),
                Arith::Sub => g.iter().map(|v| -v).collect(),
                Arith::Mul => g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect(),
            };
            reduce_to(&full, &self.map, b.numel())
        });
        vec![ga, gb]
    }
}

impl Graph {
    fn arith(&mut self, kind: Arith, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Arith::Add => x + y,
            Arith::Sub => x - y,
            Arith::Mul => x * y,
        };
        let data: Vec<f64> = match &map {
            None => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.data().iter().zip(m).map(|(&x, &j)| f(x, bv.data()[j])).collect(),
        };
        let out = Tensor::from_vec(av.shape(), data)?;
        Ok(self.record(out, &[a, b], ArithOp { kind, map }))
    }

    /// `a + b`, with `b` broadcast to `a` along extent-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(Arith::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(Arith::Sub, a, b)
    }

    /// Elementwise product, with `b` broadcast to `a` along extent-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.arith(Arith::Mul, a, b)
    }
}

// ---------------------------------------------------------------------------
// Scaling, unary activations, reshape

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.iter().map(|g| g * self.0).collect())]
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(ctx.inputs[0].data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect()
        })]
    }
}

struct SigmoidOp;

impl Backward for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| {
            ctx.grad
                .iter()
                .zip(ctx.output.data())
                .map(|(g, &s)| g * s * (1.0 - s))
                .collect()
        })]
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| ctx.grad.to_vec())]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.record(out, &[a], ScaleOp(factor))
    }

    /// `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.record(out, &[a], ReluOp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.record(out, &[a], SigmoidOp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).detached().reshaped(shape)?;
        Ok(self.record(out, &[a], ReshapeOp))
    }
}

// ---------------------------------------------------------------------------
// Matrix product and transpose

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        // dA = dC · Bᵀ ; dB = Aᵀ · dC
        let da = ctx.needs[0].then(|| matmul_raw(ctx.grad, &transpose_raw(b, k, n), m, n, k));
        let db = ctx.needs[1].then(|| matmul_raw(&transpose_raw(a, m, k), ctx.grad, k, m, n));
        vec![da, db]
    }
}

struct TransposeOp {
    rows: usize,
    cols: usize,
}

impl Backward for TransposeOp {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| transpose_raw(ctx.grad, self.cols, self.rows))]
    }
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(shape_err!("matmul needs rank-2 operands, got {sa:?} and {sb:?}"));
        };
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {sa:?} · {sb:?}"));
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], c)?;
        Ok(self.record(out, &[a, b], MatmulOp { m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[rows, cols] = self.shape(a) else {
            return Err(shape_err!("transpose needs rank 2, got {:?}", self.shape(a)));
        };
        let t = transpose_raw(self.value(a).data(), rows, cols);
        let out = Tensor::from_vec(&[cols, rows], t)?;
        Ok(self.record(out, &[a], TransposeOp { rows, cols }))
    }
}

// ---------------------------------------------------------------------------
// Reductions

struct ReduceOp {
    /// Output flat index for every input element.
    map: Vec<usize>,
    scale: f64,
    mean: bool,
}

impl Backward for ReduceOp {
    fn name(&self) -> &'static str {
        if self.mean {
            "reduce_mean"
        } else {
            "reduce_sum"
        }
    }
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        vec![ctx.needs[0].then(|| self.map.iter().map(|&j| ctx.grad[j] * self.scale).collect())]
    }
}

impl Graph {
    fn reduce(&mut self, a: Var, axes: &[usize], keep_dims: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut reduced = vec![false; shape.len()];
        for &ax in axes {
            if ax >= shape.len() {
                return Err(shape_err!("axis {ax} out of range for shape {shape:?}"));
            }
            if reduced[ax] {
                return Err(shape_err!("axis {ax} listed twice"));
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        let map = broadcast_map(&shape, &kept)?.unwrap_or_else(|| (0..shape.iter().product()).collect());
        let out_len: usize = kept.iter().product();
        let mut acc = vec![0.0; out_len];
        for (x, &j) in self.value(a).data().iter().zip(&map) {
            acc[j] += x;
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            acc.iter_mut().for_each(|v| *v /= count as f64);
        }
        let out_shape: Vec<usize> = if keep_dims {
            kept
        } else {
            let s: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&e, _)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let out = Tensor::from_vec(&out_shape, acc)?;
        Ok(self.record(out, &[a], ReduceOp { map, scale, mean }))
    }

    /// Sum over `axes`. Removed axes are kept as extent 1 when `keep_dims`;
    /// reducing every axis without `keep_dims` yields shape `[1]`.
    pub fn reduce_sum(&mut self, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(a, axes, keep_dims, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.reduce(a, axes, keep_dims, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce_sum(a, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce_mean(a, &axes, false).expect("valid axes")
    }
}
