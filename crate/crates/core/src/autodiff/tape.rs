use std::sync::atomic::{AtomicU32, Ordering};

use crate::scalar::Scalar;

use super::conv::{conv2d_backward, conv2d_forward_raw, ConvGeometry};
use super::tensor::{numel, Tensor};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// The primitive set exposed through [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Mul,
    Matmul,
    ConcatLastAxis,
    Sigmoid,
    Tanh,
    ReluClipped,
    SoftmaxRows,
    Log,
    Slice { axis: usize, start: usize, len: usize },
}

/// How the smaller operand of an elementwise binary op repeats.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// Right operand repeats over leading axes of the left.
    Right,
    /// Left operand repeats over leading axes of the right.
    Left,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Concat { axis: usize, inputs: Vec<Var> },
    Slice { input: Var, axis: usize, start: usize },
    Sigmoid(Var),
    Tanh(Var),
    ReluClipped(Var, S),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Log(Var),
    Sum(Var),
    Scale(Var, S),
    Reshape(Var),
    Transpose { input: Var, rows: usize, cols: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    NormalizeColumns { input: Var, inv_std: Vec<S> },
    /// Scalar-valued function whose input gradient was computed in the forward pass.
    ScalarFn { input: Var, dinput: Vec<S> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Persistent gradient; only leaves keep one between backward calls.
    grad: Option<Vec<S>>,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and a backward pass is a single reverse sweep.
#[derive(Debug)]
pub struct Tape<S> {
    id: u32,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn ensure_finite<S: Scalar>(op: &'static str, v: &[S]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    if b.len() <= a.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Bcast::Right));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Bcast::Left));
    }
    Err(AutodiffError::ShapeMismatch {
        op,
        shapes: vec![a.to_vec(), b.to_vec()],
    })
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]`.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product over four interleaved partial sums, which lets the loop
/// vectorize.
fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf))
            .count()
    }

    fn check(&self, v: Var) -> Result<&Node<S>> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(&self.nodes[v.index()])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let idx = self.nodes.len() as u32;
        // Without a differentiable input the node is a plain constant.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].requires_grad)
    }

    /// Records a tensor; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<Var> {
        ensure_finite("leaf", t.values())?;
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Ok(Var { tape: self.id, idx })
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<S>) -> Result<Var> {
        let v = self.leaf(t)?;
        self.nodes[v.index()].requires_grad = true;
        Ok(v)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<S>) -> Result<Var> {
        let v = self.leaf(t)?;
        self.nodes[v.index()].requires_grad = false;
        Ok(v)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: values.len(),
            });
        }
        ensure_finite("constant", &values)?;
        Ok(self.push(shape, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.index()].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.index()];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    /// Gradient accumulated into a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.index()].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Dispatches a named primitive.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op: format!("{kind:?}"),
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            Primitive::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::ConcatLastAxis => self.concat_last(inputs),
            Primitive::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            Primitive::ReluClipped => {
                arity(1)?;
                self.relu_clipped(inputs[0])
            }
            Primitive::SoftmaxRows => {
                arity(1)?;
                self.softmax_rows(inputs[0])
            }
            Primitive::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            Primitive::Slice { axis, start, len } => {
                arity(1)?;
                self.slice(inputs[0], axis, start, len)
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        mk: impl FnOnce(Var, Var, Bcast) -> Op<S>,
    ) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        let (shape, bc) = broadcast(name, &na.shape, &nb.shape)?;
        let (va, vb) = (&na.value, &nb.value);
        let out: Vec<S> = match bc {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Right => {
                let p = vb.len();
                va.iter().enumerate().map(|(i, &x)| f(x, vb[i % p])).collect()
            }
            Bcast::Left => {
                let p = va.len();
                vb.iter().enumerate().map(|(i, &y)| f(va[i % p], y)).collect()
            }
        };
        ensure_finite(name, &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, mk(a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, _| Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.check(a)?, self.check(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![na.shape.clone(), nb.shape.clone()],
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_acc(&na.value, &nb.value, &mut out, m, k, n);
        ensure_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(AutodiffError::Arity {
                op: "concat".into(),
                expected: 1,
                got: 0,
            });
        }
        let shapes: Vec<Vec<usize>> = inputs
            .iter()
            .map(|&v| self.check(v).map(|n| n.shape.clone()))
            .collect::<Result<_>>()?;
        let rank = shapes[0].len();
        let bad = axis >= rank
            || shapes.iter().any(|s| {
                s.len() != rank
                    || s.iter()
                        .zip(&shapes[0])
                        .enumerate()
                        .any(|(d, (x, y))| d != axis && x != y)
            });
        if bad {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                shapes,
            });
        }
        let (outer, _, inner) = split_axis(&shapes[0], axis);
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, s) in inputs.iter().zip(&shapes) {
                let w = s[axis] * inner;
                out.extend_from_slice(&self.nodes[v.index()].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = shapes[0].clone();
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let rank = match inputs.first() {
            Some(&v) => self.check(v)?.shape.len(),
            None => 0,
        };
        self.concat(rank.saturating_sub(1), inputs)
    }

    /// Stacks `[1, d]` rows (or concatenates `[n, d]` blocks) along the first axis.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.concat(0, rows)
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let node = self.check(input)?;
        if axis >= node.shape.len() || len == 0 || start + len > node.shape[axis] {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                shapes: vec![node.shape.clone(), vec![axis, start, len]],
            });
        }
        let (outer, dim, inner) = split_axis(&node.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&node.value[base..base + len * inner]);
        }
        let mut shape = node.shape.clone();
        shape[axis] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(shape, out, Op::Slice { input, axis, start }, rg))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let node = self.check(x)?;
        let out: Vec<S> = node.value.iter().map(|&v| f(v)).collect();
        ensure_finite(name, &out)?;
        let shape = node.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    /// `min(max(x, 0), 20)`.
    pub fn relu_clipped(&mut self, x: Var) -> Result<Var> {
        let ceil = S::lit(RELU_CLIP);
        self.unary("relu_clipped", x, |v| v.max(S::zero()).min(ceil), Op::ReluClipped(x, ceil))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    fn rows_of(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let node = self.check(x)?;
        let cols = match node.shape.last() {
            Some(&c) => c,
            None => {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    shapes: vec![node.shape.clone()],
                })
            }
        };
        Ok((node.value.len() / cols, cols))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_of(x, "softmax_rows")?;
        let node = &self.nodes[x.index()];
        let mut out = vec![S::zero(); node.value.len()];
        for r in 0..rows {
            let src = &node.value[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let max = src.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        ensure_finite("softmax_rows", &out)?;
        let shape = node.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_of(x, "log_softmax_rows")?;
        let node = &self.nodes[x.index()];
        let mut out = vec![S::zero(); node.value.len()];
        for r in 0..rows {
            let src = &node.value[r * cols..(r + 1) * cols];
            let lse = crate::scalar::log_sum_exp(src);
            for (d, &s) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        ensure_finite("log_softmax_rows", &out)?;
        let shape = node.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::LogSoftmaxRows(x), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let node = self.check(x)?;
        let s: S = node.value.iter().copied().sum();
        ensure_finite("sum", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![], vec![s], Op::Sum(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let node = self.check(x)?;
        if numel(&shape) != node.value.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![node.shape.clone(), shape],
            });
        }
        let value = node.value.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let node = self.check(x)?;
        if node.shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                shapes: vec![node.shape.clone()],
            });
        }
        let (rows, cols) = (node.shape[0], node.shape[1]);
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = node.value[r * cols + c];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { input: x, rows, cols }, rg))
    }

    /// Embedding lookup: rows `ids` of a `[vocab, dim]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let node = self.check(table)?;
        if node.shape.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= node.shape[0]) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                shapes: vec![node.shape.clone(), vec![ids.len()]],
            });
        }
        let d = node.shape[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&node.value[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 2-D convolution of `[channels, freq, time]` with `[out, channels, kf, kt]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (ni, nw, nb) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let (shape, out) = conv2d_forward_raw(
            &ni.shape, &ni.value, &nw.shape, &nw.value, &nb.shape, &nb.value, geom,
        )?;
        ensure_finite("conv2d", &out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Standardizes each column of a `[rows, cols]` tensor with its own
    /// batch mean and (biased) variance plus `eps`.
    pub fn normalize_columns(&mut self, x: Var, eps: S) -> Result<(Var, Vec<S>, Vec<S>)> {
        let node = self.check(x)?;
        if node.shape.len() != 2 || node.shape[0] < 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "normalize_columns",
                shapes: vec![node.shape.clone()],
            });
        }
        let (rows, cols) = (node.shape[0], node.shape[1]);
        let nf = S::from_usize(rows).unwrap();
        let mut mean = vec![S::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += node.value[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![S::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = node.value[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (node.value[r * cols + c] - mean[c]) * inv_std[c];
            }
        }
        ensure_finite("normalize_columns", &out)?;
        let shape = node.shape.clone();
        let rg = self.rg(&[x]);
        let v = self.push(shape, out, Op::NormalizeColumns { input: x, inv_std }, rg);
        Ok((v, mean, var))
    }

    /// Records a scalar `value` of `input` whose gradient `dinput` the caller
    /// already computed (loss heads such as CTC and cross-entropy).
    pub fn scalar_fn(&mut self, input: Var, value: S, dinput: Vec<S>) -> Result<Var> {
        let node = self.check(input)?;
        if dinput.len() != node.value.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scalar_fn",
                shapes: vec![node.shape.clone(), vec![dinput.len()]],
            });
        }
        ensure_finite("scalar_fn", &[value])?;
        ensure_finite("scalar_fn", &dinput)?;
        let rg = self.rg(&[input]);
        Ok(self.push(vec![], vec![value], Op::ScalarFn { input, dinput }, rg))
    }

    /// Sum of binary cross-entropies between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[S]) -> Result<Var> {
        let node = self.check(logits)?;
        if node.value.len() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                shapes: vec![node.shape.clone(), vec![targets.len()]],
            });
        }
        let mut loss = S::zero();
        let mut grad = Vec::with_capacity(targets.len());
        for (&x, &t) in node.value.iter().zip(targets) {
            loss += x.max(S::zero()) - x * t + (-x.abs()).exp().ln_1p();
            grad.push(sigmoid(x) - t);
        }
        self.scalar_fn(logits, loss, grad)
    }

    /// Negative log-likelihood of `targets[r]` under log-prob row `r`, summed.
    pub fn nll_rows(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rows_of(log_probs, "nll_rows")?;
        if rows != targets.len() || targets.iter().any(|&t| t >= cols) {
            return Err(AutodiffError::ShapeMismatch {
                op: "nll_rows",
                shapes: vec![self.nodes[log_probs.index()].shape.clone(), vec![targets.len()]],
            });
        }
        let node = &self.nodes[log_probs.index()];
        let mut loss = S::zero();
        let mut grad = vec![S::zero(); node.value.len()];
        for (r, &t) in targets.iter().enumerate() {
            loss -= node.value[r * cols + t];
            grad[r * cols + t] = -S::one();
        }
        self.scalar_fn(log_probs, loss, grad)
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(AutodiffError::LossNotScalar {
                shape: node.shape.clone(),
            });
        }
        if !node.requires_grad {
            return Err(AutodiffError::LossNotReachable);
        }
        let end = loss.index() + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; end];
        grads[loss.index()] = Some(vec![S::one()]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for n in &self.nodes[..end] {
            if let Some(g) = &n.grad {
                ensure_finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.index()].value.len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !self.wants(v) {
                return;
            }
            let slot = grads[v.index()].get_or_insert_with(|| vec![S::zero(); len_of(v)]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -S::one()
                } else {
                    S::one()
                };
                for (v, s, small) in [
                    (*a, S::one(), matches!(bc, Bcast::Left)),
                    (*b, sign, matches!(bc, Bcast::Right)),
                ] {
                    acc(v, &mut |dst: &mut [S]| {
                        if small {
                            let p = dst.len();
                            for (k, &gv) in g.iter().enumerate() {
                                dst[k % p] += s * gv;
                            }
                        } else {
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += s * gv;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                let (pa, pb) = (va.len(), vb.len());
                acc(*a, &mut |dst: &mut [S]| {
                    for (k, &gv) in g.iter().enumerate() {
                        dst[k % pa] += gv * vb[k % pb];
                    }
                });
                acc(*b, &mut |dst: &mut [S]| {
                    for (k, &gv) in g.iter().enumerate() {
                        dst[k % pb] += gv * va[k % pa];
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (va, vb) = (&self.nodes[a.index()].value, &self.nodes[b.index()].value);
                // dA = dC · Bᵀ
                acc(*a, &mut |dst: &mut [S]| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            dst[i * k + p] += dot(g_row, &vb[p * n..(p + 1) * n]);
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |dst: &mut [S]| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            for (d, &gv) in dst[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Concat { axis, inputs } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let dim = self.nodes[v.index()].shape[*axis];
                    let w = dim * inner;
                    acc(v, &mut |dst: &mut [S]| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + w];
                            for (d, &x) in dst[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = &self.nodes[input.index()].shape;
                let (outer, dim, inner) = split_axis(in_shape, *axis);
                let w = node.shape[*axis] * inner;
                acc(*input, &mut |dst: &mut [S]| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        for (d, &x) in dst[base..base + w].iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |dst: &mut [S]| {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (S::one() - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(*x, &mut |dst: &mut [S]| {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += gv * (S::one() - yv * yv);
                    }
                });
            }
            Op::ReluClipped(x, ceil) => {
                let xv = &self.nodes[x.index()].value;
                acc(*x, &mut |dst: &mut [S]| {
                    for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() && v < *ceil {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |dst: &mut [S]| {
                    for r in 0..y.len() / cols {
                        let rg = r * cols..(r + 1) * cols;
                        let dot: S = g[rg.clone()].iter().zip(&y[rg.clone()]).map(|(&a, &b)| a * b).sum();
                        for c in rg {
                            dst[c] += y[c] * (g[c] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |dst: &mut [S]| {
                    for r in 0..y.len() / cols {
                        let rg = r * cols..(r + 1) * cols;
                        let gs: S = g[rg.clone()].iter().copied().sum();
                        for c in rg {
                            dst[c] += g[c] - y[c].exp() * gs;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = &self.nodes[x.index()].value;
                acc(*x, &mut |dst: &mut [S]| {
                    for ((d, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                        *d += gv / v;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                acc(*x, &mut |dst: &mut [S]| dst.iter_mut().for_each(|d| *d += gv));
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |dst: &mut [S]| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * *f;
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |dst: &mut [S]| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Transpose { input, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*input, &mut |dst: &mut [S]| {
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |dst: &mut [S]| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, &gv) in dst[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let ni = &self.nodes[input.index()];
                let nw = &self.nodes[weight.index()];
                let (dx, dw, db) = conv2d_backward(
                    &ni.shape,
                    &ni.value,
                    &nw.shape,
                    &nw.value,
                    &node.shape,
                    g,
                    *geom,
                    self.wants(*input),
                );
                if let Some(dx) = dx {
                    acc(*input, &mut |dst: &mut [S]| {
                        dst.iter_mut().zip(&dx).for_each(|(d, &x)| *d += x)
                    });
                }
                acc(*weight, &mut |dst: &mut [S]| {
                    dst.iter_mut().zip(&dw).for_each(|(d, &x)| *d += x)
                });
                acc(*bias, &mut |dst: &mut [S]| {
                    dst.iter_mut().zip(&db).for_each(|(d, &x)| *d += x)
                });
            }
            Op::NormalizeColumns { input, inv_std } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let nf = S::from_usize(rows).unwrap();
                let y = &node.value;
                let mut gsum = vec![S::zero(); cols];
                let mut gy = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gsum[c] += g[r * cols + c];
                        gy[c] += g[r * cols + c] * y[r * cols + c];
                    }
                }
                acc(*input, &mut |dst: &mut [S]| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            dst[k] += inv_std[c] / nf * (nf * g[k] - gsum[c] - y[k] * gy[c]);
                        }
                    }
                });
            }
            Op::ScalarFn { input, dinput } => {
                let gv = g[0];
                acc(*input, &mut |dst: &mut [S]| {
                    for (d, &x) in dst.iter_mut().zip(dinput) {
                        *d += gv * x;
                    }
                });
            }
        }
    }
}

/// Upper clip of `relu_clipped`.
pub const RELU_CLIP: f64 = 20.0;
