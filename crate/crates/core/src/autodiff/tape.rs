use std::cell::RefCell;

use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Lower and upper bound applied to `exp` inputs.
pub const EXP_CLAMP: f64 = 60.0;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Silu(usize),
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Softmax(usize),
    LayerNorm { a: usize, rstd: Vec<f64> },
    L2Normalize { a: usize, rnorm: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros of `var`'s shape when it did not influence the loss.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

enum Broadcast {
    Same,
    /// rhs repeats over the leading dims of lhs
    Rhs,
    /// lhs repeats over the leading dims of rhs
    Lhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::Same))
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok((a.to_vec(), Broadcast::Rhs))
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok((b.to_vec(), Broadcast::Lhs))
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums `g` (of length n·len) down to `len` by folding repeated blocks.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks_exact(len) {
        for (o, x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

/// `c (+)= op(a) · op(b)` with `op(a)` m×k and `op(b)` k×n, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) layouts within those slices.
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

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// rhs is a single 2-D matrix shared over the batch
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let mismatch = || AutodiffError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let mut out_shape = a[..a.len() - 2].to_vec();
    out_shape.extend([m, n]);
    if b.len() == 2 {
        let batch = a[..a.len() - 2].iter().product();
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: true,
            out_shape,
        })
    } else if a.len() == b.len() && a[..a.len() - 2] == b[..b.len() - 2] {
        let batch = a[..a.len() - 2].iter().product();
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: false,
            out_shape,
        })
    } else {
        Err(mismatch())
    }
}

/// (outer, size, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn binary(&self, name: &'static str, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a].value, &nodes[b].value);
            let (shape, _) = broadcast(name, x.shape(), y.shape())?;
            let n: usize = shape.iter().product();
            let (xd, yd) = (x.data(), y.data());
            let (lx, ly) = (xd.len(), yd.len());
            let data = (0..n).map(|i| f(xd[i % lx], yd[i % ly])).collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(value, op, self.requires(&[a, b])))
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = self.with_value(a, |x| x.map(f));
        self.push(value, op, self.requires(&[a]))
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = self.shape_of(loss.id);
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        self.backward_with_seed(loss, Tensor::from_parts(shape, vec![1.0]))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    /// Used to chain hand-written adjoints (e.g. the rasterizer) into the tape.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if seed.shape() != out_shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward seed",
                lhs: out_shape.to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::from_parts(nodes[id].value.shape().to_vec(), delta));
        }
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let gd = g.data();
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (la, lb) = (val(*a).len(), val(*b).len());
            accumulate(grads, nodes, *a, reduce_to(gd, la));
            accumulate(grads, nodes, *b, reduce_to(gd, lb));
        }
        Op::Sub(a, b) => {
            let (la, lb) = (val(*a).len(), val(*b).len());
            accumulate(grads, nodes, *a, reduce_to(gd, la));
            let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
            accumulate(grads, nodes, *b, reduce_to(&neg, lb));
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let (la, lb) = (xa.len(), xb.len());
            if nodes[*a].requires_grad {
                let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * xb[i % lb]).collect();
                accumulate(grads, nodes, *a, reduce_to(&t, la));
            }
            if nodes[*b].requires_grad {
                let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g * xa[i % la]).collect();
                accumulate(grads, nodes, *b, reduce_to(&t, lb));
            }
        }
        Op::Div(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let (la, lb) = (xa.len(), xb.len());
            if nodes[*a].requires_grad {
                let t: Vec<f64> = gd.iter().enumerate().map(|(i, g)| g / xb[i % lb]).collect();
                accumulate(grads, nodes, *a, reduce_to(&t, la));
            }
            if nodes[*b].requires_grad {
                let t: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let d = xb[i % lb];
                        -g * xa[i % la] / (d * d)
                    })
                    .collect();
                accumulate(grads, nodes, *b, reduce_to(&t, lb));
            }
        }
        Op::Matmul(a, b) => {
            let dims =
                matmul_dims(nodes[*a].value.shape(), nodes[*b].value.shape()).expect("shapes validated in forward");
            let (xa, xb) = (val(*a), val(*b));
            let MatmulDims { batch, m, k, n, .. } = dims;
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; xa.len()];
                for bi in 0..batch {
                    let boff = if dims.shared_rhs { 0 } else { bi * k * n };
                    gemm(
                        m,
                        n,
                        k,
                        &gd[bi * m * n..(bi + 1) * m * n],
                        false,
                        &xb[boff..boff + k * n],
                        true,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        false,
                    );
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; xb.len()];
                if dims.shared_rhs {
                    gemm(k, batch * m, n, xa, true, gd, false, &mut gb, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &xa[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            false,
                        );
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, gd.iter().map(|g| g * c).collect());
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, gd.to_vec()),
        Op::Exp(a) => {
            let x = val(*a);
            let d = gd
                .iter()
                .zip(y)
                .zip(x)
                .map(|((g, y), x)| if x.abs() <= EXP_CLAMP { g * y } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Log(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, gd.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Sqrt(a) => {
            accumulate(grads, nodes, *a, gd.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
        }
        Op::Tanh(a) => {
            accumulate(
                grads,
                nodes,
                *a,
                gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            );
        }
        Op::Sigmoid(a) => {
            accumulate(
                grads,
                nodes,
                *a,
                gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            );
        }
        Op::Silu(a) => {
            let x = val(*a);
            let d = gd
                .iter()
                .zip(x)
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let shape = nodes[*a].value.shape();
            let n_in = val(*a).len();
            let is_mean = matches!(node.op, Op::Mean { .. });
            match axis {
                None => {
                    let scale = if is_mean { 1.0 / n_in as f64 } else { 1.0 };
                    accumulate(grads, nodes, *a, vec![gd[0] * scale; n_in]);
                }
                Some(ax) => {
                    let (outer, size, inner) = split_axis(shape, *ax);
                    let scale = if is_mean { 1.0 / size as f64 } else { 1.0 };
                    let mut d = vec![0.0; n_in];
                    for o in 0..outer {
                        for s in 0..size {
                            for i in 0..inner {
                                d[(o * size + s) * inner + i] = gd[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(grads, nodes, *a, d);
                }
            }
        }
        Op::Transpose(a) => {
            let shape = g.shape();
            accumulate(grads, nodes, *a, transpose_last(gd, shape));
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, gd.to_vec()),
        Op::Concat { inputs, axis } => {
            let out_shape = g.shape();
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let size = nodes[inp].value.shape()[*axis];
                if nodes[inp].requires_grad {
                    let mut d = Vec::with_capacity(outer * size * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + size * inner]);
                    }
                    accumulate(grads, nodes, inp, d);
                }
                offset += size;
            }
        }
        Op::Slice { a, axis, start } => {
            let in_shape = nodes[*a].value.shape();
            let (outer, size, inner) = split_axis(in_shape, *axis);
            let len = g.shape()[*axis];
            let mut d = vec![0.0; val(*a).len()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * size + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Softmax(a) => {
            let w = *g.shape().last().unwrap();
            let mut d = vec![0.0; gd.len()];
            for ((dr, gr), yr) in d.chunks_exact_mut(w).zip(gd.chunks_exact(w)).zip(y.chunks_exact(w)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::LayerNorm { a, rstd } => {
            let w = *g.shape().last().unwrap();
            let mut d = vec![0.0; gd.len()];
            for (r, ((dr, gr), yr)) in d
                .chunks_exact_mut(w)
                .zip(gd.chunks_exact(w))
                .zip(y.chunks_exact(w))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / w as f64;
                let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = rstd[r] * (gv - mg - yv * mgy);
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::L2Normalize { a, rnorm } => {
            let w = *g.shape().last().unwrap();
            let mut d = vec![0.0; gd.len()];
            for (r, ((dr, gr), yr)) in d
                .chunks_exact_mut(w)
                .zip(gd.chunks_exact(w))
                .zip(y.chunks_exact(w))
                .enumerate()
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = (gv - yv * dot) / rnorm[r];
                }
            }
            accumulate(grads, nodes, *a, d);
        }
    }
}

/// Swaps the last two axes of a row-major buffer with the given shape.
fn transpose_last(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = data.len() / (m * n);
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let src = &data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape
            .binary("add", self.id, other.id, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape
            .binary("sub", self.id, other.id, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape
            .binary("mul", self.id, other.id, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        self.tape
            .binary("div", self.id, other.id, Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// `[..., m, k] × [..., k, n]` with identical batch dims, or `[..., m, k] × [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let tape = self.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let dims = matmul_dims(a.shape(), b.shape())?;
            let MatmulDims { batch, m, k, n, .. } = dims;
            let mut out = vec![0.0; batch * m * n];
            if dims.shared_rhs {
                gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out, false);
            } else {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        false,
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
            Tensor::from_parts(dims.out_shape, out)
        };
        Ok(tape.push(
            value,
            Op::Matmul(self.id, other.id),
            tape.requires(&[self.id, other.id]),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddScalar(self.id), |x| x + c)
    }

    /// `exp` with its input clamped to ±[`EXP_CLAMP`]; zero gradient outside the range.
    pub fn exp(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Exp(self.id), |x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.check_positive("log")?;
        Ok(self.tape.unary(self.id, Op::Log(self.id), f64::ln))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.check_positive("sqrt")?;
        Ok(self.tape.unary(self.id, Op::Sqrt(self.id), f64::sqrt))
    }

    fn check_positive(&self, op: &'static str) -> Result<()> {
        self.tape
            .with_value(self.id, |t| match t.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                Some(&value) => Err(AutodiffError::Domain { op, value }),
                None => Ok(()),
            })
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    /// `x · sigmoid(x)`
    pub fn silu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Silu(self.id), |x| x * sigmoid(x))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t> {
        let s: f64 = self.tape.with_value(self.id, |t| t.data().iter().sum());
        let requires = self.requires_grad();
        self.tape
            .push(Tensor::scalar(s), Op::Sum { a: self.id, axis: None }, requires)
    }

    pub fn mean_all(self) -> Var<'t> {
        let m: f64 = self
            .tape
            .with_value(self.id, |t| t.data().iter().sum::<f64>() / t.len() as f64);
        let requires = self.requires_grad();
        self.tape
            .push(Tensor::scalar(m), Op::Mean { a: self.id, axis: None }, requires)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let scale = if mean { 1.0 / size as f64 } else { 1.0 };
        let data = self.tape.with_value(self.id, |t| {
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for s in 0..size {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * size + s) * inner + i];
                    }
                }
            }
            out.iter_mut().for_each(|x| *x *= scale);
            out
        });
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let op = if mean {
            Op::Mean {
                a: self.id,
                axis: Some(axis),
            }
        } else {
            Op::Sum {
                a: self.id,
                axis: Some(axis),
            }
        };
        let requires = self.requires_grad();
        Ok(self.tape.push(Tensor::from_parts(out_shape, data), op, requires))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(AutodiffError::Axis { axis: 1, rank: r });
        }
        let data = self.tape.with_value(self.id, |t| transpose_last(t.data(), &shape));
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let requires = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_parts(out_shape, data), Op::Transpose(self.id), requires))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.with_value(self.id, |t| t.reshaped(shape))?;
        let requires = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), requires))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(AutodiffError::Slice {
                start,
                end,
                size: shape[axis],
            });
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let len = end - start;
        let data = self.tape.with_value(self.id, |t| {
            let d = t.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * size + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        let requires = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            requires,
        ))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&w) = shape.last() else {
            return Err(AutodiffError::Axis { axis: 0, rank: 0 });
        };
        let data = self.tape.with_value(self.id, |t| {
            let mut out = t.data().to_vec();
            for row in out.chunks_exact_mut(w) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            out
        });
        let requires = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, data), Op::Softmax(self.id), requires))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&w) = shape.last() else {
            return Err(AutodiffError::Axis { axis: 0, rank: 0 });
        };
        let (data, rstd) = self.tape.with_value(self.id, |t| {
            let mut out = t.data().to_vec();
            let mut rstd = Vec::with_capacity(out.len() / w);
            for row in out.chunks_exact_mut(w) {
                let mean = row.iter().sum::<f64>() / w as f64;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w as f64;
                let r = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * r);
                rstd.push(r);
            }
            (out, rstd)
        });
        let requires = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm { a: self.id, rstd },
            requires,
        ))
    }

    /// Divides each last-axis row by `sqrt(|row|² + eps)`.
    pub fn l2_normalize(self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&w) = shape.last() else {
            return Err(AutodiffError::Axis { axis: 0, rank: 0 });
        };
        let (data, rnorm) = self.tape.with_value(self.id, |t| {
            let mut out = t.data().to_vec();
            let mut rnorm = Vec::with_capacity(out.len() / w);
            for row in out.chunks_exact_mut(w) {
                let r = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x /= r);
                rnorm.push(r);
            }
            (out, rnorm)
        });
        let requires = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::L2Normalize { a: self.id, rnorm },
            requires,
        ))
    }
}

/// Concatenates along `axis`; all other dims must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = vars.first().ok_or(AutodiffError::EmptyConcat)?;
    let tape = first.tape;
    let base = first.shape();
    if axis >= base.len() {
        return Err(AutodiffError::Axis { axis, rank: base.len() });
    }
    let mut total = 0;
    for v in vars {
        v.check_same_tape(first);
        let s = v.shape();
        let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s,
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let data = {
        let nodes = tape.nodes.borrow();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in vars {
                let t = &nodes[v.id].value;
                let size = t.shape()[axis];
                let src = o * size * inner;
                out.extend_from_slice(&t.data()[src..src + size * inner]);
            }
        }
        out
    };
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    let requires = tape.requires(&ids);
    Ok(tape.push(
        Tensor::from_parts(out_shape, data),
        Op::Concat { inputs: ids, axis },
        requires,
    ))
}
