use crate::error::{AutodiffError, Result};
use crate::kernels::{for_each_broadcast, gemm, order_free_sum};
use crate::tensor::{axis_split, Tensor};

/// Norm floor used by [`Tape::l2_normalize`].
pub const SAFE_NORM_FLOOR: f64 = 1e-8;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Affine {
        x: usize,
        w: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BroadcastAdd(usize, usize),
    Transpose {
        input: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: usize,
        indices: Vec<usize>,
    },
    Sum(usize),
    SumAxis {
        input: usize,
        axis: usize,
    },
    Mean(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    LogSoftmax {
        input: usize,
        axis: usize,
    },
    LogSumExp {
        input: usize,
        axis: usize,
    },
    L2Normalize {
        input: usize,
        axis: usize,
        norms: Vec<f64>,
    },
    BroadcastTo(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// backward is a single reverse sweep. Forward outputs are kept on the tape
/// and reused by the backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.grads.get(var.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients flow from `v` back to some leaf.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(out, make(a.0, b.0), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl FnOnce(usize) -> Op) -> Result<Var> {
        let out = self.node(a)?.value.map(f);
        let g = self.grad_of(&[a.0]);
        Ok(self.push(out, make(a.0), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            g,
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.node(a)?.value;
        if ta.rank() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected rank 2, got shape {:?}", ta.shape()),
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let src = ta.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(vec![cols, rows], out),
            Op::Transpose {
                input: a.0,
                rows,
                cols,
            },
            g,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a)?.value.clone().reshape(shape)?;
        let g = self.grad_of(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), g))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => &self.node(v)?.value,
            None => {
                return Err(AutodiffError::InvalidArgument {
                    op: "concat",
                    reason: "no inputs".into(),
                })
            }
        };
        if axis >= first.rank() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.rank(),
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &v in inputs {
            let t = &self.node(v)?.value;
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, total, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in inputs {
            let t = &self.nodes[v.0].value;
            let ext = t.shape()[axis];
            let run = ext * inner;
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + run].copy_from_slice(&t.data()[o * run..(o + 1) * run]);
            }
            offset += ext;
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let g = self.grad_of(&ids);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: ids, axis },
            g,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = &self.node(a)?.value;
        if axis >= ta.rank() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: ta.rank(),
            });
        }
        if start >= end || end > ta.shape()[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                reason: format!(
                    "range {start}..{end} invalid for extent {}",
                    ta.shape()[axis]
                ),
            });
        }
        let (outer, ext, inner) = axis_split(ta.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
            g,
        ))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = &self.node(a)?.value;
        if ta.rank() == 0 || indices.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                reason: "needs rank >= 1 and at least one index".into(),
            });
        }
        let rows = ta.shape()[0];
        let width = ta.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * width);
        for &r in indices {
            if r >= rows {
                return Err(AutodiffError::InvalidArgument {
                    op: "gather_rows",
                    reason: format!("row {r} out of range for {rows} rows"),
                });
            }
            out.extend_from_slice(&ta.data()[r * width..(r + 1) * width]);
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = indices.len();
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                input: a.0,
                indices: indices.to_vec(),
            },
            g,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        let g = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), g))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let g = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.0), g))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.node(a)?.value;
        if axis >= ta.rank() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "sum_axis",
                axis,
                rank: ta.rank(),
            });
        }
        let (outer, ext, inner) = axis_split(ta.shape(), axis);
        let src = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..ext {
                let base = (o * ext + k) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let g = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { input: a.0, axis }, g))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<&Tensor> {
        let t = &self.node(a)?.value;
        if axis >= t.rank() {
            return Err(AutodiffError::AxisOutOfRange {
                op,
                axis,
                rank: t.rank(),
            });
        }
        Ok(t)
    }

    /// Softmax along `axis`. The normalizer is summed in sorted order, so the
    /// result is exactly equivariant under permutations along the axis.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.check_axis("softmax", a, axis)?;
        let mut out = vec![0.0; t.numel()];
        lanes(t, axis, |lane, vals| {
            let (max, sum, exps) = stable_exps(vals);
            let _ = max;
            for (k, e) in exps.iter().enumerate() {
                out[lane(k)] = e / sum;
            }
        });
        let shape = t.shape().to_vec();
        let g = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input: a.0, axis }, g))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.check_axis("log_softmax", a, axis)?;
        let mut out = vec![0.0; t.numel()];
        lanes(t, axis, |lane, vals| {
            let (max, sum, _) = stable_exps(vals);
            let lse = max + sum.ln();
            for (k, v) in vals.iter().enumerate() {
                out[lane(k)] = v - lse;
            }
        });
        let shape = t.shape().to_vec();
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { input: a.0, axis },
            g,
        ))
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.check_axis("logsumexp", a, axis)?;
        let (outer, _, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut lane_no = 0;
        lanes(t, axis, |_, vals| {
            let (max, sum, _) = stable_exps(vals);
            out[lane_no] = max + sum.ln();
            lane_no += 1;
        });
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSumExp { input: a.0, axis },
            g,
        ))
    }

    /// `v / max(|v|, SAFE_NORM_FLOOR)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.check_axis("l2_normalize", a, axis)?;
        let mut out = vec![0.0; t.numel()];
        let mut norms = Vec::new();
        lanes(t, axis, |lane, vals| {
            let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(SAFE_NORM_FLOOR);
            for (k, v) in vals.iter().enumerate() {
                out[lane(k)] = v / denom;
            }
            norms.push(norm);
        });
        let shape = t.shape().to_vec();
        let g = self.grad_of(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::L2Normalize {
                input: a.0,
                axis,
                norms,
            },
            g,
        ))
    }

    /// Explicit broadcast. The source shape is right-aligned against `shape`
    /// and each source extent must equal the target extent or be 1.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        let src = t.shape();
        if !broadcastable(src, shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let data = t.data();
        for_each_broadcast(src, shape, |ti, si| out[ti] = data[si]);
        let g = self.grad_of(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(a.0), g))
    }

    /// `x @ w + b` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(mismatch("affine", tx, tw));
        }
        let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.shape() != [n] {
            return Err(mismatch("affine", tw, tb));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, 1.0);
        let g = self.grad_of(&[x.0, w.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
                m,
                k,
                n,
            },
            g,
        ))
    }

    /// `broadcast_to(a, shape) + broadcast_to(b, shape)` without
    /// materializing either broadcast.
    pub fn broadcast_add(&mut self, a: Var, b: Var, shape: &[usize]) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        for t in [ta, tb] {
            if !broadcastable(t.shape(), shape) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "broadcast_add",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(ta.shape(), shape, |ti, si| out[ti] = da[si]);
        for_each_broadcast(tb.shape(), shape, |ti, si| out[ti] += db[si]);
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastAdd(a.0, b.0), g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |j: usize| nodes[j].value.data();
        // Accumulates into the gradient slot of `j` if it participates.
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].needs_grad {
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]);
                f(slot);
            }
        };
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((d, g), x) in s.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((d, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *d += g / y;
                    }
                });
                acc(*b, &mut |s| {
                    for (((d, g), x), y) in s.iter_mut().zip(g).zip(va).zip(vb) {
                        *d -= g * x / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                // dA = G @ B^T, dB = A^T @ G
                acc(*a, &mut |s| gemm(m, n, k, g, false, vb, true, s, 1.0));
                acc(*b, &mut |s| gemm(k, m, n, va, true, g, false, s, 1.0));
            }
            Op::Affine { x, w, b, m, k, n } => {
                let (vx, vw) = (val(*x), val(*w));
                let (m, k, n) = (*m, *k, *n);
                acc(*x, &mut |s| gemm(m, n, k, g, false, vw, true, s, 1.0));
                acc(*w, &mut |s| gemm(k, m, n, vx, true, g, false, s, 1.0));
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::BroadcastAdd(a, b) => {
                let target = nodes[i].value.shape();
                for j in [*a, *b] {
                    let src = nodes[j].value.shape();
                    acc(j, &mut |s| for_each_broadcast(src, target, |ti, si| s[si] += g[ti]));
                }
            }
            Op::Transpose { input, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(*input, &mut |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[c * rows + r];
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &j in inputs {
                    let ext = nodes[j].value.shape()[*axis];
                    let run = ext * inner;
                    acc(j, &mut |s| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut s[o * run..(o + 1) * run], &g[src..src + run]);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, ext, inner) = axis_split(nodes[*input].value.shape(), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let run = len * inner;
                        add_into(&mut s[dst..dst + run], &g[o * run..(o + 1) * run]);
                    }
                })
            }
            Op::GatherRows { input, indices } => {
                let width = nodes[i].value.numel() / indices.len();
                acc(*input, &mut |s| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(
                            &mut s[src * width..(src + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let c = g[0] / nodes[*a].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|d| *d += c))
            }
            Op::SumAxis { input, axis } => {
                let (outer, ext, inner) = axis_split(nodes[*input].value.shape(), *axis);
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for k in 0..ext {
                            let base = (o * ext + k) * inner;
                            add_into(&mut s[base..base + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                })
            }
            Op::Exp(a) => acc(*a, &mut |s| elementwise(s, g, out, |g, y| g * y)),
            Op::Log(a) => acc(*a, &mut |s| elementwise(s, g, val(*a), |g, x| g / x)),
            Op::Tanh(a) => acc(*a, &mut |s| elementwise(s, g, out, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, &mut |s| {
                elementwise(s, g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| elementwise(s, g, out, |g, y| g * y * (1.0 - y))),
            Op::Softplus(a) => acc(*a, &mut |s| elementwise(s, g, val(*a), |g, x| g * sigmoid(x))),
            Op::Square(a) => acc(*a, &mut |s| elementwise(s, g, val(*a), |g, x| 2.0 * g * x)),
            Op::Softmax { input, axis } => {
                let shape = nodes[i].value.shape();
                acc(*input, &mut |s| {
                    for_lanes(shape, *axis, |lane, len| {
                        let dot: f64 = (0..len).map(|k| g[lane(k)] * out[lane(k)]).sum();
                        for k in 0..len {
                            s[lane(k)] += out[lane(k)] * (g[lane(k)] - dot);
                        }
                    })
                })
            }
            Op::LogSoftmax { input, axis } => {
                let shape = nodes[i].value.shape();
                acc(*input, &mut |s| {
                    for_lanes(shape, *axis, |lane, len| {
                        let total: f64 = (0..len).map(|k| g[lane(k)]).sum();
                        for k in 0..len {
                            s[lane(k)] += g[lane(k)] - out[lane(k)].exp() * total;
                        }
                    })
                })
            }
            Op::LogSumExp { input, axis } => {
                let x = val(*input);
                let shape = nodes[*input].value.shape();
                acc(*input, &mut |s| {
                    let mut lane_no = 0;
                    for_lanes(shape, *axis, |lane, len| {
                        for k in 0..len {
                            s[lane(k)] += g[lane_no] * (x[lane(k)] - out[lane_no]).exp();
                        }
                        lane_no += 1;
                    })
                })
            }
            Op::L2Normalize { input, axis, norms } => {
                let shape = nodes[i].value.shape();
                acc(*input, &mut |s| {
                    let mut lane_no = 0;
                    for_lanes(shape, *axis, |lane, len| {
                        let norm = norms[lane_no];
                        lane_no += 1;
                        if norm >= SAFE_NORM_FLOOR {
                            let dot: f64 = (0..len).map(|k| g[lane(k)] * out[lane(k)]).sum();
                            for k in 0..len {
                                s[lane(k)] += (g[lane(k)] - out[lane(k)] * dot) / norm;
                            }
                        } else {
                            for k in 0..len {
                                s[lane(k)] += g[lane(k)] / SAFE_NORM_FLOOR;
                            }
                        }
                    })
                })
            }
            Op::BroadcastTo(a) => {
                let src = nodes[*a].value.shape();
                let target = nodes[i].value.shape();
                acc(*a, &mut |s| for_each_broadcast(src, target, |ti, si| s[si] += g[ti]))
            }
        }
    }
}

/// Source extents right-aligned against `target`, each equal or 1.
fn broadcastable(src: &[usize], target: &[usize]) -> bool {
    src.len() <= target.len()
        && src
            .iter()
            .rev()
            .zip(target.iter().rev())
            .all(|(&s, &d)| s == d || s == 1)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn elementwise(s: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &v) in s.iter_mut().zip(g).zip(v) {
        *d += f(g, v);
    }
}

/// Max, order-free sum of `exp(v - max)`, and the shifted exponentials.
fn stable_exps(vals: &[f64]) -> (f64, f64, Vec<f64>) {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let mut buf = exps.clone();
    (max, order_free_sum(&mut buf), exps)
}

/// Visits every lane along `axis` with an index mapper and the lane length.
fn for_lanes(shape: &[usize], axis: usize, mut f: impl FnMut(&dyn Fn(usize) -> usize, usize)) {
    let (outer, ext, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ext * inner + i;
            f(&|k| base + k * inner, ext);
        }
    }
}

/// Like [`for_lanes`] but also hands over the lane's values.
fn lanes(t: &Tensor, axis: usize, mut f: impl FnMut(&dyn Fn(usize) -> usize, &[f64])) {
    let data = t.data();
    let mut buf = Vec::new();
    for_lanes(t.shape(), axis, |lane, len| {
        buf.clear();
        buf.extend((0..len).map(|k| data[lane(k)]));
        f(lane, &buf);
    });
}
