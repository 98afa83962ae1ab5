//! Dynamic reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and the
//! ids of its inputs. Nodes are appended in execution order, so walking the
//! list backwards from the loss is a reverse topological traversal that
//! visits each node once.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use super::kernels;
use super::param::Param;
use super::tensor::{split_axis, Real, Tensor};
use super::TensorError;

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    MaskedSoftmax(usize),
    L2Normalize { x: usize, axis: usize, eps: T },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<T>, rstds: Vec<T> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, indices: Vec<usize> },
    MaxAxis { x: usize, argmax: Vec<usize> },
    SegmentMax { x: usize, argmax: Vec<Option<usize>> },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv1d { x: usize, kernels: usize, bias: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records differentiable operations for one forward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    non_finite: Cell<Option<(usize, &'static str)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
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
            params: RefCell::new(HashMap::new()),
            non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input value.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Leaf for a model parameter; repeated calls for the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.leaf(p.value.clone());
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.non_finite.get() {
            None => Ok(()),
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.non_finite.get().is_none() && !value.all_finite() {
            self.non_finite.set(Some((id, name)));
        }
        nodes.push(Node { value, op });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Run the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: nodes[loss.id].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients of leaves after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&p.id())
            .and_then(|&id| self.grads[id].as_ref())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, contrib: &[T]) {
    let s = slot(grads, id, contrib.len());
    for (a, &b) in s.iter_mut().zip(contrib) {
        *a += b;
    }
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<(), TensorError> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let gt = Tensor::new(out.shape(), g.to_vec())?;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let da = kernels::matmul_nt(&gt, val(*b))?;
            let db = kernels::matmul_tn(val(*a), &gt)?;
            add_into(grads, *a, da.data());
            add_into(grads, *b, db.data());
        }
        Op::MatMulNt(a, b) => {
            let da = kernels::matmul(&gt, val(*b))?;
            let db = kernels::matmul_tn(&gt, val(*a))?;
            add_into(grads, *a, da.data());
            add_into(grads, *b, db.data());
        }
        Op::Transpose(a) => {
            let da = kernels::transpose(&gt)?;
            add_into(grads, *a, da.data());
        }
        Op::Add(a, b) => {
            add_into(grads, *a, g);
            add_into(grads, *b, g);
        }
        Op::Sub(a, b) => {
            add_into(grads, *a, g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            add_into(grads, *b, &neg);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let da: Vec<T> = g.iter().zip(bv).map(|(&g, &b)| g * b).collect();
            let db: Vec<T> = g.iter().zip(av).map(|(&g, &a)| g * a).collect();
            add_into(grads, *a, &da);
            add_into(grads, *b, &db);
        }
        Op::AddRow(x, b) => {
            add_into(grads, *x, g);
            let cols = out.cols();
            let s = slot(grads, *b, cols);
            for row in g.chunks(cols) {
                for (a, &v) in s.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        Op::MulRow(x, v) => {
            let cols = out.cols();
            let (xv, vv) = (val(*x).data(), val(*v).data());
            let dx: Vec<T> = g
                .iter()
                .enumerate()
                .map(|(i, &g)| g * vv[i % cols])
                .collect();
            add_into(grads, *x, &dx);
            let s = slot(grads, *v, cols);
            for (i, (&g, &xi)) in g.iter().zip(xv).enumerate() {
                s[i % cols] += g * xi;
            }
        }
        Op::Scale(x, c) => {
            let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
            add_into(grads, *x, &dx);
        }
        Op::Gelu(x) => {
            let dx: Vec<T> = g
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| g * kernels::gelu_grad(v))
                .collect();
            add_into(grads, *x, &dx);
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis)?;
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mut s = T::zero();
                    for a in 0..len {
                        s += g[idx(a)] * y[idx(a)];
                    }
                    for a in 0..len {
                        dx[idx(a)] = y[idx(a)] * (g[idx(a)] - s);
                    }
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::MaskedSoftmax(x) => {
            let cols = out.cols();
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..out.rows() {
                let span = r * cols..(r + 1) * cols;
                let s: T = kernels::dot(&g[span.clone()], &y[span.clone()]);
                for j in span {
                    dx[j] = y[j] * (g[j] - s);
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::L2Normalize { x, axis, eps } => {
            let xv = val(*x);
            let (outer, len, inner) = split_axis(out.shape(), *axis)?;
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let mut sq = T::zero();
                    for a in 0..len {
                        sq += xv.data()[idx(a)] * xv.data()[idx(a)];
                    }
                    let norm = sq.sqrt();
                    if norm > *eps {
                        let mut yg = T::zero();
                        for a in 0..len {
                            yg += y[idx(a)] * g[idx(a)];
                        }
                        for a in 0..len {
                            dx[idx(a)] = (g[idx(a)] - y[idx(a)] * yg) / norm;
                        }
                    } else {
                        for a in 0..len {
                            dx[idx(a)] = g[idx(a)] / *eps;
                        }
                    }
                }
            }
            add_into(grads, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            means,
            rstds,
        } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let cols = out.cols();
            let n = T::lit(cols as f64);
            let mut dx = vec![T::zero(); g.len()];
            let mut dgamma = vec![T::zero(); cols];
            let mut dbeta = vec![T::zero(); cols];
            for r in 0..out.rows() {
                let (mean, rstd) = (means[r], rstds[r]);
                let xr = xv.row(r);
                let gr = &g[r * cols..(r + 1) * cols];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * rstd;
                    let dxhat = gr[j] * gam[j];
                    dgamma[j] += gr[j] * xhat;
                    dbeta[j] += gr[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for j in 0..cols {
                    let xhat = (xr[j] - mean) * rstd;
                    let dxhat = gr[j] * gam[j];
                    dx[r * cols + j] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                }
            }
            add_into(grads, *x, &dx);
            add_into(grads, *gamma, &dgamma);
            add_into(grads, *beta, &dbeta);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis)?;
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                let mut part = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    part.extend_from_slice(&g[start..start + len * inner]);
                }
                add_into(grads, inp, &part);
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape().to_vec();
            let (outer, total, inner) = split_axis(&xs, *axis)?;
            let len = out.shape()[*axis];
            let s = slot(grads, *x, outer * total * inner);
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                for k in 0..len * inner {
                    s[dst + k] += g[src + k];
                }
            }
        }
        Op::IndexSelect { x, indices } => {
            let xv = val(*x);
            let cols = xv.cols();
            let s = slot(grads, *x, xv.len());
            for (r, &src) in indices.iter().enumerate() {
                for j in 0..cols {
                    s[src * cols + j] += g[r * cols + j];
                }
            }
        }
        Op::MaxAxis { x, argmax } => {
            let n = val(*x).len();
            let s = slot(grads, *x, n);
            for (k, &src) in argmax.iter().enumerate() {
                s[src] += g[k];
            }
        }
        Op::SegmentMax { x, argmax } => {
            let n = val(*x).len();
            let s = slot(grads, *x, n);
            for (k, src) in argmax.iter().enumerate() {
                if let Some(src) = src {
                    s[*src] += g[k];
                }
            }
        }
        Op::Sum(x) => {
            let n = val(*x).len();
            let dx = vec![g[0]; n];
            add_into(grads, *x, &dx);
        }
        Op::Mean(x) => {
            let n = val(*x).len();
            let dx = vec![g[0] / T::lit(n as f64); n];
            add_into(grads, *x, &dx);
        }
        Op::Reshape(x) => add_into(grads, *x, g),
        Op::Conv1d { x, kernels, bias } => {
            let (xv, kv) = (val(*x), val(*kernels));
            let (len, d_in) = (xv.shape()[0], xv.shape()[1]);
            let (width, d_out) = (kv.shape()[0], kv.shape()[2]);
            let half = width / 2;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut db = vec![T::zero(); d_out];
            for t in 0..len {
                let gr = &g[t * d_out..(t + 1) * d_out];
                for (b, &gv) in db.iter_mut().zip(gr) {
                    *b += gv;
                }
                for r in 0..width {
                    let src = t as isize + r as isize - half as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let src = src as usize;
                    for i in 0..d_in {
                        let base = (r * d_in + i) * d_out;
                        let krow = &kv.data()[base..base + d_out];
                        dx[src * d_in + i] += kernels::dot(gr, krow);
                        let xval = xv.data()[src * d_in + i];
                        for (o, &gv) in gr.iter().enumerate() {
                            dk[base + o] += xval * gv;
                        }
                    }
                }
            }
            add_into(grads, *x, &dx);
            add_into(grads, *kernels, &dk);
            add_into(grads, *bias, &db);
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let cols = val(*logits).cols();
            let scale = g[0] / T::lit(targets.len() as f64);
            let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                dx[r * cols + t] -= scale;
            }
            add_into(grads, *logits, &dx);
        }
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    fn unary(
        self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>, TensorError>,
        op: Op<T>,
    ) -> Result<Self, TensorError> {
        let out = f(&self.tape.value(self.id))?;
        Ok(self.tape.push(out, op, name))
    }

    fn binary(
        self,
        other: Self,
        name: &'static str,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>, TensorError>,
        op: Op<T>,
    ) -> Result<Self, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(out, op, name))
    }

    pub fn matmul(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, "matmul", kernels::matmul, Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Self) -> Result<Self, TensorError> {
        self.binary(other, "matmul_nt", kernels::matmul_nt, Op::MatMulNt(self.id, other.id))
    }

    pub fn transpose(self) -> Result<Self, TensorError> {
        self.unary("transpose", kernels::transpose, Op::Transpose(self.id))
    }

    fn elementwise(
        self,
        other: Self,
        name: &'static str,
        f: fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self, TensorError> {
        self.binary(
            other,
            name,
            |a, b| {
                if a.shape() != b.shape() {
                    return Err(TensorError::Shape {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape(), data)
            },
            op,
        )
    }

    pub fn add(self, other: Self) -> Result<Self, TensorError> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self, TensorError> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Self) -> Result<Self, TensorError> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    fn row_broadcast(
        self,
        row: Self,
        name: &'static str,
        f: fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self, TensorError> {
        self.binary(
            row,
            name,
            |x, r| {
                let cols = x.cols();
                if r.len() != cols {
                    return Err(TensorError::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: r.shape().to_vec(),
                    });
                }
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| f(v, r.data()[i % cols]))
                    .collect();
                Tensor::new(x.shape(), data)
            },
            op,
        )
    }

    /// Add a bias row to every row.
    pub fn add_row(self, bias: Self) -> Result<Self, TensorError> {
        self.row_broadcast(bias, "add_row", |a, b| a + b, Op::AddRow(self.id, bias.id))
    }

    /// Multiply every row elementwise by `row`.
    pub fn mul_row(self, row: Self) -> Result<Self, TensorError> {
        self.row_broadcast(row, "mul_row", |a, b| a * b, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: T) -> Result<Self, TensorError> {
        self.unary("scale", |x| Ok(x.map(|v| v * c)), Op::Scale(self.id, c))
    }

    pub fn gelu(self) -> Result<Self, TensorError> {
        self.unary("gelu", |x| Ok(x.map(kernels::gelu)), Op::Gelu(self.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Self, TensorError> {
        self.unary(
            "softmax",
            |x| kernels::softmax(x, axis),
            Op::Softmax { x: self.id, axis },
        )
    }

    /// Row softmax where only `valid` columns receive weight.
    pub fn masked_softmax(self, valid: &[bool]) -> Result<Self, TensorError> {
        self.unary(
            "masked_softmax",
            |x| kernels::masked_softmax_rows(x, valid),
            Op::MaskedSoftmax(self.id),
        )
    }

    pub fn l2_normalize(self, axis: usize, eps: T) -> Result<Self, TensorError> {
        self.unary(
            "l2_normalize",
            |x| kernels::l2_normalize(x, axis, eps),
            Op::L2Normalize { x: self.id, axis, eps },
        )
    }

    pub fn layer_norm(self, gamma: Self, beta: Self, eps: T) -> Result<Self, TensorError> {
        let (out, means, rstds) = {
            let nodes = self.tape.nodes.borrow();
            kernels::layer_norm(
                &nodes[self.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
                eps,
            )?
        };
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            means,
            rstds,
        };
        Ok(self.tape.push(out, op, "layer_norm"))
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat", axis })?;
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor<T>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            concat_values(&vals, axis)?
        };
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(tape.push(out, op, "concat"))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self, TensorError> {
        self.unary(
            "narrow",
            |x| {
                let (outer, total, inner) = split_axis(x.shape(), axis)?;
                if start + len > total {
                    return Err(TensorError::Index {
                        op: "narrow",
                        index: start + len,
                        len: total,
                    });
                }
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let s = (o * total + start) * inner;
                    data.extend_from_slice(&x.data()[s..s + len * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = len;
                Tensor::new(&shape, data)
            },
            Op::Narrow { x: self.id, axis, start },
        )
    }

    /// Gather rows (first axis) by index; also serves as embedding lookup.
    pub fn index_select(self, indices: &[usize]) -> Result<Self, TensorError> {
        self.unary(
            "index_select",
            |x| {
                let cols = x.cols();
                let rows = x.rows();
                let mut data = Vec::with_capacity(indices.len() * cols);
                for &i in indices {
                    if i >= rows {
                        return Err(TensorError::Index {
                            op: "index_select",
                            index: i,
                            len: rows,
                        });
                    }
                    data.extend_from_slice(x.row(i));
                }
                Tensor::new(&[indices.len(), cols], data)
            },
            Op::IndexSelect {
                x: self.id,
                indices: indices.to_vec(),
            },
        )
    }

    /// Max over `axis`, removing it. Gradient flows to the first maximum.
    pub fn max_axis(self, axis: usize) -> Result<Self, TensorError> {
        let (out, argmax) = {
            let x = self.tape.value(self.id);
            let (outer, len, inner) = split_axis(x.shape(), axis)?;
            if len == 0 {
                return Err(TensorError::EmptyAxis { op: "max", axis });
            }
            let mut vals = Vec::with_capacity(outer * inner);
            let mut arg = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = (o * len) * inner + i;
                    for a in 1..len {
                        let idx = (o * len + a) * inner + i;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                    vals.push(x.data()[best]);
                    arg.push(best);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (Tensor::new(&shape, vals)?, arg)
        };
        Ok(self.tape.push(out, Op::MaxAxis { x: self.id, argmax }, "max_axis"))
    }

    /// For a matrix, max over contiguous column segments `(start, len)`.
    /// Empty segments yield zero and pass no gradient.
    pub fn segment_max_cols(self, segments: &[(usize, usize)]) -> Result<Self, TensorError> {
        let (out, argmax) = {
            let x = self.tape.value(self.id);
            let (rows, cols) = (x.rows(), x.cols());
            let mut vals = Vec::with_capacity(rows * segments.len());
            let mut arg = Vec::with_capacity(rows * segments.len());
            for r in 0..rows {
                for &(start, len) in segments {
                    if start + len > cols {
                        return Err(TensorError::Index {
                            op: "segment_max",
                            index: start + len,
                            len: cols,
                        });
                    }
                    if len == 0 {
                        vals.push(T::zero());
                        arg.push(None);
                        continue;
                    }
                    let mut best = r * cols + start;
                    for c in start + 1..start + len {
                        if x.data()[r * cols + c] > x.data()[best] {
                            best = r * cols + c;
                        }
                    }
                    vals.push(x.data()[best]);
                    arg.push(Some(best));
                }
            }
            (Tensor::new(&[rows, segments.len()], vals)?, arg)
        };
        Ok(self
            .tape
            .push(out, Op::SegmentMax { x: self.id, argmax }, "segment_max"))
    }

    pub fn sum(self) -> Result<Self, TensorError> {
        self.unary(
            "sum",
            |x| Ok(Tensor::scalar(x.data().iter().copied().sum())),
            Op::Sum(self.id),
        )
    }

    pub fn mean(self) -> Result<Self, TensorError> {
        self.unary(
            "mean",
            |x| {
                if x.is_empty() {
                    return Err(TensorError::EmptyAxis { op: "mean", axis: 0 });
                }
                Ok(Tensor::scalar(
                    x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64),
                ))
            },
            Op::Mean(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        self.unary("reshape", |x| x.clone().reshape(shape), Op::Reshape(self.id))
    }

    pub fn conv1d_same(self, kernels: Self, bias: Self) -> Result<Self, TensorError> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            kernels::conv1d_same(
                &nodes[self.id].value,
                &nodes[kernels.id].value,
                &nodes[bias.id].value,
            )?
        };
        let op = Op::Conv1d {
            x: self.id,
            kernels: kernels.id,
            bias: bias.id,
        };
        Ok(self.tape.push(out, op, "conv1d"))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Self, TensorError> {
        let (loss, probs) = {
            let x = self.tape.value(self.id);
            let rows = x.rows();
            if targets.len() != rows {
                return Err(TensorError::Shape {
                    op: "cross_entropy",
                    lhs: x.shape().to_vec(),
                    rhs: vec![targets.len()],
                });
            }
            let mut total = T::zero();
            let mut probs = Vec::with_capacity(x.len());
            for (r, &t) in targets.iter().enumerate() {
                let row = x.row(r);
                total += kernels::cross_entropy_from_logits(row, t)?;
                let lse = kernels::log_sum_exp(row);
                probs.extend(row.iter().map(|&v| (v - lse).exp()));
            }
            (total / T::lit(rows as f64), probs)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.tape.push(Tensor::scalar(loss), op, "cross_entropy"))
    }
}

/// Concatenate plain tensors along `axis`; all other extents must agree.
pub fn concat_values<T: Real>(vals: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
    let first = vals.first().ok_or(TensorError::EmptyAxis { op: "concat", axis })?;
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    let mut total = 0;
    for v in vals {
        let (o, l, i) = split_axis(v.shape(), axis)?;
        if o != outer || i != inner || v.rank() != first.rank() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        total += l;
    }
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in vals {
            let l = v.shape()[axis];
            let s = o * l * inner;
            data.extend_from_slice(&v.data()[s..s + l * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, data)
}
