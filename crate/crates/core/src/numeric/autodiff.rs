//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one evaluation. Values live on the
//! tape; [`Var`] is a cheap copyable handle. Calling [`Tape::backward`] on a
//! scalar node returns the adjoint of every recorded node. The tape is rebuilt
//! for each evaluation, there is no persistent graph.
//!
//! Non-finite values never propagate silently: the first node whose value
//! contains NaN or Inf is remembered and reported by [`Tape::check_finite`]
//! and [`Tape::backward`].

use super::tensor::{gemm, Tensor};
use crate::error::{CodaError, Result};
use std::cell::{Cell, RefCell};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `a + c * b`
    Axpy(usize, usize, f64),
    /// `a[.., m] + b[m]`
    AddRow(usize, usize),
    MatMul(usize, usize),
    Swish(usize),
    Sum(usize),
    /// `sum((a - target)^2)` with a constant target.
    SqErrSum(usize, Tensor),
    Slice(usize, usize),
    Reshape(usize),
    SelectCols(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
    },
    RowNormSum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Axpy(..) => "axpy",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Swish(..) => "swish",
            Op::Sum(..) => "sum",
            Op::SqErrSum(..) => "sq_err_sum",
            Op::Slice(..) => "slice",
            Op::Reshape(..) => "reshape",
            Op::SelectCols(..) => "select_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Conv2d { .. } => "conv2d",
            Op::RowNormSum(..) => "row_norm_sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one differentiable evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    first_non_finite: Cell<Option<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints of every node recorded on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` did not influence the output.
    pub fn of(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }

    /// Adjoint of `v` as a flat vector.
    pub fn flat(&self, v: Var<'_>) -> Vec<f64> {
        self.of(v).into_data()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn add_into(acc: &mut Option<Tensor>, shape: &[usize], g: &[f64], c: f64) {
    let t = acc.get_or_insert_with(|| Tensor::zeros(shape));
    for (a, &v) in t.data_mut().iter_mut().zip(g) {
        *a += c * v;
    }
}

fn acc_mut<'a>(acc: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut [f64] {
    acc.get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

/// Fills `cols` (`[cin*k*k, h*w]`) with periodic patches of one image `x` (`[cin, h, w]`).
fn im2col_periodic(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..cin {
        let img = &x[c * hw..(c + 1) * hw];
        for di in 0..k {
            for dj in 0..k {
                let row = (c * k + di) * k + dj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..h {
                    let si = (i + h + di - pad) % h;
                    let src_row = &img[si * w..(si + 1) * w];
                    let d = &mut dst[i * w..(i + 1) * w];
                    // shifted copy with wrap-around: j -> (j + dj - pad) mod w
                    let shift = (dj + w - pad) % w;
                    d[..w - shift].copy_from_slice(&src_row[shift..]);
                    d[w - shift..].copy_from_slice(&src_row[..shift]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_periodic`]: scatter-adds `cols` back into `gx`.
fn col2im_periodic(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, gx: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..cin {
        let img = &mut gx[c * hw..(c + 1) * hw];
        for di in 0..k {
            for dj in 0..k {
                let row = (c * k + di) * k + dj;
                let src = &cols[row * hw..(row + 1) * hw];
                let shift = (dj + w - pad) % w;
                for i in 0..h {
                    let si = (i + h + di - pad) % h;
                    let g_row = &mut img[si * w..(si + 1) * w];
                    let s = &src[i * w..(i + 1) * w];
                    for (j, &v) in s.iter().enumerate() {
                        g_row[(j + shift) % w] += v;
                    }
                }
            }
        }
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
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that does not require a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Error describing the first non-finite node, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            None => Ok(()),
            Some(id) => {
                let nodes = self.nodes.borrow();
                Err(CodaError::Numerical {
                    locus: format!("tape node {id} ({})", nodes[id].op.name()),
                })
            }
        }
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(CodaError::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let (lower, _) = grads.split_at_mut(id);
            Self::propagate(&nodes, node, &g, lower);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let shape_of = |i: usize| nodes[i].value.shape().to_vec();
        let needs = |i: usize| nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, 1.0);
                }
                if needs(*b) {
                    add_into(&mut grads[*b], &shape_of(*b), gd, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, 1.0);
                }
                if needs(*b) {
                    add_into(&mut grads[*b], &shape_of(*b), gd, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if needs(*a) {
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for ((x, &gi), &bi) in acc.iter_mut().zip(gd).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if needs(*b) {
                    let acc = acc_mut(&mut grads[*b], &shape_of(*b));
                    for ((x, &gi), &ai) in acc.iter_mut().zip(gd).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, *c);
                }
            }
            Op::Axpy(a, b, c) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, 1.0);
                }
                if needs(*b) {
                    add_into(&mut grads[*b], &shape_of(*b), gd, *c);
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, 1.0);
                }
                if needs(*b) {
                    let m = nodes[*b].value.len();
                    let acc = acc_mut(&mut grads[*b], &shape_of(*b));
                    for row in gd.chunks_exact(m) {
                        for (x, &v) in acc.iter_mut().zip(row) {
                            *x += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if needs(*a) {
                    // dA = G B^T
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    gemm(n, m, k, gd, false, vb.data(), true, acc, 1.0);
                }
                if needs(*b) {
                    // dB = A^T G
                    let acc = acc_mut(&mut grads[*b], &shape_of(*b));
                    gemm(k, n, m, va.data(), true, gd, false, acc, 1.0);
                }
            }
            Op::Swish(a) => {
                if needs(*a) {
                    let z = nodes[*a].value.data();
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for ((x, &gi), &zi) in acc.iter_mut().zip(gd).zip(z) {
                        let s = sigmoid(zi);
                        *x += gi * s * (1.0 + zi * (1.0 - s));
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for x in acc.iter_mut() {
                        *x += gd[0];
                    }
                }
            }
            Op::SqErrSum(a, target) => {
                if needs(*a) {
                    let va = nodes[*a].value.data();
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for ((x, &ai), &ti) in acc.iter_mut().zip(va).zip(target.data()) {
                        *x += 2.0 * gd[0] * (ai - ti);
                    }
                }
            }
            Op::Slice(a, offset) => {
                if needs(*a) {
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for (x, &v) in acc[*offset..*offset + gd.len()].iter_mut().zip(gd) {
                        *x += v;
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    add_into(&mut grads[*a], &shape_of(*a), gd, 1.0);
                }
            }
            Op::SelectCols(a, cols) => {
                if needs(*a) {
                    let m = nodes[*a].value.shape()[1];
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for (r, grow) in gd.chunks_exact(cols.len()).enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            acc[r * m + c] += grow[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = node.value.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p].value.shape()[1];
                    if needs(p) {
                        let acc = acc_mut(&mut grads[p], &shape_of(p));
                        for (r, grow) in gd.chunks_exact(total).enumerate() {
                            for j in 0..w {
                                acc[r * w + j] += grow[start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::Conv2d { x, w, b, k } => {
                let vx = &nodes[*x].value;
                let vw = &nodes[*w].value;
                let (bsz, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let cout = vw.shape()[0];
                let hw = h * wd;
                let kk = cin * k * k;
                let mut cols = vec![0.0; kk * hw];
                let mut gcols = vec![0.0; kk * hw];
                for bi in 0..bsz {
                    let gout = &gd[bi * cout * hw..(bi + 1) * cout * hw];
                    if needs(*w) {
                        im2col_periodic(&vx.data()[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, *k, &mut cols);
                        let acc = acc_mut(&mut grads[*w], &shape_of(*w));
                        // dW[cout, kk] += G[cout, hw] cols^T
                        gemm(cout, hw, kk, gout, false, &cols, true, acc, 1.0);
                    }
                    if needs(*b) {
                        let acc = acc_mut(&mut grads[*b], &shape_of(*b));
                        for (o, x) in acc.iter_mut().enumerate() {
                            *x += gout[o * hw..(o + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    if needs(*x) {
                        // dcols[kk, hw] = W^T G
                        gemm(kk, cout, hw, vw.data(), true, gout, false, &mut gcols, 0.0);
                        let acc = acc_mut(&mut grads[*x], &shape_of(*x));
                        col2im_periodic(&gcols, cin, h, wd, *k, &mut acc[bi * cin * hw..(bi + 1) * cin * hw]);
                    }
                }
            }
            Op::RowNormSum(a) => {
                if needs(*a) {
                    let va = &nodes[*a].value;
                    let c = va.shape()[1];
                    let acc = acc_mut(&mut grads[*a], &shape_of(*a));
                    for (r, row) in va.data().chunks_exact(c).enumerate() {
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        // subgradient 0 at a zero row
                        if norm > 0.0 {
                            for (j, &v) in row.iter().enumerate() {
                                acc[r * c + j] += gd[0] * v / norm;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the node value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on a borrowed node value.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|v| v.item())
    }

    pub fn is_finite(&self) -> bool {
        self.with_value(|v| v.is_finite())
    }

    fn binary(
        self,
        other: Var<'t>,
        what: &str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            a.check_same_shape(b, what)?;
            f(a, b)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, op, needs))
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let value = f(&self.tape.nodes.borrow()[self.id].value)?;
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, op, needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    /// `self + c * other`.
    pub fn axpy(self, other: Var<'t>, c: f64) -> Result<Var<'t>> {
        self.binary(other, "axpy", |a, b| a.axpy(b, c), Op::Axpy(self.id, other.id, c))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|a| Ok(a.scale(c)), Op::Scale(self.id, c))
            .expect("scale is infallible")
    }

    /// Adds the 1-D `bias` to every row along the last axis.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let m = b.len();
            if a.shape().last() != Some(&m) {
                return Err(CodaError::Shape(format!(
                    "add_row: {:?} + [{m}]",
                    a.shape()
                )));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_exact_mut(m) {
                for (x, &v) in row.iter_mut().zip(b.data()) {
                    *x += v;
                }
            }
            out
        };
        let needs = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddRow(self.id, bias.id), needs))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    /// `z * sigmoid(z)` elementwise.
    pub fn swish(self) -> Var<'t> {
        self.unary(|a| Ok(a.map(|z| z * sigmoid(z))), Op::Swish(self.id))
            .expect("swish is infallible")
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|a| Ok(Tensor::scalar(a.data().iter().sum())), Op::Sum(self.id))
            .expect("sum is infallible")
    }

    /// `sum((self - target)^2)`.
    pub fn sq_err_sum(self, target: &Tensor) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            a.check_same_shape(target, "sq_err_sum")?;
            let s: f64 = a
                .data()
                .iter()
                .zip(target.data())
                .map(|(x, t)| (x - t) * (x - t))
                .sum();
            Tensor::scalar(s)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(value, Op::SqErrSum(self.id, target.clone()), needs))
    }

    /// `sum(self^2)`.
    pub fn sq_sum(self) -> Var<'t> {
        let zeros = self.with_value(|v| Tensor::zeros(v.shape()));
        self.sq_err_sum(&zeros).expect("same shape")
    }

    /// Contiguous slice of the flattened value, reshaped to `shape`.
    pub fn slice(self, offset: usize, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let len: usize = shape.iter().product();
            if offset + len > a.len() {
                return Err(CodaError::Shape(format!(
                    "slice [{offset}, {}) out of {}",
                    offset + len,
                    a.len()
                )));
            }
            Tensor::new(shape.to_vec(), a.data()[offset..offset + len].to_vec())?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::Slice(self.id, offset), needs))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(|a| a.clone().reshape(shape), Op::Reshape(self.id))
    }

    /// Columns `cols` of a matrix, in the given order.
    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let (n, m) = a.as_matrix("select_cols")?;
            if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
                return Err(CodaError::Shape(format!("column {bad} out of {m}")));
            }
            let mut out = Vec::with_capacity(n * cols.len());
            for row in a.data().chunks_exact(m) {
                out.extend(cols.iter().map(|&c| row[c]));
            }
            Tensor::new(vec![n, cols.len()], out)?
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(value, Op::SelectCols(self.id, cols.to_vec()), needs))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| CodaError::Shape("concat of zero parts".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let n = nodes[first.id].value.as_matrix("concat_cols")?.0;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = nodes[p.id].value.as_matrix("concat_cols")?;
                if r != n {
                    return Err(CodaError::Shape(format!("concat rows {r} vs {n}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(n * total);
            for r in 0..n {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.id].value.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![n, total], out)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(value, Op::ConcatCols(ids), needs))
    }

    /// Same-size 2-D convolution with periodic padding.
    ///
    /// `self`: `[batch, cin, h, w]`, `weight`: `[cout, cin, k, k]` (odd `k`), `bias`: `[cout]`.
    pub fn conv2d_periodic(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (value, k) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (
                &nodes[self.id].value,
                &nodes[weight.id].value,
                &nodes[bias.id].value,
            );
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0
            {
                return Err(CodaError::Shape(format!("conv2d: x {xs:?}, w {ws:?}")));
            }
            if b.len() != ws[0] {
                return Err(CodaError::Shape(format!("conv2d bias {:?}", b.shape())));
            }
            let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (cout, k) = (ws[0], ws[2]);
            if k > h || k > wd {
                return Err(CodaError::Shape("conv2d kernel larger than grid".into()));
            }
            let hw = h * wd;
            let kk = cin * k * k;
            let mut out = vec![0.0; bsz * cout * hw];
            let mut cols = vec![0.0; kk * hw];
            for bi in 0..bsz {
                im2col_periodic(&x.data()[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, k, &mut cols);
                let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
                for (oc, chunk) in o.chunks_exact_mut(hw).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
                gemm(cout, kk, hw, w.data(), false, &cols, false, o, 1.0);
            }
            (Tensor::new(vec![bsz, cout, h, wd], out)?, k)
        };
        let needs = self.tape.needs(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                k,
            },
            needs,
        ))
    }

    /// `sum_i ||row_i||_2` of a matrix.
    pub fn row_norm_sum(self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let (_, c) = a.as_matrix("row_norm_sum")?;
            let s: f64 = a
                .data()
                .chunks_exact(c)
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum();
            Tensor::scalar(s)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(value, Op::RowNormSum(self.id), needs))
    }
}

/// A scalar-valued program of a flat parameter vector, recorded on a tape.
pub trait ScalarProgram {
    fn eval<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Result<Var<'t>>;
}

impl<F> ScalarProgram for F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    fn eval<'t>(&self, tape: &'t Tape, theta: Var<'t>) -> Result<Var<'t>> {
        self(tape, theta)
    }
}

/// Pins a closure to the higher-ranked signature of [`ScalarProgram`].
pub fn program<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    f
}

/// Value of `program` at `theta`.
pub fn value<P: ScalarProgram + ?Sized>(program: &P, theta: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let t = tape.var(Tensor::vector(theta));
    let out = program.eval(&tape, t)?;
    tape.check_finite()?;
    out.item()
}

/// Value and gradient of `program` at `theta`.
pub fn grad<P: ScalarProgram + ?Sized>(program: &P, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let t = tape.var(Tensor::vector(theta));
    let out = program.eval(&tape, t)?;
    let v = out.item()?;
    let grads = tape.backward(out)?;
    Ok((v, grads.flat(t)))
}

/// Central finite differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
pub fn finite_diff_grad(
    f: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(CodaError::Config(format!("finite-difference step {step} must be > 0")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe)?;
        probe[i] = orig - step;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CodaError::Numerical {
                locus: format!("finite difference coordinate {i}"),
            });
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Ok(out)
}

/// Largest scaled relative deviation between two gradients:
/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor * ||a||_inf)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())) * floor;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let den = x.abs().max(y.abs()).max(scale).max(f64::MIN_POSITIVE);
            (x - y).abs() / den
        })
        .fold(0.0, f64::max)
}
