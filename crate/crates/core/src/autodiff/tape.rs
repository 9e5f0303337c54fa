//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and the handles of its inputs. Because a node can only reference nodes
//! that already exist, the node list is always in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use suparc_core::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, norm, Tensor};
use crate::error::{Error, Result};

/// Lower bound applied to `log` and `sqrt` inputs.
pub const DOMAIN_FLOOR: f64 = 1e-12;

/// Distance kept from ±1 by [`Tape::arccos`].
pub const ARCCOS_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Cos,
    Arccos,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Unary(Var, Unary),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    RowSums(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Cosine(Var, Var),
    PairwiseCosine(Var),
    RowwiseCosine(Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Cosine(a, b)
            | Op::RowwiseCosine(a, b) => self.tracks(*a) || self.tracks(*b),
            Op::Unary(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::SliceCols(a, _, _)
            | Op::PairwiseCosine(a) => self.tracks(*a),
            Op::ConcatCols(parts) => parts.iter().any(|&p| self.tracks(p)),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor shaped like the node's value; zeros if unreached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape tracks value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "expected matrices, got {:?} and {:?}",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let (m, k, k2, n) = (av.shape()[0], av.shape()[1], bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {m}x{k} by {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a length-`k` bias row to every row of an `n×k` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.rank() != 2 || bv.numel() != av.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} plus row {:?}", av.shape(), bv.shape()),
            ));
        }
        let cols = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    // ----- elementwise binary, with scalar broadcasting -----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)
        } else if bv.numel() == 1 {
            let y = bv.item();
            Ok(av.map(|x| f(x, y)))
        } else if av.numel() == 1 {
            let x = av.item();
            Ok(bv.map(|y| f(x, y)))
        } else {
            Err(Error::dim(
                name,
                format!("shapes {:?} and {:?}", av.shape(), bv.shape()),
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |x| x.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => |x| x.max(DOMAIN_FLOOR).ln(),
            Unary::Sqrt => |x| x.max(DOMAIN_FLOOR).sqrt(),
            Unary::Abs => f64::abs,
            Unary::Cos => f64::cos,
            Unary::Arccos => |x| x.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos(),
        };
        let value = self.value(a).map(f);
        self.push(value, Op::Unary(a, kind))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    /// Square root of `max(x, 1e-12)`.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    /// `acos` of the input clamped to `[-1+ε, 1-ε]`, ε = [`ARCCOS_EPS`].
    ///
    /// The derivative is evaluated at the clamped point, so it stays finite
    /// (bounded by `1/√(2ε−ε²)`) even for inputs at or beyond ±1.
    pub fn arccos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Arccos)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    // ----- reductions and reshaping -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of an `n×k` matrix into an `n×1` column.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::dim("row_sums", format!("{:?}", av.shape())));
        }
        let cols = av.cols();
        let data: Vec<f64> = av.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![av.rows(), 1], data)?;
        Ok(self.push(value, Op::RowSums(a)))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::dim(
                    "concat_cols",
                    format!("part {:?} does not have {rows} rows", v.shape()),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 || start >= end || end > av.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {:?}", av.shape()),
            ));
        }
        let out: Vec<f64> = (0..av.rows())
            .flat_map(|r| av.row(r)[start..end].iter().copied())
            .collect();
        let value = Tensor::new(vec![av.rows(), end - start], out)?;
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    // ----- cosine geometry -----

    /// Cosine similarity of two equal-length tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = super::tensor::cosine_similarity(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b)))
    }

    /// `n×n` matrix of cosine similarities between the rows of `h`.
    pub fn pairwise_cosine(&mut self, h: Var) -> Result<Var> {
        let hv = self.value(h);
        if hv.rank() != 2 {
            return Err(Error::dim("pairwise_cosine", format!("{:?}", hv.shape())));
        }
        let units = unit_rows(hv, "pairwise_cosine")?;
        let (n, d) = (hv.rows(), hv.cols());
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let c =
                    dot(&units[i * d..(i + 1) * d], &units[j * d..(j + 1) * d]).clamp(-1.0, 1.0);
                out[i * n + j] = c;
                out[j * n + i] = c;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        Ok(self.push(value, Op::PairwiseCosine(h)))
    }

    /// Cosine similarity of matching rows of two `n×d` matrices, as an `n×1` column.
    pub fn rowwise_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || av.shape() != bv.shape() {
            return Err(Error::dim(
                "rowwise_cosine",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let ua = unit_rows(av, "rowwise_cosine")?;
        let ub = unit_rows(bv, "rowwise_cosine")?;
        let d = av.cols();
        let out: Vec<f64> = ua
            .chunks(d)
            .zip(ub.chunks(d))
            .map(|(x, y)| dot(x, y).clamp(-1.0, 1.0))
            .collect();
        let value = Tensor::new(vec![av.rows(), 1], out)?;
        Ok(self.push(value, Op::RowwiseCosine(a, b)))
    }

    // ----- backward -----

    /// Propagates gradients from a scalar node to everything it depends on.
    ///
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pass[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = pass[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut pass);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = pass[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                send(*a, &mut |ga| gemm_nt_acc(g, bv.data(), ga, m, k, n));
                send(*b, &mut |gb| gemm_tn_acc(av.data(), g, gb, m, k, n));
            }
            Op::AddRow(a, bias) => {
                let cols = self.value(*a).cols();
                send(*a, &mut |ga| add_into(ga, g));
                send(*bias, &mut |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |ga| reduce_into(ga, g, 1.0));
                send(*b, &mut |gb| reduce_into(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |ga| reduce_into(ga, g, 1.0));
                send(*b, &mut |gb| reduce_into(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |ga| product_grad(ga, g, bv));
                send(*b, &mut |gb| product_grad(gb, g, av));
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                send(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * unary_derivative(*kind, x[i], y[i]);
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &mut |ga| reduce_into(ga, g, *c)),
            Op::AddScalar(a) => send(*a, &mut |ga| add_into(ga, g)),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                send(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::RowSums(a) => {
                let cols = self.value(*a).cols();
                send(*a, &mut |ga| {
                    for (row, gr) in ga.chunks_mut(cols).zip(g) {
                        row.iter_mut().for_each(|v| *v += gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    send(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let cols = self.value(*a).cols();
                let w = end - start;
                send(*a, &mut |ga| {
                    for (r, row) in ga.chunks_mut(cols).enumerate() {
                        add_into(&mut row[*start..*end], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = node.value.item();
                let (na, nb) = (norm(av).max(DOMAIN_FLOOR), norm(bv).max(DOMAIN_FLOOR));
                send(*a, &mut |ga| cosine_grad(ga, g[0], av, bv, na, nb, c));
                send(*b, &mut |gb| cosine_grad(gb, g[0], bv, av, nb, na, c));
            }
            Op::PairwiseCosine(h) => {
                let hv = self.value(*h);
                let (n, d) = (hv.rows(), hv.cols());
                let units = unit_rows_floored(hv);
                // dS/dU for S = U Uᵀ is (G + Gᵀ) U.
                let mut du = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let w = g[i * n + j] + g[j * n + i];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            du[i * d + t] += w * units[j * d + t];
                        }
                    }
                }
                send(*h, &mut |gh| {
                    for i in 0..n {
                        let row = hv.row(i);
                        let nrm = norm(row).max(DOMAIN_FLOOR);
                        unit_backward(
                            &mut gh[i * d..(i + 1) * d],
                            &du[i * d..(i + 1) * d],
                            &units[i * d..(i + 1) * d],
                            nrm,
                        );
                    }
                });
            }
            Op::RowwiseCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let ua = unit_rows_floored(av);
                let ub = unit_rows_floored(bv);
                for (this, this_units, other_units) in [(a, &ua, &ub), (b, &ub, &ua)] {
                    let tv = self.value(*this);
                    send(*this, &mut |gx| {
                        for i in 0..tv.rows() {
                            let du: Vec<f64> = other_units[i * d..(i + 1) * d]
                                .iter()
                                .map(|u| u * g[i])
                                .collect();
                            let nrm = norm(tv.row(i)).max(DOMAIN_FLOOR);
                            unit_backward(
                                &mut gx[i * d..(i + 1) * d],
                                &du,
                                &this_units[i * d..(i + 1) * d],
                                nrm,
                            );
                        }
                    });
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Log => {
            if x >= DOMAIN_FLOOR {
                1.0 / x
            } else {
                0.0
            }
        }
        Unary::Sqrt => {
            if x >= DOMAIN_FLOOR {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Cos => -x.sin(),
        Unary::Arccos => {
            let c = x.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS);
            -1.0 / (1.0 - c * c).sqrt()
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Accumulates `c·g` into `dst`, summing when `dst` is a broadcast scalar.
fn reduce_into(dst: &mut [f64], g: &[f64], c: f64) {
    if dst.len() == g.len() {
        dst.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
    } else {
        dst[0] += c * g.iter().sum::<f64>();
    }
}

/// Gradient of `x ⊙ other` with respect to `x`, either side possibly a broadcast scalar.
fn product_grad(dst: &mut [f64], g: &[f64], other: &[f64]) {
    if dst.len() == g.len() {
        if other.len() == g.len() {
            for i in 0..g.len() {
                dst[i] += g[i] * other[i];
            }
        } else {
            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s * other[0]);
        }
    } else {
        dst[0] += g.iter().zip(other).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn cosine_grad(dst: &mut [f64], g: f64, x: &[f64], other: &[f64], nx: f64, no: f64, c: f64) {
    for i in 0..dst.len() {
        dst[i] += g * (other[i] / (nx * no) - c * x[i] / (nx * nx));
    }
}

/// Backpropagates `du` through `u = x / ‖x‖`.
fn unit_backward(dst: &mut [f64], du: &[f64], u: &[f64], nrm: f64) {
    let proj = dot(du, u);
    for t in 0..dst.len() {
        dst[t] += (du[t] - proj * u[t]) / nrm;
    }
}

fn unit_rows(t: &Tensor, op: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        let row = t.row(i);
        let n = norm(row);
        if n == 0.0 || row.is_empty() {
            return Err(Error::Degenerate {
                op,
                detail: format!("row {i} has zero norm"),
            });
        }
        out.extend(row.iter().map(|v| v / n));
    }
    Ok(out)
}

fn unit_rows_floored(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.rows() {
        let row = t.row(i);
        let n = norm(row).max(DOMAIN_FLOOR);
        out.extend(row.iter().map(|v| v / n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_pick() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.constant(mat(1, 2, &[1.0, 0.0]));
        let col = tape.constant(mat(2, 1, &[0.0, 5.0]));
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_rejects_non_scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        let s = tape.constant(Tensor::scalar(2.0));
        let out = tape.add(a, s).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0; 6]);
    }

    #[test]
    fn tanh_and_relu_points() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::scalar(0.0));
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).item(), 0.0);

        let x = tape.param(Tensor::scalar(-2.5));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).item(), 0.0);
        tape.backward(r).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn arccos_clamps_domain() {
        let mut tape = Tape::new();
        let zero = tape.param(Tensor::scalar(0.0));
        let half = tape.param(Tensor::scalar(0.5));
        let one = tape.param(Tensor::scalar(1.0));
        let a0 = tape.arccos(zero);
        let a1 = tape.arccos(half);
        let a2 = tape.arccos(one);
        assert!((tape.value(a0).item() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!((tape.value(a1).item() - std::f64::consts::FRAC_PI_3).abs() < 1e-15);
        let clamped = (1.0f64 - 1e-7).acos();
        assert_eq!(tape.value(a2).item(), clamped);
        assert!((clamped - 4.472e-4).abs() < 1e-6);
        tape.backward(a2).unwrap();
        let g = tape.grad(one).unwrap()[0];
        let bound = 1.0 / (2.0 * ARCCOS_EPS - ARCCOS_EPS * ARCCOS_EPS).sqrt();
        assert!(g.is_finite() && g.abs() <= bound * (1.0 + 1e-6));
    }

    #[test]
    fn log_and_sqrt_floor_their_inputs() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, -1.0]));
        let l = tape.log(x);
        let s = tape.sqrt(x);
        assert!(tape.value(l).is_finite());
        assert!(tape.value(s).is_finite());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![3.0]));
        let loss = tape.sum(used);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused), None);
        assert_eq!(tape.grad_tensor(unused).data(), &[0.0]);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![0.0, 0.0]));
        let b = tape.param(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            tape.cosine_similarity(a, b),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.param(mat(2, 1, &[1.0, 2.0]));
        let b = tape.param(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.slice_cols(c, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(b).data());
    }
}
