//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` walks the tape in reverse once. Every op
//! views its inputs as matrices (`rows × cols`, last axis = cols).
//!
//! Parameters enter a graph through [`Graph::param`], which snapshots the
//! value from a [`ParamStore`]; `backward` adds the resulting gradients back
//! into the store's slots. Gradients accumulate until `zero_grad`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_raw, matmul_t_raw, t_matmul_raw, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed outside the graph and whose
/// backward rule is supplied by the implementor.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor)
        -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather { table: usize, rows: Vec<Option<usize>> },
    Transpose(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize, end: usize },
    SliceRows { x: usize, start: usize, end: usize },
    Sum(usize),
    Mean(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    MaskMul { x: usize, mask: Vec<f64> },
    Custom { inputs: Vec<usize>, op: Arc<dyn CustomOp> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    leaf_grads: HashMap<usize, Tensor>,
    no_grad: bool,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; parameters enter without gradients.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of an input leaf created with [`Graph::input`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on `backward`.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var(i);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.value(id).clone(),
            requires_grad: !self.no_grad,
        });
        let i = self.nodes.len() - 1;
        self.params.insert(id, i);
        Var(i)
    }

    fn binary_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|v| f(*v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({m}x{k}) · ({k2}x{n})")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a.0, b.0), Tensor::matrix(m, n, out)?, &[a.0, b.0]))
    }

    /// `a · bᵀ`, the natural form for weights stored as `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_t", self.value(a))?;
        let (n, k2) = dims2("matmul_t", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("({m}x{k}) · ({n}x{k2})ᵀ")));
        }
        let out = matmul_t_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMulT(a.0, b.0), Tensor::matrix(m, n, out)?, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), t, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), t, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), t, &[a.0, b.0]))
    }

    /// Sums any number of same-shaped nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        let c = tx.cols();
        if tr.len() != c || tr.rows() != 1 {
            return Err(Error::shape(
                op,
                format!("row {:?} against {:?}", tr.shape(), tx.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, tr.data()[i % c]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x + row` with `row` (`1×c`) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", x, row, |a, b| a + b)?;
        Ok(self.push(Op::AddRow(x.0, row.0), t, &[x.0, row.0]))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", x, row, |a, b| a * b)?;
        Ok(self.push(Op::MulRow(x.0, row.0), t, &[x.0, row.0]))
    }

    /// `x ⊙ col` with `col` (`r×1`) broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (&self.nodes[x.0].value, &self.nodes[col.0].value);
        let (r, c) = (tx.rows(), tx.cols());
        if tc.len() != r || tc.cols() != 1 {
            return Err(Error::shape(
                "mul_col",
                format!("col {:?} against {:?}", tc.shape(), tx.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tc.data()[i / c])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::MulCol(x.0, col.0), t, &[x.0, col.0]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| v * c);
        self.push(Op::Scale(x.0, c), t, &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.unary(x, |v| v + c);
        self.push(Op::AddScalar(x.0), t, &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::tanh);
        self.push(Op::Tanh(x.0), t, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        self.push(Op::Relu(x.0), t, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x.0), t, &[x.0])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::exp);
        self.push(Op::Exp(x.0), t, &[x.0])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let t = self.unary(x, f64::ln);
        Ok(self.push(Op::Log(x.0), t, &[x.0]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clipping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(x, |v| v.clamp(lo, hi));
        self.push(Op::Clamp { x: x.0, lo, hi }, t, &[x.0])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Row-wise softmax where `mask[i] == false` marks an excluded position.
    /// Excluded positions get exactly zero weight; a row with no admitted
    /// position is an error.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(m) = mask {
            if m.len() != tx.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {:?}", m.len(), tx.shape()),
                ));
            }
        }
        let mut out = vec![0.0; tx.len()];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked("softmax"));
            }
            let mut z = 0.0;
            for j in 0..c {
                if allowed(j) {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax(x.0), t, &[x.0]))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = xs
            .first()
            .map(|v| self.value(*v).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut total = 0;
        for &x in xs {
            let (xr, xc) = dims2("concat_cols", self.value(x))?;
            if xr != r {
                return Err(Error::shape("concat_cols", format!("rows {xr} vs {r}")));
            }
            total += xc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(i));
            }
        }
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatCols(idx.clone()), Tensor::matrix(r, total, data)?, &idx))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (xr, xc) = dims2("concat_rows", self.value(x))?;
            if xc != c {
                return Err(Error::shape("concat_rows", format!("cols {xc} vs {c}")));
            }
            data.extend_from_slice(self.value(x).data());
            rows += xr;
        }
        let idx: Vec<usize> = xs.iter().map(|v| v.0).collect();
        Ok(self.push(Op::ConcatRows(idx.clone()), Tensor::matrix(rows, c, data)?, &idx))
    }

    /// Embedding lookup: row `i` of the output is `table[rows[i]]`, or zeros
    /// for `None` (a padding slot).
    pub fn gather(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = dims2("gather", tt)?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            match *r {
                Some(i) if i < n => data.extend_from_slice(tt.row_slice(i)),
                Some(i) => return Err(Error::OutOfRange { index: i, len: n }),
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let t = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(
            Op::Gather {
                table: table.0,
                rows: rows.to_vec(),
            },
            t,
            &[table.0],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose(x.0), Tensor::matrix(c, r, data)?, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape(x.0), t, &[x.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row_slice(i)[start..end]);
        }
        let t = Tensor::matrix(r, end - start, data)?;
        Ok(self.push(Op::SliceCols { x: x.0, start, end }, t, &[x.0]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.value(x))?;
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::matrix(end - start, c, data)?;
        Ok(self.push(Op::SliceRows { x: x.0, start, end }, t, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x.0), Tensor::scalar(s), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x.0), Tensor::scalar(s), &[x.0])
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` with no gain or bias.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row_slice(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
            inv_std.push(s);
        }
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(Op::LayerNorm { x: x.0, inv_std }, t, &[x.0])
    }

    /// Multiplies by a fixed elementwise mask (dropout with pre-sampled mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::shape(
                "mask_mul",
                format!("mask of {} for {:?}", mask.len(), t.shape()),
            ));
        }
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskMul { x: x.0, mask }, t, &[x.0]))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Arc<dyn CustomOp>) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            Op::Custom {
                inputs: idx.clone(),
                op,
            },
            output,
            &idx,
        )
    }

    /// Propagates d(loss)/d(node) through the tape. Parameter gradients are
    /// added into `store`; input-leaf gradients are added into this graph.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut grads: Vec<(usize, Tensor)> = Vec::with_capacity(2);
            let val = |j: usize| &self.nodes[j].value;
            let like = |j: usize, data: Vec<f64>| {
                Tensor::new(self.nodes[j].value.shape().to_vec(), data).expect("grad shape")
            };
            match &node.op {
                Op::Leaf => {
                    self.leaf_grads
                        .entry(i)
                        .and_modify(|t| t.add_assign(&g))
                        .or_insert_with(|| g.clone());
                }
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).cols();
                    grads.push((*a, like(*a, matmul_t_raw(g.data(), val(*b).data(), m, n, k))));
                    grads.push((*b, like(*b, t_matmul_raw(val(*a).data(), g.data(), m, k, n))));
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).rows();
                    grads.push((*a, like(*a, matmul_raw(g.data(), val(*b).data(), m, n, k))));
                    grads.push((*b, like(*b, t_matmul_raw(g.data(), val(*a).data(), m, n, k))));
                }
                Op::Add(a, b) => {
                    grads.push((*a, g.clone()));
                    grads.push((*b, g));
                }
                Op::Sub(a, b) => {
                    let neg = g.data().iter().map(|v| -v).collect();
                    grads.push((*a, g.clone()));
                    grads.push((*b, like(*b, neg)));
                }
                Op::Mul(a, b) => {
                    let ga = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    grads.push((*a, like(*a, ga)));
                    grads.push((*b, like(*b, gb)));
                }
                Op::AddRow(x, row) => {
                    let c = val(*x).cols();
                    let mut gr = vec![0.0; c];
                    for (k, v) in g.data().iter().enumerate() {
                        gr[k % c] += v;
                    }
                    grads.push((*x, g));
                    grads.push((*row, like(*row, gr)));
                }
                Op::MulRow(x, row) => {
                    let c = val(*x).cols();
                    let r = val(*row).data();
                    let mut gr = vec![0.0; c];
                    let mut gx = vec![0.0; g.len()];
                    for (k, v) in g.data().iter().enumerate() {
                        gr[k % c] += v * val(*x).data()[k];
                        gx[k] = v * r[k % c];
                    }
                    grads.push((*x, like(*x, gx)));
                    grads.push((*row, like(*row, gr)));
                }
                Op::MulCol(x, col) => {
                    let c = val(*x).cols();
                    let cv = val(*col).data();
                    let mut gc = vec![0.0; cv.len()];
                    let mut gx = vec![0.0; g.len()];
                    for (k, v) in g.data().iter().enumerate() {
                        gc[k / c] += v * val(*x).data()[k];
                        gx[k] = v * cv[k / c];
                    }
                    grads.push((*x, like(*x, gx)));
                    grads.push((*col, like(*col, gc)));
                }
                Op::Scale(x, c) => {
                    grads.push((*x, like(*x, g.data().iter().map(|v| v * c).collect())));
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    grads.push((*x, like(*x, g.into_data())));
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let gx = g.data().iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Relu(x) => {
                    let xv = val(*x).data();
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx = g.data().iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let gx = g.data().iter().zip(y).map(|(d, y)| d * y).collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Log(x) => {
                    let xv = val(*x).data();
                    let gx = g.data().iter().zip(xv).map(|(d, x)| d / x).collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = val(*x).data();
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                        .collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    grads.push((*x, like(*x, gx)));
                }
                Op::ConcatCols(xs) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &x in xs {
                        let (r, c) = (val(x).rows(), val(x).cols());
                        let mut gx = Vec::with_capacity(r * c);
                        for row in 0..r {
                            gx.extend_from_slice(&g.data()[row * total + off..row * total + off + c]);
                        }
                        off += c;
                        grads.push((x, like(x, gx)));
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let n = val(x).len();
                        grads.push((x, like(x, g.data()[off..off + n].to_vec())));
                        off += n;
                    }
                }
                Op::Gather { table, rows } => {
                    let c = val(*table).cols();
                    let mut gt = vec![0.0; val(*table).len()];
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            for j in 0..c {
                                gt[r * c + j] += g.data()[k * c + j];
                            }
                        }
                    }
                    grads.push((*table, like(*table, gt)));
                }
                Op::Transpose(x) => {
                    let (r, c) = (val(*x).rows(), val(*x).cols());
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g.data()[j * r + i];
                        }
                    }
                    grads.push((*x, like(*x, gx)));
                }
                Op::SliceCols { x, start, end } => {
                    let (r, c) = (val(*x).rows(), val(*x).cols());
                    let w = end - start;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    grads.push((*x, like(*x, gx)));
                }
                Op::SliceRows { x, start, end } => {
                    let c = val(*x).cols();
                    let mut gx = vec![0.0; val(*x).len()];
                    gx[start * c..end * c].copy_from_slice(g.data());
                    grads.push((*x, like(*x, gx)));
                }
                Op::Sum(x) => {
                    grads.push((*x, like(*x, vec![g.item(); val(*x).len()])));
                }
                Op::Mean(x) => {
                    let n = val(*x).len() as f64;
                    grads.push((*x, like(*x, vec![g.item() / n; val(*x).len()])));
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    grads.push((*x, like(*x, gx)));
                }
                Op::MaskMul { x, mask } => {
                    let gx = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                    grads.push((*x, like(*x, gx)));
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&j| val(j)).collect();
                    let gs = op.backward(&ins, &node.value, &g)?;
                    if gs.len() != inputs.len() {
                        return Err(Error::shape(op.name(), "backward arity"));
                    }
                    for (&j, gj) in inputs.iter().zip(gs) {
                        if !gj.same_shape(val(j)) {
                            return Err(Error::shape(op.name(), "backward grad shape"));
                        }
                        grads.push((j, gj));
                    }
                }
            }
            for (j, gj) in grads {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = g.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(vec![0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![2.0, 2.0, 2.0]));
        let y = g.layer_norm(x, 1e-5);
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let z = g.input(Tensor::row(vec![0.3, -1.2, 2.0, 0.1]));
        let s = g.softmax(z).unwrap();
        let l = g.sum(s);
        g.backward(l, &mut store).unwrap();
        assert!(g.grad(z).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::row(vec![0.5, -0.25])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let x = g.input(Tensor::row(vec![1.5, 2.0]));
        let y = g.mul(w, x).unwrap();
        let t = g.tanh(y);
        let l = g.sum(t);
        g.backward(l, &mut store).unwrap();
        let once = store.grad(p).unwrap().clone();
        let once_x = g.grad(x).unwrap().clone();
        g.backward(l, &mut store).unwrap();
        let twice = store.grad(p).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        for (a, b) in once_x.data().iter().zip(g.grad(x).unwrap().data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x, &mut store),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_all_masked() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 5.0, 2.0]));
        let s = g.masked_softmax(x, Some(&[true, false, true])).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!(close(&[v[0] + v[2]], &[1.0], 1e-15));
        assert!(matches!(
            g.masked_softmax(x, Some(&[false, false, false])),
            Err(Error::AllMasked(_))
        ));
    }

    #[test]
    fn gather_pads_with_zero_rows() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let y = g.gather(t, &[Some(1), None, Some(0)]).unwrap();
        assert_eq!(g.value(y).data(), &[3., 4., 0., 0., 1., 2.]);
        assert!(g.gather(t, &[Some(2)]).is_err());
    }
}
