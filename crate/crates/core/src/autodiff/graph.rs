//! Define-by-run reverse-mode differentiation.
//!
//! Every op is evaluated eagerly when it is appended to the tape, so a
//! [`Graph`] is always fully evaluated. [`Graph::backward`] runs the numeric
//! reverse pass. [`Graph::grad`] instead appends the gradient computation to
//! the tape as ordinary ops, which lets a later `backward` differentiate
//! through a gradient (used by the critic's gradient penalty).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::optim::GradMap;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

// Some operands are only kept for `Debug` output.
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    SumRows(usize),
    BroadcastRows(usize, usize),
    RowSum(usize),
    BroadcastCols(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Square(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    BroadcastScalar(usize, Vec<usize>),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    RowNorm(usize),
    Step(usize, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::RowSum(_) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::RowNorm(_) => "row_norm",
            Op::Step(..) => "step",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::ConcatRows(xs) => xs.clone(),
            Op::Transpose(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::RowSum(a)
            | Op::BroadcastCols(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::BroadcastScalar(a, _)
            | Op::GatherRows(a, _)
            | Op::RowNorm(a)
            | Op::Step(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
    graph: u64,
}

impl Grads {
    /// Gradient of a named parameter, `None` if the loss never reached it.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&i| self.nodes[i].as_ref())
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.nodes.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient map over every bound parameter. Parameters the loss does
    /// not depend on get an all-zero gradient.
    pub fn into_param_map(mut self, shapes: impl Fn(&str) -> Vec<usize>) -> GradMap {
        let mut map = GradMap::new();
        for (name, &i) in &self.params {
            let g = self.nodes[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&shapes(name)));
            map.insert(name.clone(), g);
        }
        map
    }
}

/// Tape of eagerly evaluated operations.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
        }
    }

    /// Graph whose parameters are bound as constants (inference only).
    pub fn no_grad() -> Self {
        Graph {
            track_params: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            graph: self.id,
            idx,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.idx].value
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{} (node {idx})", op.name()),
            });
        }
        let requires_grad = match op {
            Op::Leaf | Op::Step(..) => false,
            _ => op.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(self.var(idx))
    }

    fn node_label(&self, op: &str) -> String {
        format!("{op} (node {})", self.nodes.len())
    }

    /// Leaf with an explicit gradient flag.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, t)?;
        self.nodes[v.idx].requires_grad = requires_grad;
        Ok(v)
    }

    /// Non-differentiable leaf. Panics on non-finite values.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
            .expect("constant tensors must be finite")
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// first leaf.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&i) = self.params.get(name) {
            return Ok(self.var(i));
        }
        let v = self.leaf(t.clone(), self.track_params)?;
        self.params.insert(name.to_string(), v.idx);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).map(|&i| self.var(i))
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (da, db) = (self.val(ia).dims2(), self.val(ib).dims2());
        if da.1 != db.0 {
            return Err(Error::shape(
                self.node_label("matmul"),
                format!("[{}, {}] x [{}, {}]", da.0, da.1, db.0, db.1),
            ));
        }
        let (out, m, n) = gemm(
            self.val(ia).data(),
            da,
            false,
            self.val(ib).data(),
            db,
            false,
        );
        self.push(Op::MatMul(ia, ib), Tensor::matrix(m, n, out)?)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).transpose();
        self.push(Op::Transpose(ia), t)
    }

    fn same_shape(&self, op: &str, ia: usize, ib: usize) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(
                self.node_label(op),
                format!("{:?} vs {:?}", self.val(ia).shape(), self.val(ib).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("add", ia, ib)?;
        let t = self.val(ia).zip_map(self.val(ib), |x, y| x + y)?;
        self.push(Op::Add(ia, ib), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("sub", ia, ib)?;
        let t = self.val(ia).zip_map(self.val(ib), |x, y| x - y)?;
        self.push(Op::Sub(ia, ib), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape("mul", ia, ib)?;
        let t = self.val(ia).zip_map(self.val(ib), |x, y| x * y)?;
        self.push(Op::Mul(ia, ib), t)
    }

    fn row_broadcast(&self, op: &str, ia: usize, ib: usize) -> Result<(usize, usize)> {
        let (r, c) = self.val(ia).dims2();
        let b = self.val(ib);
        let ok = self.val(ia).rank() == 2
            && b.len() == c
            && (b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1));
        if !ok {
            return Err(Error::shape(
                self.node_label(op),
                format!("{:?} with row {:?}", self.val(ia).shape(), b.shape()),
            ));
        }
        Ok((r, c))
    }

    /// `a + b` with the row vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (r, c) = self.row_broadcast("add_row", ia, ib)?;
        let (av, bv) = (self.val(ia).data(), self.val(ib).data());
        let mut data = Vec::with_capacity(r * c);
        for row in av.chunks_exact(c) {
            data.extend(row.iter().zip(bv).map(|(x, y)| x + y));
        }
        self.push(Op::AddRow(ia, ib), Tensor::matrix(r, c, data)?)
    }

    /// `a * b` with the row vector `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (r, c) = self.row_broadcast("mul_row", ia, ib)?;
        let (av, bv) = (self.val(ia).data(), self.val(ib).data());
        let mut data = Vec::with_capacity(r * c);
        for row in av.chunks_exact(c) {
            data.extend(row.iter().zip(bv).map(|(x, y)| x * y));
        }
        self.push(Op::MulRow(ia, ib), Tensor::matrix(r, c, data)?)
    }

    /// Column sums, `[n, m] -> [1, m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = col_sums(self.val(ia));
        self.push(Op::SumRows(ia), t)
    }

    /// Repeats a `[1, m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.val(ia).dims2();
        if r != 1 || n == 0 {
            return Err(Error::shape(
                self.node_label("broadcast_rows"),
                format!("expected a single row, got {:?}", self.val(ia).shape()),
            ));
        }
        let row = self.val(ia).data().to_vec();
        let data = row.iter().copied().cycle().take(n * c).collect();
        self.push(Op::BroadcastRows(ia, n), Tensor::matrix(n, c, data)?)
    }

    /// Row sums, `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = row_sums(self.val(ia));
        self.push(Op::RowSum(ia), t)
    }

    /// Repeats a `[n, 1]` column `m` times.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.val(ia).dims2();
        if c != 1 || m == 0 {
            return Err(Error::shape(
                self.node_label("broadcast_cols"),
                format!("expected a single column, got {:?}", self.val(ia).shape()),
            ));
        }
        let col = self.val(ia).data();
        let data = (0..r * m).map(|k| col[k / m]).collect();
        self.push(Op::BroadcastCols(ia, m), Tensor::matrix(r, m, data)?)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| k * x);
        self.push(Op::Scale(ia, k), t)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| x + k);
        self.push(Op::AddScalar(ia, k), t)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| x * x);
        self.push(Op::Square(ia), t)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(ia), t)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(ia, slope), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(sigmoid);
        self.push(Op::Sigmoid(ia), t)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(f64::tanh);
        self.push(Op::Tanh(ia), t)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = softmax_rows(self.val(ia));
        self.push(Op::Softmax(ia), t)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = log_softmax_rows(self.val(ia));
        self.push(Op::LogSoftmax(ia), t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).sum();
        self.push(Op::Sum(ia), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if self.val(ia).len() != 1 {
            return Err(Error::shape(
                self.node_label("broadcast_scalar"),
                format!("expected a scalar, got {:?}", self.val(ia).shape()),
            ));
        }
        let t = Tensor::full(shape, self.val(ia).item());
        self.push(Op::BroadcastScalar(ia, shape.to_vec()), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let ((ra, ca), (rb, cb)) = (self.val(ia).dims2(), self.val(ib).dims2());
        if ra != rb {
            return Err(Error::shape(
                self.node_label("concat_cols"),
                format!("{ra} rows vs {rb} rows"),
            ));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.val(ia).row_slice(r));
            data.extend_from_slice(self.val(ib).row_slice(r));
        }
        self.push(Op::ConcatCols(ia, ib), Tensor::matrix(ra, ca + cb, data)?)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let cols = self.val(first).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let (r, c) = self.val(i).dims2();
            if c != cols {
                return Err(Error::shape(
                    self.node_label("concat_rows"),
                    format!("{c} cols vs {cols} cols"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.val(i).data());
        }
        self.push(Op::ConcatRows(idx), Tensor::matrix(rows, cols, data)?)
    }

    /// Embedding lookup: row `indices[k]` of `table` becomes output row `k`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let (r, _) = self.val(it).dims2();
        if let Some(&bad) = indices.iter().find(|&&k| k >= r) {
            return Err(Error::shape(
                self.node_label("gather_rows"),
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather_rows of no rows".into()));
        }
        let t = self.val(it).select_rows(indices);
        self.push(Op::GatherRows(it, indices.to_vec()), t)
    }

    /// Euclidean norm of each row, `[n, m] -> [n, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, _) = self.val(ia).dims2();
        let data = (0..r)
            .map(|i| {
                let row = self.val(ia).row_slice(i);
                row.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .collect();
        self.push(Op::RowNorm(ia), Tensor::matrix(r, 1, data)?)
    }

    /// Derivative of (leaky) relu as a constant: 1 where `a > 0`, else `slope`.
    pub fn step(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).map(|x| if x > 0.0 { 1.0 } else { slope });
        self.push(Op::Step(ia, slope), t)
    }

    /// Affine layer `x w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    // ----- reverse pass ----------------------------------------------------

    /// Numeric reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let il = self.check(loss)?;
        if self.val(il).len() != 1 || self.val(il).rank() > 1 {
            return Err(Error::NotScalar(self.val(il).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[il].requires_grad {
            grads[il] = Some(Tensor::full(self.val(il).shape(), 1.0));
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            for (j, dj) in self.vjp(i, &g) {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(dj.data())
                        .for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dj),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            nodes: grads,
            params: self.params.clone(),
            graph: self.id,
        })
    }

    /// Backward pass collected into a parameter-name map.
    pub fn param_grads(&self, loss: Var) -> Result<GradMap> {
        let grads = self.backward(loss)?;
        Ok(grads.into_param_map(|name| {
            self.params
                .get(name)
                .map(|&i| self.val(i).shape().to_vec())
                .unwrap_or_default()
        }))
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Step(..) => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let gd = g.dims2();
                let (da, m, k) = gemm(g.data(), gd, false, bv.data(), bv.dims2(), true);
                let (db, k2, n) = gemm(av.data(), av.dims2(), true, g.data(), gd, false);
                vec![
                    (*a, Tensor::matrix(m, k, da).expect("matmul grad")),
                    (*b, Tensor::matrix(k2, n, db).expect("matmul grad")),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, mul_like(g, self.val(*b))),
                (*b, mul_like(g, self.val(*a))),
            ],
            Op::AddRow(a, b) => {
                let db = col_sums(g);
                vec![(*a, g.clone()), (*b, reshape_like(db, self.val(*b)))]
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (_, c) = g.dims2();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * bv.data()[k % c])
                    .collect();
                let mut db = vec![0.0; c];
                for (k, (&gk, &ak)) in g.data().iter().zip(av.data()).enumerate() {
                    db[k % c] += gk * ak;
                }
                vec![
                    (
                        *a,
                        Tensor::new(av.shape().to_vec(), da).expect("mul_row grad"),
                    ),
                    (
                        *b,
                        Tensor::new(bv.shape().to_vec(), db).expect("mul_row grad"),
                    ),
                ]
            }
            Op::SumRows(a) => {
                let (r, c) = self.val(*a).dims2();
                let data = g.data().iter().copied().cycle().take(r * c).collect();
                vec![(
                    *a,
                    Tensor::new(self.val(*a).shape().to_vec(), data).expect("grad"),
                )]
            }
            Op::BroadcastRows(a, _) => {
                vec![(*a, reshape_like(col_sums(g), self.val(*a)))]
            }
            Op::RowSum(a) => {
                let (r, c) = self.val(*a).dims2();
                let data = (0..r * c).map(|k| g.data()[k / c]).collect();
                vec![(*a, Tensor::matrix(r, c, data).expect("row_sum grad"))]
            }
            Op::BroadcastCols(a, _) => vec![(*a, row_sums(g))],
            Op::Scale(a, k) => vec![(*a, g.map(|x| k * x))],
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::Square(a) => {
                let t = g
                    .zip_map(self.val(*a), |gk, ak| 2.0 * ak * gk)
                    .expect("square grad");
                vec![(*a, t)]
            }
            Op::Relu(a) => {
                let t = g
                    .zip_map(self.val(*a), |gk, ak| if ak > 0.0 { gk } else { 0.0 })
                    .expect("relu grad");
                vec![(*a, t)]
            }
            Op::LeakyRelu(a, s) => {
                let t = g
                    .zip_map(self.val(*a), |gk, ak| if ak > 0.0 { gk } else { s * gk })
                    .expect("leaky grad");
                vec![(*a, t)]
            }
            Op::Sigmoid(a) => {
                let t = g.zip_map(y, |gk, yk| gk * yk * (1.0 - yk)).expect("grad");
                vec![(*a, t)]
            }
            Op::Tanh(a) => {
                let t = g.zip_map(y, |gk, yk| gk * (1.0 - yk * yk)).expect("grad");
                vec![(*a, t)]
            }
            Op::Softmax(a) => {
                let (r, c) = y.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), d).expect("grad"))]
            }
            Op::LogSoftmax(a) => {
                let (r, c) = y.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), d).expect("grad"))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.val(*a).shape(), g.item()))],
            Op::BroadcastScalar(a, _) => {
                vec![(*a, Tensor::full(self.val(*a).shape(), g.sum()))]
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.val(*a).dims2().1, self.val(*b).dims2().1);
                let (r, _) = g.dims2();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row_slice(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                vec![
                    (
                        *a,
                        Tensor::new(self.val(*a).shape().to_vec(), da).expect("grad"),
                    ),
                    (
                        *b,
                        Tensor::new(self.val(*b).shape().to_vec(), db).expect("grad"),
                    ),
                ]
            }
            Op::ConcatRows(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    let t = Tensor::new(
                        self.val(p).shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    )
                    .expect("grad");
                    offset += n;
                    out.push((p, t));
                }
                out
            }
            Op::GatherRows(table, rows) => {
                let tv = self.val(*table);
                let (_, c) = tv.dims2();
                let mut d = vec![0.0; tv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*table, Tensor::new(tv.shape().to_vec(), d).expect("grad"))]
            }
            Op::RowNorm(a) => {
                let av = self.val(*a);
                let (r, c) = av.dims2();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let n = y.data()[i];
                    if n > 0.0 {
                        let gi = g.data()[i];
                        for j in 0..c {
                            d[i * c + j] = gi * av.data()[i * c + j] / n;
                        }
                    }
                }
                vec![(*a, Tensor::new(av.shape().to_vec(), d).expect("grad"))]
            }
        }
    }

    /// Appends the gradient of `sum(output)` with respect to each of `wrt`
    /// to the tape, returning differentiable gradient nodes.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let io = self.check(output)?;
        let targets = wrt
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        let mut depends = vec![false; io + 1];
        for i in 0..=io {
            depends[i] = targets.contains(&i)
                || self.nodes[i].op.inputs().iter().any(|&j| depends[j])
                    && !matches!(self.nodes[i].op, Op::Step(..));
        }
        let mut grads: BTreeMap<usize, Var> = BTreeMap::new();
        let seed = self.constant(Tensor::full(self.val(io).shape(), 1.0));
        grads.insert(io, seed);
        for i in (0..=io).rev() {
            if !depends[i] || targets.contains(&i) && self.nodes[i].op.inputs().is_empty() {
                continue;
            }
            let Some(&g) = grads.get(&i) else { continue };
            let op = self.nodes[i].op.clone();
            for (j, dj) in self.vjp_symbolic(i, &op, g)? {
                if !depends[j] {
                    continue;
                }
                let acc = match grads.get(&j) {
                    Some(&prev) => self.add(prev, dj)?,
                    None => dj,
                };
                grads.insert(j, acc);
            }
        }
        targets
            .iter()
            .map(|&t| match grads.get(&t) {
                Some(&g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.val(t).shape()))),
            })
            .collect()
    }

    /// Row-wise L2 norm of d sum(output) / d input, kept differentiable.
    pub fn grad_norm(&mut self, output: Var, input: Var) -> Result<Var> {
        let g = self.grad(output, &[input])?[0];
        self.row_norm(g)
    }

    fn vjp_symbolic(&mut self, i: usize, op: &Op, g: Var) -> Result<Vec<(usize, Var)>> {
        let v = |s: &Self, k: usize| s.var(k);
        Ok(match *op {
            Op::Leaf | Op::Step(..) => vec![],
            Op::MatMul(a, b) => {
                let bt = self.transpose(v(self, b))?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(v(self, a))?;
                let db = self.matmul(at, g)?;
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.neg(g)?)],
            Op::Mul(a, b) => {
                let da = self.mul(g, v(self, b))?;
                let db = self.mul(g, v(self, a))?;
                vec![(a, da), (b, db)]
            }
            Op::AddRow(a, b) => {
                let db = self.sum_rows(g)?;
                vec![(a, g), (b, self.reshape_row_like(db, b)?)]
            }
            Op::MulRow(a, b) => {
                let da = self.mul_row(g, v(self, b))?;
                let ga = self.mul(g, v(self, a))?;
                let db = self.sum_rows(ga)?;
                vec![(a, da), (b, self.reshape_row_like(db, b)?)]
            }
            Op::SumRows(a) => {
                let n = self.val(a).dims2().0;
                vec![(a, self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(a, _) => vec![(a, self.sum_rows(g)?)],
            Op::RowSum(a) => {
                let m = self.val(a).dims2().1;
                vec![(a, self.broadcast_cols(g, m)?)]
            }
            Op::BroadcastCols(a, _) => vec![(a, self.row_sum(g)?)],
            Op::Scale(a, k) => vec![(a, self.scale(g, k)?)],
            Op::AddScalar(a, _) => vec![(a, g)],
            Op::Square(a) => {
                let two_a = self.scale(v(self, a), 2.0)?;
                vec![(a, self.mul(g, two_a)?)]
            }
            Op::Relu(a) => {
                let s = self.step(v(self, a), 0.0)?;
                vec![(a, self.mul(g, s)?)]
            }
            Op::LeakyRelu(a, slope) => {
                let s = self.step(v(self, a), slope)?;
                vec![(a, self.mul(g, s)?)]
            }
            Op::Sigmoid(a) => {
                let y = v(self, i);
                let neg = self.scale(y, -1.0)?;
                let one_minus = self.add_scalar(neg, 1.0)?;
                let d = self.mul(y, one_minus)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Tanh(a) => {
                let y = v(self, i);
                let y2 = self.square(y)?;
                let neg = self.scale(y2, -1.0)?;
                let d = self.add_scalar(neg, 1.0)?;
                vec![(a, self.mul(g, d)?)]
            }
            Op::Sum(a) => {
                let shape = self.val(a).shape().to_vec();
                vec![(a, self.broadcast_scalar(g, &shape)?)]
            }
            Op::BroadcastScalar(a, _) => {
                let s = self.sum(g)?;
                let shape = self.val(a).shape().to_vec();
                if shape.is_empty() {
                    vec![(a, s)]
                } else {
                    vec![(a, self.broadcast_scalar(s, &shape)?)]
                }
            }
            Op::Softmax(_) => return Err(Error::Unsupported("softmax")),
            Op::LogSoftmax(_) => return Err(Error::Unsupported("log_softmax")),
            Op::ConcatCols(..) => return Err(Error::Unsupported("concat_cols")),
            Op::ConcatRows(_) => return Err(Error::Unsupported("concat_rows")),
            Op::GatherRows(..) => return Err(Error::Unsupported("gather_rows")),
            Op::RowNorm(_) => return Err(Error::Unsupported("row_norm")),
        })
    }

    /// `sum_rows` yields `[1, m]`; there is no reshape op for rank-1 rows.
    fn reshape_row_like(&mut self, d: Var, like: usize) -> Result<Var> {
        if self.val(like).rank() == 1 {
            return Err(Error::Unsupported("rank-1 row operand"));
        }
        Ok(d)
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

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row_slice(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            z += e;
        }
        for v in &mut out[i * c..(i + 1) * c] {
            *v /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax")
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row_slice(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("log_softmax")
}

fn col_sums(t: &Tensor) -> Tensor {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn row_sums(t: &Tensor) -> Tensor {
    let (r, _) = t.dims2();
    let data = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
    Tensor::matrix(r, 1, data).expect("row sums")
}

fn mul_like(g: &Tensor, other: &Tensor) -> Tensor {
    g.zip_map(other, |a, b| a * b).expect("elementwise grad")
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    t.reshape(like.shape().to_vec()).expect("row grad")
}
