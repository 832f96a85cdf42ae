//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation is evaluated eagerly when it is pushed onto the tape, so
//! building a [`Graph`] *is* the forward pass. [`Graph::backward`] walks the
//! tape in reverse and returns a gradient for every reachable node.
//!
//! Tensors flowing through the graph are treated as matrices (the trailing
//! dimension is the column count). Parameters live in a [`ParamStore`] that the
//! graph borrows, so building a graph never copies weights.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, SurtError};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(t);
        i
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(n, t);
        }
        s
    }
}

/// Uniform init in ±1/√fan_in.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    MeanSquare(Var, Tensor),
    Sum(Var),
    External(Var, Tensor),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape bound to an optional parameter store.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    frozen: Vec<bool>,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
    first_non_finite: Option<usize>,
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            store: None,
            frozen: Vec::new(),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            first_non_finite: None,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            frozen: vec![false; store.len()],
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            first_non_finite: None,
        }
    }

    /// Treat every parameter matching `pred` as a constant.
    pub fn freeze(&mut self, pred: impl Fn(&str) -> bool) {
        if let Some(store) = self.store {
            for (i, f) in self.frozen.iter_mut().enumerate() {
                *f = *f || pred(store.name(i));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.store.expect("param node without store").tensor(*i),
        }
    }

    /// First computed node whose value overflowed or became NaN.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !matches!(op, Op::Leaf | Op::External(..)) && !value.all_finite() {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> SurtError {
        SurtError::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// A constant input (no gradient flows into it unless requested via
    /// [`Graph::input`]).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| SurtError::Config(format!("graph has no parameter store for {name}")))?;
        let id = store
            .id(name)
            .ok_or_else(|| SurtError::Config(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: !self.frozen[id],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (m, n) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(m, n, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + row` where `row` is `1×n`, broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(self.shape_err("add_row", format!("{m}x{n} + {:?}", self.dims(row))));
        }
        let mut t = self.value(a).clone().reshape(vec![m, n])?;
        let r = self.value(row).data();
        for i in 0..m {
            for (x, y) in t.row_mut(i).iter_mut().zip(r) {
                *x += y;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.requires_grad(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.requires_grad(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.requires_grad(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = src.row(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        }
        let rg = self.requires_grad(a);
        self.push(Tensor::matrix(m, n, out), Op::LogSoftmax(a), rg)
    }

    /// Row-wise log-sum-exp, producing an `m×1` column.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let (m, _) = self.dims(a);
        let src = self.value(a);
        let out = (0..m).map(|i| log_sum_exp(src.row(i))).collect();
        let rg = self.requires_grad(a);
        self.push(Tensor::matrix(m, 1, out), Op::LogSumExp(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(self.shape_err("gather_rows", format!("row {bad} out of {m}")));
        }
        if idx.is_empty() {
            return Err(self.shape_err("gather_rows", "empty index".into()));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(idx.len(), n, out), Op::GatherRows(a, idx), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(self.shape_err("concat_cols", "row counts differ".into()));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != n) {
            return Err(self.shape_err("concat_rows", "column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(self.shape_err("slice_cols", format!("{start}..{end} of {n}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src.row(i)[start..end]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::matrix(m, end - start, out), Op::SliceCols(a, start, end), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, _) = self.dims(a);
        if start >= end || end > m {
            return Err(self.shape_err("slice_rows", format!("{start}..{end} of {m}")));
        }
        let t = self.value(a).slice_rows(start, end);
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    /// Mean of `(a - target)²` over all entries, as a scalar.
    pub fn mean_square(&mut self, a: Var, target: Tensor) -> Result<Var> {
        let (m, n) = self.dims(a);
        if target.len() != m * n {
            return Err(self.shape_err(
                "mean_square",
                format!("{m}x{n} vs target {:?}", target.shape()),
            ));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(s / (m * n) as f64), Op::MeanSquare(a, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// A scalar node computed outside the graph: `value` is `f(a)` and `grad`
    /// is `∂f/∂a`, already evaluated.
    pub fn external(&mut self, a: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.len() != self.value(a).len() {
            return Err(self.shape_err("external", "gradient shape differs from input".into()));
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(value), Op::External(a, grad), rg))
    }

    /// Backpropagate from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let seed_shape = self.value(out).shape().to_vec();
        if self.value(out).len() != 1 {
            return Err(SurtError::NonScalarSeed(seed_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(&seed_shape, 1.0));

        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var(i));
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_nt_into(gd, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(av, gd, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, gy), bb) in ga.iter_mut().zip(gd).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), aa) in gb.iter_mut().zip(gd).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                let n = self.dims(*row).1;
                acc(*row, &mut |gr| {
                    for chunk in gd.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += s * y));
            }
            Op::Sigmoid(a) => {
                let yv = y.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), s) in ga.iter_mut().zip(gd).zip(yv) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = y.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), t) in ga.iter_mut().zip(gd).zip(yv) {
                        *x += gy * (1.0 - t * t);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = y.cols();
                let yv = y.data();
                acc(*a, &mut |ga| {
                    for ((gar, gr), yr) in ga.chunks_mut(n).zip(gd.chunks(n)).zip(yv.chunks(n)) {
                        let s: f64 = gr.iter().sum();
                        for ((x, gy), ly) in gar.iter_mut().zip(gr).zip(yr) {
                            *x += gy - ly.exp() * s;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let n = self.dims(*a).1;
                let av = self.value(*a).data();
                let yv = y.data();
                acc(*a, &mut |ga| {
                    for (r, (gar, ar)) in ga.chunks_mut(n).zip(av.chunks(n)).enumerate() {
                        for (x, v) in gar.iter_mut().zip(ar) {
                            *x += gd[r] * (v - yv[r]).exp();
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = y.cols();
                acc(*a, &mut |ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * n..(src + 1) * n], &gd[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &gd[r * n + off..r * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &gd[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, w) = (self.dims(*a).1, end - start);
                acc(*a, &mut |ga| {
                    for (r, row) in ga.chunks_mut(n).enumerate() {
                        add_into(&mut row[*start..*end], &gd[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.dims(*a).1;
                acc(*a, &mut |ga| add_into(&mut ga[start * n..start * n + gd.len()], gd));
            }
            Op::MeanSquare(a, target) => {
                let av = self.value(*a).data();
                let scale = 2.0 * gd[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((x, v), t) in ga.iter_mut().zip(av).zip(target.data()) {
                        *x += scale * (v - t);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += gd[0]));
            }
            Op::External(a, local) => {
                acc(*a, &mut |ga| {
                    for (x, l) in ga.iter_mut().zip(local.data()) {
                        *x += gd[0] * l;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

/// `ln Σ exp(xᵢ)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(eᵃ + eᵇ)`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; zero-shaped like the node if nothing reached it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// One entry per stored parameter. Frozen parameters get `None`;
    /// trainable parameters the output did not reach get zeros.
    pub fn param_grads(&self, graph: &Graph) -> ParamGrads {
        let Some(store) = graph.store else {
            return ParamGrads(Vec::new());
        };
        let grads = (0..store.len())
            .map(|id| {
                if graph.frozen[id] {
                    return None;
                }
                let g = graph
                    .param_nodes
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
                Some(g)
            })
            .collect();
        ParamGrads(grads)
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]; `None` marks a
/// frozen parameter that the optimizer must leave untouched.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads((0..store.len()).map(|i| Some(Tensor::zeros(store.tensor(i).shape()))).collect())
    }

    pub fn get(&self, store: &ParamStore, name: &str) -> Option<&Tensor> {
        store.id(name).and_then(|i| self.0[i].as_ref())
    }

    /// Accumulate `other` into `self`. A slot stays `None` only if it is
    /// `None` on both sides.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.0.is_empty() {
            self.0 = other.0.clone();
            return;
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.iter_mut().flatten() {
            t.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Linear warm-up to `peak`, then exponential decay by `decay` per step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak: lr,
            warmup_steps: 0,
            decay: 1.0,
        }
    }

    /// Learning rate for the 1-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps.max(1) as f64
        } else {
            self.peak * self.decay.powf((step - self.warmup_steps) as f64)
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub kind: OptimKind,
    pub schedule: LrSchedule,
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore, kind: OptimKind, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimState {
            kind,
            schedule,
            clip_norm: None,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One optimizer update. Frozen (`None`) gradients leave their parameter
/// bitwise unchanged.
pub fn optim_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut OptimState) -> Result<()> {
    if grads.0.len() != store.len() || state.first.len() != store.len() {
        return Err(SurtError::Tensor("gradient / parameter count mismatch".into()));
    }
    for (id, g) in grads.0.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != store.tensor(id).shape() {
                return Err(SurtError::Tensor(format!(
                    "gradient shape mismatch for {}",
                    store.name(id)
                )));
            }
            if !g.all_finite() {
                return Err(SurtError::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
    }
    let clip = match state.clip_norm {
        Some(c) => {
            let n = grads.global_norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let lr = state.schedule.lr(state.step);
    let t = state.step as f64;
    for (id, g) in grads.0.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = store.tensor_mut(id).data_mut();
        match state.kind {
            OptimKind::Sgd => {
                for (w, gv) in p.iter_mut().zip(g.data()) {
                    *w -= lr * clip * gv;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let m = state.first[id].data_mut();
                let v = state.second[id].data_mut();
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for i in 0..p.len() {
                    let gv = g.data()[i] * clip;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Central-difference check of an analytic gradient.
///
/// `f` returns the value and analytic gradient at a point. The result is the
/// maximum over coordinates of `|a − c| / (|a| + |c| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(SurtError::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(SurtError::NonFinite("grad_check base value".into()));
    }
    let mut worst = 0.0f64;
    let mut x = point.clone();
    for i in 0..point.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let (fp, _) = f(&x)?;
        x.data_mut()[i] = orig - eps;
        let (fm, _) = f(&x)?;
        x.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SurtError::NonFinite(format!("grad_check probe at coordinate {i}")));
        }
        let c = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - c).abs() / (a.abs() + c.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    /// Gradient check of a unary graph function `build(g, x) -> scalar`.
    fn check_unary(t: &Tensor, build: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let out = build(&mut g, v)?;
            let grads = g.backward(out)?;
            Ok((g.value(out).item(), grads.wrt(&g, v)))
        };
        grad_check(f, t, 1e-5).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let y = g.log_softmax(x);
        for &v in g.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 3);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(SurtError::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(&g, x).item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        store.insert("unused", Tensor::scalar(5.0));
        let mut g = Graph::with_params(&store);
        let _w = g.param("w").unwrap();
        let c = g.constant(Tensor::scalar(7.0));
        let y = g.sum(c);
        let grads = g.backward(y).unwrap().param_grads(&g);
        assert_eq!(grads.0[0].as_ref().unwrap().item(), 0.0);
        assert_eq!(grads.0[1].as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(SurtError::NonScalarSeed(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = rand_tensor(&mut rng, 1, 5);
        let target = 3;
        let mut g = Graph::new();
        let x = g.input(z.clone());
        let ls = g.log_softmax(x);
        let picked = g.slice_cols(ls, target, target + 1).unwrap();
        let nll = g.scale(picked, -1.0);
        let loss = g.sum(nll);
        let grad = g.backward(loss).unwrap().wrt(&g, x);
        let lse = log_sum_exp(z.data());
        for k in 0..5 {
            let expect = (z.data()[k] - lse).exp() - if k == target { 1.0 } else { 0.0 };
            assert!((grad.data()[k] - expect).abs() < 1e-14);
        }
        // and the finite-difference route agrees
        let err = check_unary(&z, |g, x| {
            let ls = g.log_softmax(x);
            let p = g.slice_cols(ls, target, target + 1)?;
            let n = g.scale(p, -1.0);
            Ok(g.sum(n))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&mut rng, 3, 4);
        let err = check_unary(&t, |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let a = rand_tensor(&mut rng, 3, 4);
            let w = rand_tensor(&mut rng, 4, 2);
            let row = rand_tensor(&mut rng, 1, 4);
            let other = rand_tensor(&mut rng, 3, 4);
            let target = rand_tensor(&mut rng, 3, 4);
            // weight the output so that sum-invariant ops still get a nontrivial gradient
            let weights = rand_tensor(&mut rng, 3, 4);
            let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
                ("matmul", Box::new(|g, x| {
                    let wv = g.constant(w.clone());
                    let y = g.matmul(x, wv)?;
                    Ok(g.sum(y))
                })),
                ("matmul_rhs", Box::new(|g, x| {
                    let av = g.constant(Tensor::matrix(2, 3, a.data()[..6].to_vec()));
                    let y = g.matmul(av, x)?;
                    let t = g.tanh(y);
                    Ok(g.sum(t))
                })),
                ("add_row", Box::new(|g, x| {
                    let r = g.constant(row.clone());
                    let y = g.add_row(x, r)?;
                    let y = g.tanh(y);
                    Ok(g.sum(y))
                })),
                ("add_row_bias", Box::new(|g, x| {
                    let base = g.constant(a.clone());
                    let r = g.slice_rows(x, 0, 1)?;
                    let y = g.add_row(base, r)?;
                    let y = g.sigmoid(y);
                    Ok(g.sum(y))
                })),
                ("sub_mul", Box::new(|g, x| {
                    let o = g.constant(other.clone());
                    let d = g.sub(o, x)?;
                    let p = g.mul(d, x)?;
                    Ok(g.sum(p))
                })),
                ("sigmoid", Box::new(|g, x| {
                    let y = g.sigmoid(x);
                    let wv = g.constant(weights.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                })),
                ("tanh", Box::new(|g, x| {
                    let y = g.tanh(x);
                    let wv = g.constant(weights.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                })),
                ("log_softmax", Box::new(|g, x| {
                    let y = g.log_softmax(x);
                    let wv = g.constant(weights.clone());
                    let p = g.mul(y, wv)?;
                    Ok(g.sum(p))
                })),
                ("log_sum_exp", Box::new(|g, x| {
                    let y = g.log_sum_exp(x);
                    let y = g.tanh(y);
                    Ok(g.sum(y))
                })),
                ("gather_concat_slice", Box::new(|g, x| {
                    let r = g.gather_rows(x, vec![2, 0, 2])?;
                    let c = g.concat_cols(&[r, r])?;
                    let s = g.slice_cols(c, 1, 6)?;
                    let rr = g.concat_rows(&[s, s])?;
                    let q = g.slice_rows(rr, 1, 5)?;
                    let t = g.tanh(q);
                    Ok(g.sum(t))
                })),
                ("mean_square", Box::new(|g, x| g.mean_square(x, target.clone()))),
                ("scale", Box::new(|g, x| {
                    let y = g.scale(x, -1.7);
                    let y = g.sigmoid(y);
                    Ok(g.sum(y))
                })),
            ];
            for (name, build) in cases {
                let err = check_unary(&a, build);
                assert!(err < 1e-6, "trial {trial} {name}: {err}");
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, 4, 4);
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(a.clone());
            let y = g.matmul(x, x).unwrap();
            let y = g.log_softmax(y);
            g.value(y).clone()
        };
        let (p, q) = (run(), run());
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn backward_is_linear_over_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let a = rand_tensor(&mut rng, 3, 3);
            let w = rand_tensor(&mut rng, 3, 3);
            let f1 = |g: &mut Graph, x: Var| -> Var {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv).unwrap();
                let y = g.tanh(y);
                g.sum(y)
            };
            let f2 = |g: &mut Graph, x: Var| -> Var {
                let y = g.sigmoid(x);
                let y = g.mul(y, x).unwrap();
                g.sum(y)
            };
            let grad_of = |which: u8| {
                let mut g = Graph::new();
                let x = g.input(a.clone());
                let out = match which {
                    1 => f1(&mut g, x),
                    2 => f2(&mut g, x),
                    _ => {
                        let p = f1(&mut g, x);
                        let q = f2(&mut g, x);
                        g.add(p, q).unwrap()
                    }
                };
                g.backward(out).unwrap().wrt(&g, x)
            };
            let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
            for i in 0..9 {
                assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::scalar(2.0));
        store.insert("b.w", Tensor::scalar(3.0));
        let mut g = Graph::with_params(&store);
        g.freeze(|n| n.starts_with("a."));
        let a = g.param("a.w").unwrap();
        let b = g.param("b.w").unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap().param_grads(&g);
        assert!(grads.0[0].is_none());
        assert_eq!(grads.0[1].as_ref().unwrap().item(), 2.0);
    }

    #[test]
    fn sgd_step_and_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut st = OptimState::new(&store, OptimKind::Sgd, LrSchedule::constant(0.1));
        optim_step(&mut store, &ParamGrads(vec![Some(Tensor::scalar(2.0))]), &mut st).unwrap();
        assert!((store.get("x").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(st.step, 1);

        let mut st = OptimState::new(&store, OptimKind::adam(), LrSchedule::constant(0.1));
        let before = store.clone();
        optim_step(&mut store, &ParamGrads(vec![Some(Tensor::scalar(0.0))]), &mut st).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let mut st = OptimState::new(&store, OptimKind::Sgd, LrSchedule::constant(0.1));
        let r = optim_step(&mut store, &ParamGrads(vec![Some(Tensor::scalar(f64::NAN))]), &mut st);
        assert!(matches!(r, Err(SurtError::NonFinite(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::row_vector(vec![3.0, -2.0, 0.5]));
        let centre = [1.0, 0.5, -1.0];
        let mut st = OptimState::new(&store, OptimKind::adam(), LrSchedule::constant(0.1));
        for _ in 0..200 {
            let p = store.get("p").unwrap().data().to_vec();
            let g: Vec<f64> = p.iter().zip(&centre).map(|(x, c)| 2.0 * (x - c)).collect();
            optim_step(&mut store, &ParamGrads(vec![Some(Tensor::row_vector(g))]), &mut st).unwrap();
        }
        let p = store.get("p").unwrap().data();
        for (x, c) in p.iter().zip(&centre) {
            assert!((x - c).abs() < 1e-2, "{x} vs {c}");
        }
    }

    #[test]
    fn warmup_then_decay() {
        let s = LrSchedule {
            peak: 0.004,
            warmup_steps: 100,
            decay: 0.99,
        };
        assert!((s.lr(50) - 0.002).abs() < 1e-15);
        assert!((s.lr(100) - 0.004).abs() < 1e-15);
        assert!((s.lr(101) - 0.004 * 0.99).abs() < 1e-15);
        assert!(s.lr(200) < s.lr(150));
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let f = |x: &Tensor| Ok((x.sum(), Tensor::filled(x.shape(), 1.0)));
        assert!(grad_check(f, &Tensor::scalar(1.0), 1e-2).is_err());
    }
}
