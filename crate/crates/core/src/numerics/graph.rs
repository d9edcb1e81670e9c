//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! the backward sweep is a single reverse walk.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    SumCols(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros when the node does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.by_node[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// Gradients for every parameter bound on the graph, keyed by name.
    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(n, &v)| (n.clone(), self.wrt(v))).collect()
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives a named gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Binds a trainable parameter. Repeated binds of the same name share one node.
    pub fn param(&mut self, store: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Index(format!("unknown parameter {name}")))?
            .clone();
        let v = self.constant(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a parameter as trainable or as a frozen constant.
    pub fn bind(&mut self, store: &ParamSet, name: &str, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(store, name)
        } else {
            let t = store
                .get(name)
                .ok_or_else(|| Error::Index(format!("unknown parameter {name}")))?;
            Ok(self.constant(t.clone()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (n, k) = x.dims2();
        let (k2, m) = y.dims2();
        if k != k2 {
            return Err(shape_err("matmul", x, y));
        }
        let out = Tensor::new(vec![n, m], matmul_raw(x.data(), y.data(), n, k, m))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims2() != y.dims2() {
            return Err(shape_err("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims2() != y.dims2() {
            return Err(shape_err("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dims2() != y.dims2() {
            return Err(shape_err("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `[n × m] + [1 × m]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (n, m) = x.dims2();
        if r.dims2() != (1, m) {
            return Err(shape_err("add_row", x, r));
        }
        let mut data = x.data().to_vec();
        for i in 0..n {
            for (o, b) in data[i * m..(i + 1) * m].iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::AddRow(a, row), "add_row")
    }

    /// `[n × m] ∘ [1 × m]`, broadcasting the row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let (n, m) = x.dims2();
        if r.dims2() != (1, m) {
            return Err(shape_err("mul_row", x, r));
        }
        let mut data = x.data().to_vec();
        for i in 0..n {
            for (o, b) in data[i * m..(i + 1) * m].iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::MulRow(a, row), "mul_row")
    }

    /// Tensor times a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        if sv.len() != 1 {
            return Err(shape_err("mul_scalar", x, sv));
        }
        let c = sv.item();
        let out = x.map(|v| v * c);
        self.push(out, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddConst(a), "add_const")
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.len() != c.len() {
            return Err(shape_err("mul_const", x, c));
        }
        let out = x.zip_map(c, |p, q| p * q);
        self.push(out, Op::MulConst(a, c.clone()), "mul_const")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    /// `log(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2();
        let mut data = x.data().to_vec();
        for i in 0..n {
            softmax_in_place(&mut data[i * m..(i + 1) * m]);
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::SoftmaxRows(a), "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2();
        let mut data = x.data().to_vec();
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`; the affine part lives in the caller.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2();
        let mut data = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut data[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(
            Tensor::new(vec![n, m], data)?,
            Op::NormalizeRows { x: a, inv_std },
            "normalize_rows",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let n = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_rows"))?;
        let m = self.value(*first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != m) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let v = self.value(p);
            n += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2();
        if start >= end || end > m {
            return Err(Error::Index(format!("slice_cols {start}..{end} of {m}")));
        }
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        self.push(Tensor::new(vec![n, end - start], data)?, Op::SliceCols(a, start), "slice_cols")
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = x.dims2();
        if start >= end || end > n {
            return Err(Error::Index(format!("slice_rows {start}..{end} of {n}")));
        }
        let data = x.data()[start * m..end * m].to_vec();
        self.push(Tensor::new(vec![end - start, m], data)?, Op::SliceRows(a, start), "slice_rows")
    }

    /// Row gather; the backward pass scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("id {id} outside table of {v} rows")));
            }
            data.extend_from_slice(t.row_slice(id));
        }
        self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Gather(table, ids.to_vec()), "gather")
    }

    /// Column-wise mean over rows, `[n × d] → [1 × d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, d) = x.dims2();
        if n == 0 {
            return Err(Error::EmptySequence("mean_rows"));
        }
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (o, v) in data.iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        self.push(Tensor::row(data), Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptySequence("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, `[n × m] → [n × 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, _) = x.dims2();
        let data = (0..n).map(|i| x.row_slice(i).iter().sum()).collect();
        self.push(Tensor::new(vec![n, 1], data)?, Op::SumCols(a), "sum_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }

        Ok(Gradients {
            by_node: grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor| {
            let slot = &mut grads[v.0];
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g.reshape(self.nodes[v.0].value.shape()).unwrap_or(g)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k) = av.dims2();
                let m = bv.cols();
                let bt = transpose_raw(bv.data(), k, m);
                let da = matmul_raw(dy.data(), &bt, n, m, k);
                let at = transpose_raw(av.data(), n, k);
                let db = matmul_raw(&at, dy.data(), k, n, m);
                acc(*a, Tensor::new(vec![n, k], da)?);
                acc(*b, Tensor::new(vec![k, m], db)?);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, dy.zip_map(bv, |g, q| g * q));
                acc(*b, dy.zip_map(av, |g, p| g * p));
            }
            Op::AddRow(a, row) => {
                let (n, m) = dy.dims2();
                acc(*a, dy.clone());
                acc(*row, Tensor::row(col_sums(dy.data(), n, m)));
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let (n, m) = dy.dims2();
                let mut da = dy.data().to_vec();
                let mut dr = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        let g = dy.data()[i * m + j];
                        da[i * m + j] = g * rv.data()[j];
                        dr[j] += g * av.data()[i * m + j];
                    }
                }
                acc(*a, Tensor::new(vec![n, m], da)?);
                acc(*row, Tensor::row(dr));
            }
            Op::MulScalar(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                acc(*a, dy.map(|g| g * sv.item()));
                acc(*s, Tensor::scalar(dy.dot(av)));
            }
            Op::Scale(a, c) => acc(*a, dy.map(|g| g * c)),
            Op::AddConst(a) => acc(*a, dy.clone()),
            Op::MulConst(a, c) => acc(*a, dy.zip_map(c, |g, q| g * q)),
            Op::Tanh(a) => acc(*a, dy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => acc(*a, dy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Softplus(a) => acc(*a, dy.zip_map(self.value(*a), |g, x| g * sigmoid(x))),
            Op::Log(a) => acc(*a, dy.zip_map(self.value(*a), |g, x| g / x)),
            Op::SoftmaxRows(a) => {
                let (n, m) = y.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let (yr, gr) = (&y.data()[i * m..(i + 1) * m], &dy.data()[i * m..(i + 1) * m]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..m {
                        dx[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::new(vec![n, m], dx)?);
            }
            Op::LogSoftmaxRows(a) => {
                let (n, m) = y.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let (yr, gr) = (&y.data()[i * m..(i + 1) * m], &dy.data()[i * m..(i + 1) * m]);
                    let gs: f64 = gr.iter().sum();
                    for j in 0..m {
                        dx[i * m + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(*a, Tensor::new(vec![n, m], dx)?);
            }
            Op::NormalizeRows { x, inv_std } => {
                let (n, m) = y.dims2();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let (yr, gr) = (&y.data()[i * m..(i + 1) * m], &dy.data()[i * m..(i + 1) * m]);
                    let mg = gr.iter().sum::<f64>() / m as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, v)| g * v).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dx[i * m + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(*x, Tensor::new(vec![n, m], dx)?);
            }
            Op::Transpose(a) => acc(*a, dy.transpose()),
            Op::ConcatCols(parts) => {
                let (n, total) = dy.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, Tensor::new(vec![n, w], d)?);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let d = dy.data()[offset * m..(offset + r) * m].to_vec();
                    acc(p, Tensor::new(vec![r, m], d)?);
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.value(*a).dims2();
                let w = dy.cols();
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + start + w].copy_from_slice(dy.row_slice(i));
                }
                acc(*a, Tensor::new(vec![n, m], d)?);
            }
            Op::SliceRows(a, start) => {
                let (n, m) = self.value(*a).dims2();
                let mut d = vec![0.0; n * m];
                d[start * m..start * m + dy.len()].copy_from_slice(dy.data());
                acc(*a, Tensor::new(vec![n, m], d)?);
            }
            Op::Gather(table, ids) => {
                let (v, d) = self.value(*table).dims2();
                let mut g = vec![0.0; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, s) in g[id * d..(id + 1) * d].iter_mut().zip(dy.row_slice(r)) {
                        *o += s;
                    }
                }
                acc(*table, Tensor::new(vec![v, d], g)?);
            }
            Op::MeanRows(a) => {
                let (n, d) = self.value(*a).dims2();
                let mut g = Vec::with_capacity(n * d);
                for _ in 0..n {
                    g.extend(dy.data().iter().map(|v| v / n as f64));
                }
                acc(*a, Tensor::new(vec![n, d], g)?);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::full(&shape, dy.item()));
            }
            Op::SumCols(a) => {
                let (n, m) = self.value(*a).dims2();
                let mut g = Vec::with_capacity(n * m);
                for i in 0..n {
                    g.extend(std::iter::repeat_n(dy.data()[i], m));
                }
                acc(*a, Tensor::new(vec![n, m], g)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, dy.reshape(&shape)?);
            }
        }
        Ok(())
    }
}

fn col_sums(data: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&data[i * m..(i + 1) * m]) {
            *o += v;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter_mut().for_each(|v| *v = (*v - max).exp());
    let s: f64 = xs.iter().sum();
    xs.iter_mut().for_each(|v| *v /= s);
}
