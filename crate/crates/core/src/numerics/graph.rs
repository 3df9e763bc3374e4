//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]. Nodes are stored in
//! creation order, which is a topological order, so [`Graph::backward`]
//! simply walks the tape from the loss back to the first node. Gradients
//! of nodes with several consumers are summed.
//!
//! Shapes are checked on every op. The only implicit broadcast is
//! [`Graph::add_bias`], which adds a vector to every row of a matrix.
//!
//! ```
//! use las::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

use super::tensor::{log_softmax, sigmoid, softmax, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Conv1d(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRow(Var, usize),
    StackRows(Vec<Var>),
    Pick(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the operations of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every node created after the first `len`. Handles to the
    /// dropped nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient accumulated by the last [`Graph::backward`] call, if the
    /// node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product. A 1-D left operand of length `k` is treated as a
    /// `1×k` row and yields a 1-D result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = match av.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            s => return Err(Error::dim("matmul", format!("left operand {s:?} is not 1-D or 2-D"))),
        };
        let n = match bv.shape() {
            [kb, n] if *kb == k => *n,
            s => {
                return Err(Error::dim(
                    "matmul",
                    format!("cannot multiply {:?} by {s:?}", av.shape()),
                ))
            }
        };
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let shape: Vec<usize> = if av.ndim() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data).expect("shape preserved");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    /// Adds vector `b[n]` to every row of `a[m×n]` (or to `a[n]`).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = match self.shape(b) {
            [n] => *n,
            s => return Err(Error::dim("add_bias", format!("bias must be 1-D, got {s:?}"))),
        };
        if *self.shape(a).last().unwrap() != n || self.value(a).ndim() > 2 {
            return Err(Error::dim(
                "add_bias",
                format!("cannot add bias {:?} to {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::AddBias(a, b), rg))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(Op::Scale(a, k), a, |x| k * x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        Ok(self.unary(Op::Log(a), a, f64::ln))
    }

    fn rowwise(&mut self, op: Op, a: Var, f: fn(&[f64]) -> Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() > 2 {
            return Err(Error::dim("softmax", format!("expected 1-D or 2-D, got {:?}", av.shape())));
        }
        if !av.all_finite() {
            return Err(Error::Numeric("softmax over non-finite values".into()));
        }
        let c = last_dim(av);
        let data: Vec<f64> = av.data().chunks(c).flat_map(f).collect();
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(Op::Softmax(a), a, softmax)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(Op::LogSoftmax(a), a, log_softmax)
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "nothing to concatenate"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 1 {
                return Err(Error::dim("concat", format!("expected 1-D parts, got {:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// `a[start..start + len]` of a 1-D vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 1 || len == 0 || start + len > av.len() {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} out of {:?}", start + len, av.shape()),
            ));
        }
        let value = Tensor::vector(av.data()[start..start + len].to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sums a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| Error::dim("add_all", "no terms"))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Centered 1-D convolution with zero padding.
    ///
    /// `signal[T]` convolved with `filters[k×r]` (odd `r`) gives
    /// `out[t][f] = Σ_d filters[f][d + (r-1)/2] · signal[t + d]`
    /// for `d` in `-(r-1)/2 ..= (r-1)/2`.
    pub fn conv1d(&mut self, signal: Var, filters: Var) -> Result<Var> {
        let sv = self.value(signal);
        let fv = self.value(filters);
        if sv.ndim() != 1 || fv.ndim() != 2 {
            return Err(Error::dim(
                "conv1d",
                format!("expected signal[T] and filters[k×r], got {:?} and {:?}", sv.shape(), fv.shape()),
            ));
        }
        let (k, r) = (fv.rows(), fv.cols());
        if r % 2 == 0 {
            return Err(Error::Config(format!("convolution width must be odd, got {r}")));
        }
        let t_len = sv.len();
        let half = (r / 2) as isize;
        let s = sv.data();
        let f = fv.data();
        let mut out = vec![0.0; t_len * k];
        for t in 0..t_len {
            for fi in 0..k {
                let mut acc = 0.0;
                for d in -half..=half {
                    let idx = t as isize + d;
                    if idx >= 0 && (idx as usize) < t_len {
                        acc += f[fi * r + (d + half) as usize] * s[idx as usize];
                    }
                }
                out[t * k + fi] = acc;
            }
        }
        let value = Tensor::new(&[t_len, k], out)?;
        let rg = self.rg(&[signal, filters]);
        Ok(self.push(value, Op::Conv1d(signal, filters), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = match av.shape() {
            [m, n] => (*m, *n),
            s => return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}"))),
        };
        let value = Tensor::new(&[n, m], transpose_raw(av.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Row `i` of a matrix, as a vector. The gradient flows into that row only.
    pub fn gather_row(&mut self, table: Var, i: usize) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::dim("gather_row", format!("expected 2-D, got {:?}", tv.shape())));
        }
        if i >= tv.rows() {
            return Err(Error::Vocabulary {
                id: i,
                size: tv.rows(),
            });
        }
        let value = Tensor::vector(tv.row(i).to_vec());
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRow(table, i), rg))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| Error::dim("stack_rows", "no rows"))?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.ndim() != 1 || v.len() != n {
                return Err(Error::dim(
                    "stack_rows",
                    format!("row of shape {:?} does not match length {n}", v.shape()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows.len(), n], data)?;
        let rg = self.rg(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Element `i` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 1 || i >= av.len() {
            return Err(Error::dim("pick", format!("index {i} out of {:?}", av.shape())));
        }
        let value = Tensor::scalar(av.data()[i]);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Pick(a, i), rg))
    }

    /// Reverse pass from a single-element `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must hold one element, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::scalar(1.0).reshaped(self.shape(loss))?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(&shape, delta).expect("gradient shape matches value"));
            }
        }
    }

    fn accumulate_at(&mut self, v: Var, offset: usize, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            let shape = self.nodes[v.0].value.shape().to_vec();
            self.grads[v.0] = Some(Tensor::zeros(&shape));
        }
        let g = self.grads[v.0].as_mut().unwrap().data_mut();
        for (a, d) in g[offset..offset + delta.len()].iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn propagate(&mut self, i: usize, gout: &Tensor) {
        let go = gout.data();
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let k = bv.rows();
                let n = bv.cols();
                let m = av.len() / k;
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let da = need_a.then(|| {
                    let bt = transpose_raw(bv.data(), k, n);
                    matmul_raw(go, &bt, m, n, k)
                });
                let db = need_b.then(|| {
                    let at = transpose_raw(av.data(), m, k);
                    matmul_raw(&at, go, k, m, n)
                });
                if let Some(da) = da {
                    self.accumulate(a, da);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, go.to_vec());
                self.accumulate(b, go.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, go.to_vec());
                self.accumulate(b, go.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = go.iter().zip(self.nodes[b.0].value.data()).map(|(g, y)| g * y).collect();
                let db = go.iter().zip(self.nodes[a.0].value.data()).map(|(g, x)| g * x).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddBias(a, b) => {
                let n = self.nodes[b.0].value.len();
                let mut db = vec![0.0; n];
                for (j, g) in go.iter().enumerate() {
                    db[j % n] += g;
                }
                self.accumulate(a, go.to_vec());
                self.accumulate(b, db);
            }
            Op::Scale(a, k) => self.accumulate(a, go.iter().map(|g| k * g).collect()),
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data();
                let d = go.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(a, d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let d = go.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(a, d);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                let d = go.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(a, d);
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                let d = go.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(a, d);
            }
            Op::Softmax(a) => {
                let yv = &self.nodes[i].value;
                let c = last_dim(yv);
                let mut d = Vec::with_capacity(go.len());
                for (gy, y) in go.chunks(c).zip(yv.data().chunks(c)) {
                    let dot: f64 = gy.iter().zip(y).map(|(g, y)| g * y).sum();
                    d.extend(gy.iter().zip(y).map(|(g, y)| y * (g - dot)));
                }
                self.accumulate(a, d);
            }
            Op::LogSoftmax(a) => {
                let yv = &self.nodes[i].value;
                let c = last_dim(yv);
                let mut d = Vec::with_capacity(go.len());
                for (gy, y) in go.chunks(c).zip(yv.data().chunks(c)) {
                    let total: f64 = gy.iter().sum();
                    d.extend(gy.iter().zip(y).map(|(g, y)| g - y.exp() * total));
                }
                self.accumulate(a, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(p, go[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice(a, start) => self.accumulate_at(a, start, go),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(a, vec![go[0]; n]);
            }
            Op::Conv1d(signal, filters) => {
                let s = self.nodes[signal.0].value.data().to_vec();
                let fv = &self.nodes[filters.0].value;
                let (k, r) = (fv.rows(), fv.cols());
                let f = fv.data().to_vec();
                let t_len = s.len();
                let half = (r / 2) as isize;
                let mut ds = vec![0.0; t_len];
                let mut df = vec![0.0; k * r];
                for t in 0..t_len {
                    for fi in 0..k {
                        let g = go[t * k + fi];
                        for d in -half..=half {
                            let idx = t as isize + d;
                            if idx >= 0 && (idx as usize) < t_len {
                                let w = fi * r + (d + half) as usize;
                                ds[idx as usize] += g * f[w];
                                df[w] += g * s[idx as usize];
                            }
                        }
                    }
                }
                self.accumulate(signal, ds);
                self.accumulate(filters, df);
            }
            Op::Transpose(a) => {
                let (m, n) = (gout.rows(), gout.cols());
                self.accumulate(a, transpose_raw(go, m, n));
            }
            Op::Reshape(a) => self.accumulate(a, go.to_vec()),
            Op::GatherRow(table, row) => {
                let c = self.nodes[table.0].value.cols();
                self.accumulate_at(table, row * c, go);
            }
            Op::StackRows(rows) => {
                let n = gout.cols();
                for (r, chunk) in rows.into_iter().zip(go.chunks(n)) {
                    self.accumulate(r, chunk.to_vec());
                }
            }
            Op::Pick(a, idx) => self.accumulate_at(a, idx, go),
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
