//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass.
//! [`Tape::backward`] walks the records in reverse creation order, which is a
//! reverse topological order, so gradients accumulate in the same order on
//! every run and repeated passes are bit-identical.
//!
//! Vectors are `1 x n` rows and scalars are `1 x 1`.

use std::collections::BTreeMap;

use crate::tensor::{shape_err, Gradients, ParamGrad, ParamId, ParamSet, Tensor, TensorError};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Lookup { param: ParamId, table_rows: usize, indices: Vec<usize> },
    GatherRows { x: Var, indices: Vec<usize> },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    SumCols(Var),
    Mean(Var),
    Dot(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Added to normalization denominators.
pub const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `out[m x n] += a[m x k] * b[n x k]^T`
fn mm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
fn mm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

#[inline]
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
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count of matrix products plus softmax element count.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_of(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("internal shape")
    }

    /// A constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        let (r, c) = dims(&value);
        self.push(Self::matrix(r, c, value.into_data()), Op::Input, false)
    }

    /// A parameter leaf holding a copy of the current value.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        let (r, c) = dims(&p.value);
        self.push(Self::matrix(r, c, p.value.data().to_vec()), Op::Param(id), p.trainable)
    }

    /// Embedding lookup: selected rows of a parameter table. Gradients come back as sparse rows.
    pub fn lookup(&mut self, params: &ParamSet, id: ParamId, indices: &[usize]) -> Result<Var, TensorError> {
        let p = params.get(id);
        let (rows, cols) = dims(&p.value);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(shape_err("lookup", format!("row {i} out of range for `{}` with {rows} rows", p.name)));
            }
            data.extend_from_slice(p.value.row_slice(i));
        }
        Ok(self.push(
            Self::matrix(indices.len(), cols, data),
            Op::Lookup { param: id, table_rows: rows, indices: indices.to_vec() },
            p.trainable,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(Self::matrix(indices.len(), c, data), Op::GatherRows { x, indices: indices.to_vec() }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape_of(a);
        let (k2, n) = self.shape_of(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("left operand is {m}x{k}, right operand is {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        finite("matmul", &out)?;
        self.flops += (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::matrix(m, n, out), Op::MatMul { a, b }, ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape_of(a);
        let (n, k2) = self.shape_of(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("left operand is {m}x{k}, right operand (transposed) is {n}x{k2}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        finite("matmul_nt", &out)?;
        self.flops += (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::matrix(m, n, out), Op::MatMulNT { a, b }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape_of(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(Self::matrix(c, r, out), Op::Transpose(x), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        if sa != sb {
            return Err(shape_err(op, format!("operands are {}x{} and {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(sa)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::matrix(r, c, out), record, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        let (rr, rc) = self.shape_of(row);
        if rr != 1 || rc != c {
            return Err(shape_err("add_row", format!("matrix is {r}x{c}, row is {rr}x{rc}")));
        }
        let rv = self.value(row).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, &v)| v + rv[i % c]).collect();
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(Self::matrix(r, c, out), Op::AddRow { x, row }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, record: Op) -> Var {
        let (r, c) = self.shape_of(x);
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(Self::matrix(r, c, out), record, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.unary(x, f64::exp, Op::Exp(x));
        finite("exp", self.value(v).data())?;
        Ok(v)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.unary(x, f64::ln, Op::Log(x));
        finite("log", self.value(v).data())?;
        Ok(v)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape_of(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.flops += (r * c) as u64;
        let ng = self.ng(x);
        self.push(Self::matrix(r, c, out), Op::Softmax { x }, ng)
    }

    /// Log-softmax along each row, computed with the max shift.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape_of(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.flops += (r * c) as u64;
        let ng = self.ng(x);
        self.push(Self::matrix(r, c, out), Op::LogSoftmax { x }, ng)
    }

    /// Softmax along each row over the columns where `valid` is true; other columns get exactly 0.
    ///
    /// Masked entries are never read, so their values may be arbitrary.
    pub fn masked_softmax_rows(&mut self, x: Var, valid: &[bool]) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        if valid.len() != c {
            return Err(shape_err("masked_softmax_rows", format!("mask has {} entries for {c} columns", valid.len())));
        }
        if valid.iter().all(|&v| v) {
            return Ok(self.softmax_rows(x));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let max = row.iter().zip(valid).filter(|(_, &m)| m).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..c {
                if valid[j] {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for j in 0..c {
                if valid[j] {
                    dst[j] /= total;
                }
            }
        }
        self.flops += (r * c) as u64;
        let ng = self.ng(x);
        // Masked columns have zero output, and the softmax backward formula
        // yields zero gradient for them, so the plain record suffices.
        Ok(self.push(Self::matrix(r, c, out), Op::Softmax { x }, ng))
    }

    /// Per-row normalization with learned gain and bias (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        if self.shape_of(gain) != (1, c) || self.shape_of(bias) != (1, c) {
            return Err(shape_err("layer_norm", format!("input has {c} columns, gain/bias must be 1x{c}")));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(Self::matrix(r, c, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng))
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape_of(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![0.0; r];
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            norms[i] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let ng = self.ng(x);
        self.push(Self::matrix(r, c, out), Op::NormalizeRows { x, norms }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no operands"));
        };
        let r = self.shape_of(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape_of(p).0 != r) {
            return Err(shape_err("concat_cols", format!("row counts {} and {} differ", r, self.shape_of(*bad).0)));
        }
        let total: usize = parts.iter().map(|&p| self.shape_of(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::matrix(r, total, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no operands"));
        };
        let c = self.shape_of(first).1;
        if let Some(bad) = parts.iter().find(|&&p| self.shape_of(p).1 != c) {
            return Err(shape_err("concat_rows", format!("column counts {} and {} differ", c, self.shape_of(*bad).1)));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.shape_of(p).0;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::matrix(rows, c, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} out of {r}", start + len)));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Self::matrix(len, c, out), Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape_of(x);
        if start + len > c {
            return Err(shape_err("slice_cols", format!("columns {start}..{} out of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Self::matrix(r, len, out), Op::SliceCols { x, start }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.shape_of(x);
        let out: Vec<f64> = self.value(x).data().chunks(c.max(1)).map(|row| row.iter().sum()).take(r).collect();
        let ng = self.ng(x);
        self.push(Self::matrix(r, 1, out), Op::SumCols(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Inner product of two same-shaped operands.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("dot", a, b)?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), ng))
    }

    /// Reverse pass from a scalar. Returns gradients of every trainable parameter that participated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let (r, c) = dims(&node.value);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.entries.get_mut(id) {
                    Some(ParamGrad::Dense(acc)) => add_into(acc, &g),
                    Some(rows @ ParamGrad::Rows { .. }) => {
                        let mut dense = rows.to_dense(g.len());
                        add_into(&mut dense, &g);
                        *rows = ParamGrad::Dense(dense);
                    }
                    None => {
                        out.entries.insert(*id, ParamGrad::Dense(g));
                    }
                },
                Op::Lookup { param, table_rows, indices } => {
                    let entry = out.entries.entry(*param).or_insert_with(|| ParamGrad::Rows { cols: c, rows: BTreeMap::new() });
                    match entry {
                        ParamGrad::Rows { rows, .. } => {
                            for (k, &row) in indices.iter().enumerate() {
                                let src = &g[k * c..(k + 1) * c];
                                let acc = rows.entry(row).or_insert_with(|| vec![0.0; c]);
                                acc.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        }
                        ParamGrad::Dense(acc) => {
                            debug_assert_eq!(acc.len(), table_rows * c);
                            for (k, &row) in indices.iter().enumerate() {
                                for j in 0..c {
                                    acc[row * c + j] += g[k * c + j];
                                }
                            }
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let (xr, xc) = self.shape_of(*x);
                    let acc = grad_slot(&mut grads, *x, xr * xc);
                    for (k, &row) in indices.iter().enumerate() {
                        for j in 0..xc {
                            acc[row * xc + j] += g[k * xc + j];
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape_of(*a);
                    let n = c;
                    if self.ng(*a) {
                        let acc = grad_slot(&mut grads, *a, m * k);
                        mm_nt_acc(&g, self.value(*b).data(), acc, m, n, k);
                    }
                    if self.ng(*b) {
                        let acc = grad_slot(&mut grads, *b, k * n);
                        mm_tn_acc(self.value(*a).data(), &g, acc, m, k, n);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = self.shape_of(*a);
                    let n = c;
                    if self.ng(*a) {
                        let acc = grad_slot(&mut grads, *a, m * k);
                        mm_acc(&g, self.value(*b).data(), acc, m, n, k);
                    }
                    if self.ng(*b) {
                        let acc = grad_slot(&mut grads, *b, n * k);
                        mm_tn_acc(&g, self.value(*a).data(), acc, m, n, k);
                    }
                }
                Op::Transpose(x) => {
                    let acc = grad_slot(&mut grads, *x, r * c);
                    // node is r x c, x is c x r
                    for i in 0..r {
                        for j in 0..c {
                            acc[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            add_into(grad_slot(&mut grads, v, r * c), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        add_into(grad_slot(&mut grads, *a, r * c), &g);
                    }
                    if self.ng(*b) {
                        let acc = grad_slot(&mut grads, *b, r * c);
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a -= b);
                    }
                }
                Op::AddRow { x, row } => {
                    if self.ng(*x) {
                        add_into(grad_slot(&mut grads, *x, r * c), &g);
                    }
                    if self.ng(*row) {
                        let acc = grad_slot(&mut grads, *row, c);
                        for chunk in g.chunks(c) {
                            add_into(acc, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let other = self.value(*b).data();
                        let acc = grad_slot(&mut grads, *a, r * c);
                        for i in 0..acc.len() {
                            acc[i] += g[i] * other[i];
                        }
                    }
                    if self.ng(*b) {
                        let other = self.value(*a).data();
                        let acc = grad_slot(&mut grads, *b, r * c);
                        for i in 0..acc.len() {
                            acc[i] += g[i] * other[i];
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let acc = grad_slot(&mut grads, *x, r * c);
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        if xv[i] > 0.0 {
                            acc[i] += g[i];
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x).data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += if xv[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += g[i] * y[i];
                    }
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += g[i] / xv[i];
                    }
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x).data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..acc.len() {
                        acc[i] += g[i] * sigmoid(xv[i]);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            acc[i * c + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            acc[i * c + j] += gr[j] - y[i * c + j].exp() * total;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain).data().to_vec();
                    if self.ng(*gain) {
                        let acc = grad_slot(&mut grads, *gain, c);
                        for i in 0..r {
                            for j in 0..c {
                                acc[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    if self.ng(*bias) {
                        let acc = grad_slot(&mut grads, *bias, c);
                        for chunk in g.chunks(c) {
                            add_into(acc, chunk);
                        }
                    }
                    if self.ng(*x) {
                        let acc = grad_slot(&mut grads, *x, r * c);
                        for i in 0..r {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                mean_d += d;
                                mean_dx += d * xhat[i * c + j];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for j in 0..c {
                                let d = g[i * c + j] * gv[j];
                                acc[i * c + j] += inv_std[i] * (d - mean_d - xhat[i * c + j] * mean_dx);
                            }
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.data();
                    let acc = grad_slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            acc[i * c + j] += (gr[j] - yr[j] * inner) / norms[i];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape_of(p).1;
                        if self.ng(p) {
                            let acc = grad_slot(&mut grads, p, r * pc);
                            for i in 0..r {
                                add_into(&mut acc[i * pc..(i + 1) * pc], &g[i * c + offset..i * c + offset + pc]);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.ng(p) {
                            add_into(grad_slot(&mut grads, p, n), &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let n = self.value(*x).len();
                    let acc = grad_slot(&mut grads, *x, n);
                    add_into(&mut acc[start * c..(start + r) * c], &g);
                }
                Op::SliceCols { x, start } => {
                    let (xr, xc) = self.shape_of(*x);
                    let acc = grad_slot(&mut grads, *x, xr * xc);
                    for i in 0..r {
                        add_into(&mut acc[i * xc + start..i * xc + start + c], &g[i * c..(i + 1) * c]);
                    }
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    grad_slot(&mut grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
                Op::SumCols(x) => {
                    let (xr, xc) = self.shape_of(*x);
                    let acc = grad_slot(&mut grads, *x, xr * xc);
                    for i in 0..xr {
                        acc[i * xc..(i + 1) * xc].iter_mut().for_each(|a| *a += g[i]);
                    }
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let share = g[0] / n as f64;
                    grad_slot(&mut grads, *x, n).iter_mut().for_each(|a| *a += share);
                }
                Op::Dot(a, b) => {
                    let n = self.value(*a).len();
                    if self.ng(*a) {
                        let other = self.value(*b).data();
                        let acc = grad_slot(&mut grads, *a, n);
                        acc.iter_mut().zip(other).for_each(|(x, y)| *x += g[0] * y);
                    }
                    if self.ng(*b) {
                        let other = self.value(*a).data();
                        let acc = grad_slot(&mut grads, *b, n);
                        acc.iter_mut().zip(other).for_each(|(x, y)| *x += g[0] * y);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Result of [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max over entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares tape gradients against central finite differences for every
/// entry of the given parameters.
pub fn check_gradients<F>(params: &ParamSet, ids: &[ParamId], step: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var, TensorError>,
{
    if !(step > 0.0) {
        return Err(TensorError::Usage(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let eval = |p: &ParamSet| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.scalar(l))
    };
    let mut probe = params.clone();
    let mut report = GradCheck { max_rel_error: 0.0, entries_checked: 0, worst: None };
    for &id in ids {
        let analytic = grads.dense(id, params);
        for i in 0..analytic.len() {
            let original = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = original + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = original - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(values: &[(&str, Tensor)]) -> (ParamSet, Vec<ParamId>) {
        let mut p = ParamSet::new();
        let ids = values.iter().map(|(n, t)| p.add(*n, t.clone())).collect();
        (p, ids)
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = t.softmax_rows(x);
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[-2.0, 3.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = crate::seed::rng(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut t = Tape::new();
        let i = t.input(Tensor::identity(3));
        let av = t.input(a.clone());
        let y = t.matmul(i, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn shape_error_names_operands() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2, 3]));
        let b = t.input(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("2x3"), "{err}");
        let c = t.input(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn exp_overflow_is_error() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[1000.0]));
        assert!(matches!(t.exp(x), Err(TensorError::NonFinite { .. })));
        let z = t.input(Tensor::row(&[0.0]));
        assert!(matches!(t.log(z), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let (p, ids) = params_with(&[("x", Tensor::row(&[1.0, 2.0, 3.0])), ("y", Tensor::row(&[4.0, -5.0, 6.0]))]);
        let mut t = Tape::new();
        let x = t.param(&p, ids[0]);
        let y = t.param(&p, ids[1]);
        let l = t.dot(x, y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.dense(ids[0], &p), vec![4.0, -5.0, 6.0]);
        assert_eq!(g.dense(ids[1], &p), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let (p, ids) = params_with(&[("z", Tensor::row(&[0.3, -1.2, 2.5, 0.0]))]);
        let mut t = Tape::new();
        let z = t.param(&p, ids[0]);
        let s = t.softmax_rows(z);
        let l = t.sum(s);
        assert!((t.scalar(l) - 1.0).abs() < 1e-12);
        let g = t.backward(l).unwrap();
        assert!(g.dense(ids[0], &p).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::Usage(_))));
    }

    #[test]
    fn untouched_parameter_keeps_zero_gradient() {
        let (p, ids) = params_with(&[("a", Tensor::row(&[1.0])), ("b", Tensor::row(&[2.0]))]);
        let mut t = Tape::new();
        let a = t.param(&p, ids[0]);
        let l = t.sum(a);
        let g = t.backward(l).unwrap();
        assert!(g.get(ids[1]).is_none());
        assert_eq!(g.dense(ids[1], &p), vec![0.0]);
    }

    #[test]
    fn chained_matmuls_match_finite_differences() {
        let mut rng = crate::seed::rng(11);
        let (p, ids) = params_with(&[
            ("a", Tensor::randn(&[3, 4], 1.0, &mut rng)),
            ("b", Tensor::randn(&[4, 5], 1.0, &mut rng)),
            ("c", Tensor::randn(&[5, 2], 1.0, &mut rng)),
        ]);
        let report = check_gradients(&p, &ids, 1e-5, |t, p| {
            let a = t.param(p, ids[0]);
            let b = t.param(p, ids[1]);
            let c = t.param(p, ids[2]);
            let ab = t.matmul(a, b)?;
            let abc = t.matmul(ab, c)?;
            let sq = t.mul(abc, abc)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(report.entries_checked, 12 + 20 + 10);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn quadratic_form_gradient() {
        // f(x) = x^T A x, gradient (A + A^T) x; with symmetric A it is 2 A x.
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 3.0]]).unwrap();
        let (p, ids) = params_with(&[("x", Tensor::row(&[0.7, -1.1, 0.4]))]);
        let report = check_gradients(&p, &ids, 1e-5, |t, p| {
            let x = t.param(p, ids[0]);
            let am = t.input(a.clone());
            let xa = t.matmul(x, am)?;
            t.dot(xa, x)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");

        let mut t = Tape::new();
        let x = t.param(&p, ids[0]);
        let am = t.input(a.clone());
        let xa = t.matmul(x, am).unwrap();
        let l = t.dot(xa, x).unwrap();
        let g = t.backward(l).unwrap().dense(ids[0], &p);
        let xv = p.value(ids[0]).data();
        for i in 0..3 {
            let expected: f64 = (0..3).map(|j| 2.0 * a.get(i, j) * xv[j]).sum();
            assert!((g[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let (p, ids) = params_with(&[("x", Tensor::row(&[1.0, 2.0]))]);
        let report = check_gradients(&p, &ids, 1e-4, |t, p| {
            let x = t.param(p, ids[0]);
            let z = t.scale(x, 0.0);
            let s = t.sum(z);
            let c = t.input(Tensor::scalar(3.0));
            t.add(s, c)
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut rng = crate::seed::rng(21);
        // Entries bounded away from zero keep ReLU kinks out of reach of the probe.
        let away = |t: Tensor| {
            let data = t.data().iter().map(|&v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v }).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let (p, ids) = params_with(&[
            ("x", away(Tensor::randn(&[4, 6], 1.0, &mut rng))),
            ("w", Tensor::randn(&[6, 6], 0.5, &mut rng)),
            ("g", Tensor::full(&[1, 6], 1.3)),
            ("b", Tensor::randn(&[1, 6], 0.2, &mut rng)),
            ("table", Tensor::randn(&[5, 6], 1.0, &mut rng)),
        ]);
        let report = check_gradients(&p, &ids, 1e-5, |t, p| {
            let x = t.param(p, ids[0]);
            let w = t.param(p, ids[1]);
            let g = t.param(p, ids[2]);
            let b = t.param(p, ids[3]);
            let emb = t.lookup(p, ids[4], &[1, 3, 3, 0])?;
            let h = t.add(x, emb)?;
            let h = t.layer_norm(h, g, b)?;
            let h = t.matmul(h, w)?;
            let h = t.add_row(h, b)?;
            let r = t.relu(h);
            let l = t.leaky_relu(h, 0.2);
            let s = t.sigmoid(l);
            let s = t.tanh(s);
            let n = t.normalize_rows(s);
            let scores = t.matmul_nt(n, r)?;
            let att = t.masked_softmax_rows(scores, &[true, false, true, true])?;
            let tr = t.transpose(att);
            let mixed = t.matmul(tr, r)?;
            let top = t.slice_rows(mixed, 1, 2)?;
            let left = t.slice_cols(top, 0, 3)?;
            let right = t.slice_cols(top, 3, 3)?;
            let cat = t.concat_cols(&[right, left])?;
            let stacked = t.concat_rows(&[cat, top])?;
            let picked = t.gather_rows(stacked, &[0, 3, 3])?;
            let ls = t.log_softmax_rows(picked);
            let picked = t.add(picked, ls)?;
            let sp = t.softplus(picked);
            let e = t.exp(sp)?;
            let lg = t.log(e)?;
            let rows = t.sum_cols(lg);
            let m = t.mean(rows);
            let sub = t.sub(picked, picked)?;
            let d = t.dot(picked, sp)?;
            let s2 = t.sum(sub);
            let total = t.add(m, d)?;
            let total = t.add(total, s2)?;
            Ok(t.scale(total, 0.7))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn backward_is_bit_reproducible() {
        let mut rng = crate::seed::rng(3);
        let (p, ids) = params_with(&[("w", Tensor::randn(&[8, 8], 1.0, &mut rng))]);
        let run = || {
            let mut t = Tape::new();
            let w = t.param(&p, ids[0]);
            let ww = t.matmul_nt(w, w).unwrap();
            let s = t.softmax_rows(ww);
            let l = t.mean(s);
            let l2 = t.dot(s, ww).unwrap();
            let total = t.add(l, l2).unwrap();
            t.backward(total).unwrap().dense(ids[0], &p)
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn masked_columns_are_exact_zero() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_rows(&[vec![1.0, 1e300, 2.0], vec![0.5, -7.0, 0.5]]).unwrap());
        let y = t.masked_softmax_rows(x, &[true, false, true]).unwrap();
        let v = t.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 1), 0.0);
        assert!((v.get(1, 0) - 0.5).abs() < 1e-15);
    }
}
