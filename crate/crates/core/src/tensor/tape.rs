use super::{dims2, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization direction for [`Tape::softmax`] on a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one (normalizes across columns).
    Rows,
    /// Each column sums to one (normalizes across rows).
    Columns,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Sum(Var),
    SqL2(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Conv1d { x: Var, filters: Var, bias: Var },
    GatherRows(Var, Vec<usize>),
    MulConst(Var, Vec<f64>),
    LstmCell(Var, Var),
    Select(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order and reverse accumulation is a single backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the accumulator of `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let (Some(g), Some(acc)) = (self.get(v), target.grad_mut()) {
            debug_assert_eq!(g.len(), acc.len());
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
}

/// Bound LSTM cell weights: input projection `d_in × 4h`, recurrent
/// projection `h × 4h` and bias `4h`, gates ordered input, forget, candidate,
/// output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

/// One LSTM step. Returns `(h_t, c_t)`.
pub fn lstm_step(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    weights: &LstmVars,
) -> Result<(Var, Var)> {
    let xw = tape.matmul(x_t, weights.w_ih)?;
    let hw = tape.matmul(h_prev, weights.w_hh)?;
    let pre = tape.add(xw, hw)?;
    let pre = tape.add_row(pre, weights.bias)?;
    tape.lstm_cell(pre, c_prev)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn d2(&self, v: Var) -> (usize, usize) {
        dims2(self.shape(v)).expect("matrix-shaped operand")
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a value with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(&shape, t.into_data(), Op::Leaf, false)
    }

    /// Records a leaf, tracking gradients iff `t` requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    fn check_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(self.shape(v)).map_err(|_| Error::dim(op, self.shape(v), &[]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check_matrix("matmul", a)?;
        let (k2, n) = self.check_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&[m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("transpose", a)?;
        let ad = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(&[c, r], out, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let same = self.shape(a) == self.shape(b)
            || (dims2(self.shape(a)).ok().is_some()
                && dims2(self.shape(a)).ok() == dims2(self.shape(b)).ok());
        if !same {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(&shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("add_row", a)?;
        if self.value(row).len() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let bd = self.data(row);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % c])
            .collect();
        debug_assert_eq!(out.len(), r * c);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(&shape, out, Op::AddRow(a, row), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        self.push(&shape, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// `|x|`; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `max(x, 0)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let ng = self.ng(a);
        self.push(&[1], vec![s], Op::Sum(a), ng)
    }

    /// Squared L2 norm of all entries.
    pub fn sq_l2(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(&[1], vec![s], Op::SqL2(a), ng)
    }

    /// Single entry `a[index]` in row-major order.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let len = self.value(a).len();
        if index >= len {
            return Err(Error::Contract(format!(
                "select index {index} out of range for {len} entries"
            )));
        }
        let x = self.data(a)[index];
        let ng = self.ng(a);
        Ok(self.push(&[1], vec![x], Op::Select(a, index), ng))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.data(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// Horizontal concatenation. All-vector inputs give a vector.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(Error::EmptySequence { op: "concat_cols" })?;
        let (rows, _) = self.check_matrix("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.check_matrix("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.d2(p).1;
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let all_vectors = parts.iter().all(|&p| self.shape(p).len() == 1);
        let shape = if all_vectors {
            vec![total]
        } else {
            vec![rows, total]
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(&shape, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Vertical stacking; vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(Error::EmptySequence { op: "concat_rows" })?;
        let (_, cols) = self.check_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.check_matrix("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(&[rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `start..start + len` as a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_rows", a)?;
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.data(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(&[len, c], out, Op::SliceRows(a, start), ng))
    }

    /// Columns `start..start + len`; vectors stay vectors.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_matrix("slice_cols", a)?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        let shape = if self.shape(a).len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::SliceCols(a, start), ng))
    }

    fn normalize(&self, a: Var, axis: Axis, log: bool) -> Vec<f64> {
        let (r, c) = self.d2(a);
        let ad = self.data(a);
        let mut out = vec![0.0; r * c];
        // (outer count, inner count, index fn)
        let (outer, inner) = match axis {
            Axis::Rows => (r, c),
            Axis::Columns => (c, r),
        };
        let idx = |o: usize, i: usize| match axis {
            Axis::Rows => o * c + i,
            Axis::Columns => i * c + o,
        };
        for o in 0..outer {
            let max = (0..inner)
                .map(|i| ad[idx(o, i)])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..inner).map(|i| (ad[idx(o, i)] - max).exp()).sum();
            if log {
                let lz = z.ln();
                for i in 0..inner {
                    out[idx(o, i)] = ad[idx(o, i)] - max - lz;
                }
            } else {
                for i in 0..inner {
                    out[idx(o, i)] = (ad[idx(o, i)] - max).exp() / z;
                }
            }
        }
        out
    }

    /// Max-subtracted softmax. Vectors normalize along their single row.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.check_matrix("softmax", a)?;
        let out = self.normalize(a, axis, false);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.check_matrix("log_softmax", a)?;
        let out = self.normalize(a, axis, true);
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::LogSoftmax(a, axis), ng))
    }

    /// Columnwise maximum of a `T × d` matrix. Ties resolve to the lowest
    /// row, which is also where the gradient is routed.
    pub fn pool_max_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("pool_max_rows", a)?;
        if r == 0 {
            return Err(Error::EmptySequence {
                op: "pool_max_rows",
            });
        }
        let ad = self.data(a);
        let mut arg = vec![0usize; c];
        let mut out = ad[..c].to_vec();
        for t in 1..r {
            for j in 0..c {
                let x = ad[t * c + j];
                if x > out[j] {
                    out[j] = x;
                    arg[j] = t;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(&[c], out, Op::MaxRows(a, arg), ng))
    }

    /// Columnwise mean of a `T × d` matrix.
    pub fn pool_mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.check_matrix("pool_mean_rows", a)?;
        if r == 0 {
            return Err(Error::EmptySequence {
                op: "pool_mean_rows",
            });
        }
        let ad = self.data(a);
        let mut out = vec![0.0; c];
        for t in 0..r {
            for (o, x) in out.iter_mut().zip(&ad[t * c..(t + 1) * c]) {
                *o += x;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let ng = self.ng(a);
        Ok(self.push(&[c], out, Op::MeanRows(a), ng))
    }

    /// Same-length 1-D convolution over the rows of `x` (`T × d_in`) with
    /// filters `w × d_in × d_c`, zero padding `(w - 1) / 2` on each side.
    pub fn conv1d_same(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let (t_len, d_in) = self.check_matrix("conv1d_same", x)?;
        let fshape = self.shape(filters).to_vec();
        let [w, f_in, d_c] = fshape[..] else {
            return Err(Error::dim("conv1d_same", self.shape(x), &fshape));
        };
        if w % 2 == 0 {
            return Err(Error::Config(format!(
                "convolution window must be odd, got {w}"
            )));
        }
        if f_in != d_in {
            return Err(Error::dim("conv1d_same", self.shape(x), &fshape));
        }
        if self.value(bias).len() != d_c {
            return Err(Error::dim("conv1d_same", &fshape, self.shape(bias)));
        }
        let pad = (w - 1) / 2;
        let (xd, fd, bd) = (self.data(x), self.data(filters), self.data(bias));
        let mut out = Vec::with_capacity(t_len * d_c);
        for _ in 0..t_len {
            out.extend_from_slice(bd);
        }
        for t in 0..t_len {
            let orow = &mut out[t * d_c..(t + 1) * d_c];
            for j in 0..w {
                let src = t + j;
                if src < pad || src - pad >= t_len {
                    continue;
                }
                let xrow = &xd[(src - pad) * d_in..(src - pad + 1) * d_in];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let frow = &fd[(j * d_in + i) * d_c..(j * d_in + i + 1) * d_c];
                    for (o, fv) in orow.iter_mut().zip(frow) {
                        *o += xv * fv;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(filters) || self.ng(bias);
        Ok(self.push(&[t_len, d_c], out, Op::Conv1d { x, filters, bias }, ng))
    }

    /// Row lookup `table[indices[t]]`, producing `len(indices) × d`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.check_matrix("gather_rows", table)?;
        if indices.is_empty() {
            return Err(Error::EmptySequence { op: "gather_rows" });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", self.shape(table), &[bad]));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&td[i * c..(i + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            &[indices.len(), c],
            out,
            Op::GatherRows(table, indices.to_vec()),
            ng,
        ))
    }

    /// Elementwise product with a fixed (non-differentiable) mask.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim("mul_const", self.shape(a), &[mask.len()]));
        }
        let out = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(&shape, out, Op::MulConst(a, mask), ng))
    }

    /// Fused LSTM cell nonlinearity. `pre` holds the `4h` gate
    /// pre-activations (input, forget, candidate, output); returns `(h, c)`.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<(Var, Var)> {
        let h = self.value(c_prev).len();
        if self.value(pre).len() != 4 * h {
            return Err(Error::dim("lstm_cell", self.shape(pre), self.shape(c_prev)));
        }
        let (pd, cd) = (self.data(pre), self.data(c_prev));
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let i = sigmoid(pd[j]);
            let f = sigmoid(pd[h + j]);
            let g = pd[2 * h + j].tanh();
            let o = sigmoid(pd[3 * h + j]);
            let c = f * cd[j] + i * g;
            out[j] = o * c.tanh();
            out[h + j] = c;
        }
        let ng = self.ng(pre) || self.ng(c_prev);
        let cell = self.push(&[2 * h], out, Op::LstmCell(pre, c_prev), ng);
        let h_t = self.slice_cols(cell, 0, h)?;
        let c_t = self.slice_cols(cell, h, h)?;
        Ok((h_t, c_t))
    }

    /// Reverse accumulation from a scalar. Visits each recorded node once,
    /// newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.d2(*a);
                let n = self.d2(*b).1;
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.d2(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let c = self.value(*row).len();
                if let Some(gr) = self.slot(grads, *row) {
                    for (i, x) in g.iter().enumerate() {
                        gr[i % c] += x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::Abs(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(ad) {
                        if *v > 0.0 {
                            *o += x;
                        } else if *v < 0.0 {
                            *o -= x;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(ad) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(out) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(ad) {
                        *o += x / v;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SqL2(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, v) in ga.iter_mut().zip(ad) {
                        *o += 2.0 * v * g[0];
                    }
                }
            }
            Op::Select(a, i) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga[*i] += g[0];
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.d2(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.d2(p).1).sum();
                let mut offset = 0;
                for &p in parts {
                    let c = self.d2(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (o, x) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        for (o, x) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *o += x;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.d2(*a).1;
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.d2(*a);
                let len = g.len() / r;
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        let dst = &mut ga[i * c + start..i * c + start + len];
                        for (o, x) in dst.iter_mut().zip(&g[i * len..(i + 1) * len]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (r, c) = self.d2(*a);
                let (outer, inner) = match axis {
                    Axis::Rows => (r, c),
                    Axis::Columns => (c, r),
                };
                let idx = |o: usize, i: usize| match axis {
                    Axis::Rows => o * c + i,
                    Axis::Columns => i * c + o,
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        if log {
                            let gs: f64 = (0..inner).map(|i| g[idx(o, i)]).sum();
                            for i in 0..inner {
                                let k = idx(o, i);
                                ga[k] += g[k] - out[k].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..inner).map(|i| g[idx(o, i)] * out[idx(o, i)]).sum();
                            for i in 0..inner {
                                let k = idx(o, i);
                                ga[k] += out[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let c = self.d2(*a).1;
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, &t) in arg.iter().enumerate() {
                        ga[t * c + j] += g[j];
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.d2(*a);
                let inv = 1.0 / r as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for t in 0..r {
                        for j in 0..c {
                            ga[t * c + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::Conv1d { x, filters, bias } => {
                let (t_len, d_in) = self.d2(*x);
                let fshape = self.shape(*filters);
                let (w, d_c) = (fshape[0], fshape[2]);
                let pad = (w - 1) / 2;
                let (xd, fd) = (self.data(*x), self.data(*filters));
                if let Some(gb) = self.slot(grads, *bias) {
                    for t in 0..t_len {
                        for (o, x) in gb.iter_mut().zip(&g[t * d_c..(t + 1) * d_c]) {
                            *o += x;
                        }
                    }
                }
                if let Some(gf) = self.slot(grads, *filters) {
                    for t in 0..t_len {
                        let grow = &g[t * d_c..(t + 1) * d_c];
                        for j in 0..w {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let xrow = &xd[(src - pad) * d_in..(src - pad + 1) * d_in];
                            for (i, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let base = (j * d_in + i) * d_c;
                                for (o, gv) in gf[base..base + d_c].iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for t in 0..t_len {
                        let grow = &g[t * d_c..(t + 1) * d_c];
                        for j in 0..w {
                            let src = t + j;
                            if src < pad || src - pad >= t_len {
                                continue;
                            }
                            let row = src - pad;
                            for i in 0..d_in {
                                let base = (j * d_in + i) * d_c;
                                let s: f64 = fd[base..base + d_c]
                                    .iter()
                                    .zip(grow)
                                    .map(|(f, x)| f * x)
                                    .sum();
                                gx[row * d_in + i] += s;
                            }
                        }
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                let c = self.d2(*table).1;
                if let Some(gt) = self.slot(grads, *table) {
                    for (t, &i) in indices.iter().enumerate() {
                        for (o, x) in gt[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[t * c..(t + 1) * c])
                        {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                }
            }
            Op::LstmCell(pre, c_prev) => {
                let h = self.value(*c_prev).len();
                let (pd, cd) = (self.data(*pre), self.data(*c_prev));
                let mut d_pre = vec![0.0; 4 * h];
                let mut d_cprev = vec![0.0; h];
                for j in 0..h {
                    let i = sigmoid(pd[j]);
                    let f = sigmoid(pd[h + j]);
                    let gg = pd[2 * h + j].tanh();
                    let o = sigmoid(pd[3 * h + j]);
                    let tc = out[h + j].tanh();
                    let (gh, gc) = (g[j], g[h + j]);
                    let dc = gc + gh * o * (1.0 - tc * tc);
                    d_pre[j] = dc * gg * i * (1.0 - i);
                    d_pre[h + j] = dc * cd[j] * f * (1.0 - f);
                    d_pre[2 * h + j] = dc * i * (1.0 - gg * gg);
                    d_pre[3 * h + j] = gh * tc * o * (1.0 - o);
                    d_cprev[j] = dc * f;
                }
                if let Some(gp) = self.slot(grads, *pre) {
                    gp.iter_mut().zip(&d_pre).for_each(|(o, x)| *o += x);
                }
                if let Some(gc) = self.slot(grads, *c_prev) {
                    gc.iter_mut().zip(&d_cprev).for_each(|(o, x)| *o += x);
                }
            }
        }
    }
}
