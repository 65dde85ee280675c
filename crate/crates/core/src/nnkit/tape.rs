use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::gemm;
use super::{NnError, ParamId, ParamStore, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[cfg(test)]
thread_local! {
    /// Mutation hook: when set, the ReLU backward rule is deliberately wrong.
    pub(crate) static CORRUPT_RELU: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Pass(usize),
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Tanh(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    Sum(usize),
    Nll { logits: usize, targets: Vec<usize>, probs: Tensor },
    WeightedSum(usize, Tensor),
    Reshape(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
    tape: u64,
}

impl Grads {
    /// Empty accumulator sized for `store`.
    pub fn empty(store: &ParamStore) -> Self {
        Self { params: vec![None; store.len()], nodes: Vec::new(), tape: 0 }
    }

    /// Gradient of a parameter; `None` when it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, zeros when untouched.
    pub fn param_or_zero(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.param(id).cloned().unwrap_or_else(|| {
            let t = store.get(id);
            Tensor::zeros(t.rows, t.cols)
        })
    }

    /// Gradient with respect to a recorded input.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Add another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter().filter_map(|&id| self.param(id)).map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }

    /// Rescale so the global norm over `ids` is at most `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let n = self.norm(ids);
        if n > max_norm && n > 0.0 {
            let c = max_norm / n;
            for &id in ids {
                if let Some(Some(g)) = self.params.get_mut(id.0) {
                    g.scale_assign(c);
                }
            }
        }
        n
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.is_finite())
    }
}

/// Define-by-run recording of one forward pass over a borrowed [`ParamStore`].
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
    id: u64,
    finished: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            finished: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, NnError> {
        if self.finished {
            return Err(NnError::TapeFinished);
        }
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(NnError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn val(&self, i: usize) -> &Tensor {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v.idx)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.val(v.idx).shape()
    }

    /// Human-readable name of a node for error messages.
    pub fn describe(&self, v: Var) -> String {
        let (r, c) = self.shape(v);
        match &self.nodes[v.idx].op {
            Op::Param(id) => format!("param '{}' ({r}x{c})", self.store.name(*id)),
            Op::Leaf => format!("input #{} ({r}x{c})", v.idx),
            _ => format!("node #{} ({r}x{c})", v.idx),
        }
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NnError {
        NnError::Shape { op, detail: format!("{} vs {}", self.describe(a), self.describe(b)) }
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var { idx: i, tape: self.id };
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: true });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Var { idx: i, tape: self.id }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.cols != tb.rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta.rows, ta.cols, tb.cols, 1.0, &ta.data, false, &tb.data, false, 0.0, &mut out.data);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.cols != tb.cols {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        gemm(ta.rows, ta.cols, tb.rows, 1.0, &ta.data, false, &tb.data, true, 0.0, &mut out.data);
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMulNt(ia, ib), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), NnError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor { rows: ta.rows, cols: ta.cols, data }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib, out) = self.zip(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib, out) = self.zip(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Sub(ia, ib), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib, out) = self.zip(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    fn row_op(&mut self, a: Var, r: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor), NnError> {
        let (ia, ir) = (self.check(a)?, self.check(r)?);
        let (ta, tr) = (self.val(ia), self.val(ir));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(self.shape_err(name, a, r));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols.max(1)) {
            for (x, &y) in row.iter_mut().zip(&tr.data) {
                *x = f(*x, y);
            }
        }
        Ok((ia, ir, out))
    }

    /// Add a 1 x n row to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, NnError> {
        let (ia, ir, out) = self.row_op(a, r, "add_row", |x, y| x + y)?;
        let ng = self.ng(ia) || self.ng(ir);
        Ok(self.push(out, Op::AddRow(ia, ir), ng))
    }

    /// Multiply every row of `a` elementwise by a 1 x n row.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, NnError> {
        let (ia, ir, out) = self.row_op(a, r, "mul_row", |x, y| x * y)?;
        let ng = self.ng(ia) || self.ng(ir);
        Ok(self.push(out, Op::MulRow(ia, ir), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor), NnError> {
        let ia = self.check(a)?;
        Ok((ia, self.val(ia).map(f)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NnError> {
        let (ia, out) = self.unary(a, |x| x * c)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Scale(ia, c), ng))
    }

    /// `a + t` for a constant tensor `t` (used for additive masks).
    pub fn add_const(&mut self, a: Var, t: &Tensor) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if ta.shape() != t.shape() {
            return Err(NnError::Shape {
                op: "add_const",
                detail: format!("{} vs constant ({}x{})", self.describe(a), t.rows, t.cols),
            });
        }
        let data = ta.data.iter().zip(&t.data).map(|(x, y)| x + y).collect();
        let out = Tensor { rows: ta.rows, cols: ta.cols, data };
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Pass(ia), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NnError> {
        let (ia, out) = self.unary(a, |x| x.max(0.0))?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Relu(ia), ng))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NnError> {
        let (ia, out) = self.unary(a, |x| x * sigmoid(x))?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Silu(ia), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        let (ia, out) = self.unary(a, sigmoid)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Sigmoid(ia), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        let (ia, out) = self.unary(a, f64::tanh)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Tanh(ia), ng))
    }

    /// Row-wise layer normalisation with 1 x n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NnError> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (tx, tg, tb) = (self.val(ix), self.val(ig), self.val(ib));
        if tg.shape() != (1, tx.cols) {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if tb.shape() != (1, tx.cols) {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let n = tx.cols;
        let mut xhat = Vec::with_capacity(tx.data.len());
        let mut out = Vec::with_capacity(tx.data.len());
        let mut inv_std = Vec::with_capacity(tx.rows);
        for row in tx.data.chunks_exact(n.max(1)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for ((&x, &g), &b) in row.iter().zip(&tg.data).zip(&tb.data) {
                let h = (x - mean) * inv;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let xhat = Tensor { rows: tx.rows, cols: n, data: xhat };
        let out = Tensor { rows: tx.rows, cols: n, data: out };
        let ng = self.ng(ix) || self.ng(ig) || self.ng(ib);
        Ok(self.push(out, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, inv_std }, ng))
    }

    /// Row-wise softmax. Entries at -inf get probability 0; a row that is
    /// entirely -inf yields zeros.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let out = softmax_rows(self.val(ia));
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Softmax(ia), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if start + len > ta.cols {
            return Err(NnError::Shape { op: "slice_cols", detail: format!("{} cols {start}..{}", self.describe(a), start + len) });
        }
        let mut out = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SliceCols(ia, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if start + len > ta.rows {
            return Err(NnError::Shape { op: "slice_rows", detail: format!("{} rows {start}..{}", self.describe(a), start + len) });
        }
        let out = ta.slice_rows(start, len);
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SliceRows(ia, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(NnError::Data("concat_cols of nothing".into()));
        };
        let rows = self.val(first).rows;
        for (k, &i) in idx.iter().enumerate() {
            if self.val(i).rows != rows {
                return Err(self.shape_err("concat_cols", parts[0], parts[k]));
            }
        }
        let cols: usize = idx.iter().map(|&i| self.val(i).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &i in &idx {
                let t = self.val(i);
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatCols(idx), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(NnError::Data("concat_rows of nothing".into()));
        };
        let cols = self.val(first).cols;
        for (k, &i) in idx.iter().enumerate() {
            if self.val(i).cols != cols {
                return Err(self.shape_err("concat_rows", parts[0], parts[k]));
            }
        }
        let ts: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let out = Tensor::concat_rows(&ts);
        let ng = idx.iter().any(|&i| self.ng(i));
        Ok(self.push(out, Op::ConcatRows(idx), ng))
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let it = self.check(table)?;
        let t = self.val(it);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(NnError::Shape { op: "gather_rows", detail: format!("id {bad} outside {}", self.describe(table)) });
        }
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(it);
        Ok(self.push(out, Op::Gather(it, ids.to_vec()), ng))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if ta.len() != rows * cols {
            return Err(NnError::Shape { op: "reshape", detail: format!("{} to {rows}x{cols}", self.describe(a)) });
        }
        let out = Tensor { rows, cols, data: ta.data.clone() };
        let ng = self.ng(ia);
        Ok(self.push(out, Op::Reshape(ia), ng))
    }

    /// Sum of all entries as a 1 x 1 value.
    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let s = self.val(ia).sum();
        let ng = self.ng(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NnError> {
        let n = self.shape(a);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / (n.0 * n.1).max(1) as f64)
    }

    /// `sum(a * w)` for a constant weight tensor, as a 1 x 1 value.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor) -> Result<Var, NnError> {
        let ia = self.check(a)?;
        let ta = self.val(ia);
        if ta.shape() != w.shape() {
            return Err(NnError::Shape {
                op: "weighted_sum",
                detail: format!("{} vs weights ({}x{})", self.describe(a), w.rows, w.cols),
            });
        }
        let s = ta.data.iter().zip(&w.data).map(|(x, y)| x * y).sum();
        let ng = self.ng(ia);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(ia, w.clone()), ng))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits);
    /// returns an n x 1 column.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let il = self.check(logits)?;
        let tl = self.val(il);
        if targets.len() != tl.rows {
            return Err(NnError::Shape { op: "nll_rows", detail: format!("{} vs {} targets", self.describe(logits), targets.len()) });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= tl.cols) {
            return Err(NnError::Shape { op: "nll_rows", detail: format!("target {bad} outside {}", self.describe(logits)) });
        }
        let probs = softmax_rows(tl);
        let mut out = Tensor::zeros(tl.rows, 1);
        for (r, &t) in targets.iter().enumerate() {
            out.data[r] = -log_softmax_at(tl.row(r), t);
        }
        let ng = self.ng(il);
        Ok(self.push(out, Op::Nll { logits: il, targets: targets.to_vec(), probs }, ng))
    }

    /// Reverse pass from a 1 x 1 output.
    pub fn backward(&mut self, out: Var) -> Result<Grads, NnError> {
        let io = self.check(out)?;
        if self.val(io).shape() != (1, 1) {
            return Err(NnError::Shape { op: "backward", detail: format!("output {} is not scalar", self.describe(out)) });
        }
        self.backward_with(out, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<Grads, NnError> {
        let io = self.check(out)?;
        if self.val(io).shape() != seed.shape() {
            return Err(NnError::Shape { op: "backward", detail: format!("seed {:?} for {}", seed.shape(), self.describe(out)) });
        }
        self.finished = true;
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[io] = Some(seed);
        let mut params: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for i in (0..=io).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gi) = g[i].take() else {
                continue;
            };
            self.propagate(i, &gi, &mut g, &mut params);
            g[i] = Some(gi);
        }
        Ok(Grads { params, nodes: g, tape: self.id })
    }

    fn propagate(&self, i: usize, gi: &Tensor, g: &mut [Option<Tensor>], params: &mut [Option<Tensor>]) {
        let acc = |g: &mut [Option<Tensor>], j: usize, t: Tensor| match &mut g[j] {
            Some(x) => x.add_assign(&t),
            None => g[j] = Some(t),
        };
        let ng = |j: usize| self.nodes[j].needs_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => match &mut params[id.0] {
                Some(x) => x.add_assign(gi),
                None => params[id.0] = Some(gi.clone()),
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ng(*a) {
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm(ta.rows, tb.cols, ta.cols, 1.0, &gi.data, false, &tb.data, true, 0.0, &mut ga.data);
                    acc(g, *a, ga);
                }
                if ng(*b) {
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm(tb.rows, ta.rows, tb.cols, 1.0, &ta.data, true, &gi.data, false, 0.0, &mut gb.data);
                    acc(g, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ng(*a) {
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    gemm(ta.rows, tb.rows, ta.cols, 1.0, &gi.data, false, &tb.data, false, 0.0, &mut ga.data);
                    acc(g, *a, ga);
                }
                if ng(*b) {
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    gemm(tb.rows, ta.rows, tb.cols, 1.0, &gi.data, true, &ta.data, false, 0.0, &mut gb.data);
                    acc(g, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    acc(g, *a, gi.clone());
                }
                if ng(*b) {
                    acc(g, *b, gi.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    acc(g, *a, gi.clone());
                }
                if ng(*b) {
                    acc(g, *b, gi.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if ng(*a) {
                    acc(g, *a, zip_map(gi, tb, |x, y| x * y));
                }
                if ng(*b) {
                    acc(g, *b, zip_map(gi, ta, |x, y| x * y));
                }
            }
            Op::AddRow(a, r) => {
                if ng(*a) {
                    acc(g, *a, gi.clone());
                }
                if ng(*r) {
                    acc(g, *r, col_sums(gi));
                }
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.val(*a), self.val(*r));
                if ng(*a) {
                    let mut ga = gi.clone();
                    for row in ga.data.chunks_mut(gi.cols.max(1)) {
                        for (x, y) in row.iter_mut().zip(&tr.data) {
                            *x *= y;
                        }
                    }
                    acc(g, *a, ga);
                }
                if ng(*r) {
                    acc(g, *r, col_sums(&zip_map(gi, ta, |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(g, *a, gi.map(|v| v * c));
            }
            Op::Pass(a) => acc(g, *a, gi.clone()),
            Op::Relu(a) => {
                let ta = self.val(*a);
                #[cfg(test)]
                let k = if CORRUPT_RELU.with(|c| c.get()) { 1.5 } else { 1.0 };
                #[cfg(not(test))]
                let k = 1.0;
                acc(g, *a, zip_map(gi, ta, |d, x| if x > 0.0 { k * d } else { 0.0 }));
            }
            Op::Silu(a) => {
                let ta = self.val(*a);
                acc(
                    g,
                    *a,
                    zip_map(gi, ta, |d, x| {
                        let s = sigmoid(x);
                        d * (s + x * s * (1.0 - s))
                    }),
                );
            }
            Op::Sigmoid(a) => {
                let y = self.val(i);
                acc(g, *a, zip_map(gi, y, |d, s| d * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = self.val(i);
                acc(g, *a, zip_map(gi, y, |d, t| d * (1.0 - t * t)));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = self.val(*gain);
                let n = xhat.cols;
                if ng(*x) {
                    let mut gx = Tensor::zeros(xhat.rows, n);
                    for r in 0..xhat.rows {
                        let d: Vec<f64> = (0..n).map(|c| gi.data[r * n + c] * tg.data[c]).collect();
                        let h = xhat.row(r);
                        let sd: f64 = d.iter().sum();
                        let sdh: f64 = d.iter().zip(h).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n as f64;
                        for c in 0..n {
                            gx.data[r * n + c] = k * (n as f64 * d[c] - sd - h[c] * sdh);
                        }
                    }
                    acc(g, *x, gx);
                }
                if ng(*gain) {
                    acc(g, *gain, col_sums(&zip_map(gi, xhat, |a, b| a * b)));
                }
                if ng(*bias) {
                    acc(g, *bias, col_sums(gi));
                }
            }
            Op::Softmax(a) => {
                let p = self.val(i);
                let mut ga = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let (pr, gr) = (p.row(r), gi.row(r));
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for c in 0..p.cols {
                        ga.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                    }
                }
                acc(g, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let ta = self.val(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    ga.row_mut(r)[*start..*start + gi.cols].copy_from_slice(gi.row(r));
                }
                acc(g, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let ta = self.val(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                ga.data[start * ta.cols..(start + gi.rows) * ta.cols].copy_from_slice(&gi.data);
                acc(g, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.val(p);
                    if ng(p) {
                        let mut gp = Tensor::zeros(tp.rows, tp.cols);
                        for r in 0..tp.rows {
                            gp.row_mut(r).copy_from_slice(&gi.row(r)[off..off + tp.cols]);
                        }
                        acc(g, p, gp);
                    }
                    off += tp.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let tp = self.val(p);
                    if ng(p) {
                        acc(g, p, gi.slice_rows(off, tp.rows));
                    }
                    off += tp.rows;
                }
            }
            Op::Gather(t, ids) => {
                let tt = self.val(*t);
                let mut gt = Tensor::zeros(tt.rows, tt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in gt.row_mut(id).iter_mut().zip(gi.row(r)) {
                        *x += y;
                    }
                }
                acc(g, *t, gt);
            }
            Op::Sum(a) => {
                let ta = self.val(*a);
                acc(g, *a, Tensor::filled(ta.rows, ta.cols, gi.item()));
            }
            Op::WeightedSum(a, w) => {
                let d = gi.item();
                acc(g, *a, w.map(|v| v * d));
            }
            Op::Reshape(a) => {
                let ta = self.val(*a);
                acc(g, *a, Tensor { rows: ta.rows, cols: ta.cols, data: gi.data.clone() });
            }
            Op::Nll { logits, targets, probs } => {
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let d = gi.data[r];
                    for v in gl.row_mut(r) {
                        *v *= d;
                    }
                    gl.data[r * probs.cols + t] -= d;
                }
                acc(g, *logits, gl);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols);
    for row in t.data.chunks(t.cols.max(1)) {
        for (o, v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Row-wise softmax of a plain tensor (entries at -inf get zero mass).
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t.rows, t.cols);
    for r in 0..t.rows {
        let row = t.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let o = out.row_mut(r);
        let mut s = 0.0;
        for (x, &v) in o.iter_mut().zip(row) {
            *x = (v - m).exp();
            s += *x;
        }
        for x in o.iter_mut() {
            *x /= s;
        }
    }
    out
}

/// `log softmax(row)[t]`.
pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[t] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let store = ParamStore::new(0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn tape_cannot_be_reused() {
        let store = ParamStore::new(0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(NnError::TapeFinished)));
        assert!(matches!(tape.relu(x), Err(NnError::TapeFinished)));
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let store = ParamStore::new(0);
        let mut a = Tape::new(&store);
        let mut b = Tape::new(&store);
        let x = a.input(Tensor::scalar(1.0));
        assert!(matches!(b.relu(x), Err(NnError::ForeignVar)));
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut store = ParamStore::new(0);
        let w = store.add("w", 2, 2, super::super::Init::FanIn).unwrap();
        let mut tape = Tape::new(&store);
        let pw = tape.param(w);
        let z = tape.scale(pw, 0.0).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.param(w).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_softmax_and_masked_rows() {
        let store = ParamStore::new(0);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_vec(2, 4, vec![0.3; 8]).unwrap());
        let mask = Tensor::from_vec(2, 4, vec![0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let m = tape.add_const(x, &mask).unwrap();
        let p = tape.softmax(m).unwrap();
        let v = tape.value(p);
        assert_eq!(&v.data[..4], &[0.25; 4]);
        assert_eq!(&v.data[4..], &[0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn shape_errors_name_params() {
        let mut store = ParamStore::new(0);
        let w = store.add("enc.w", 3, 3, super::super::Init::Zeros).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(2, 2));
        let pw = tape.param(w);
        let err = tape.matmul(x, pw).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }
}
