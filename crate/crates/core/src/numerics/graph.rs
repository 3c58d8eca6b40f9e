//! Tape-based reverse-mode differentiation.
//!
//! Nodes live in an arena in creation order, which is already a topological
//! order; `backward` walks the arena in reverse. In [`Mode::Inference`] the
//! graph only evaluates values: no parents are recorded and no gradient
//! storage is ever allocated.

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    log_sum_exp, matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

const LN_EPS: f64 = 1e-12;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    /// Differentiable input (parameter or probe).
    Leaf,
    /// Non-differentiable input; never receives gradient.
    Const,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    RowNormalize(Var, Vec<f64>),
    CrossEntropy(Var, usize),
    BceLogits(Var, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Recip(_) => "recip",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::RowSoftmax(_) => "row_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Gather(..) => "gather",
            Op::Sum(_) => "sum",
            Op::RowNormalize(..) => "row_normalize",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BceLogits(..) => "bce_logits",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::RowSoftmax(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::RowNormalize(a, _)
            | Op::CrossEntropy(a, _)
            | Op::BceLogits(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// A recorded computation. One graph belongs to one thread.
#[derive(Debug)]
pub struct Graph {
    mode: Mode,
    nodes: Vec<Node>,
    grads_live: bool,
    grad_allocations: usize,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            nodes: Vec::new(),
            grads_live: false,
            grad_allocations: 0,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Number of gradient tensors ever allocated by this graph.
    pub fn grad_allocations(&self) -> usize {
        self.grad_allocations
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite output of {}", op.tag());
        let op = match (self.mode, op) {
            (Mode::Inference, _) => Op::Const,
            (_, op) => op,
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Every node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// Accumulated gradient; zeros when the node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(v).shape()),
        }
    }

    pub fn has_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    /// Clears every gradient slot. Required between `backward` calls.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.grads_live = false;
    }

    // ----- operations -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::numerics::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[m×n] + b` with `b` a length-n row broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(b).shape()));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c))
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let out = self.value(x).scale(self.value(s).item());
        Ok(self.push(out, Op::MulScalar(x, s)))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().contains(&0.0) {
            return Err(Error::NonFinite("reciprocal of zero".into()));
        }
        let out = self.value(x).map(|v| 1.0 / v);
        Ok(self.push(out, Op::Recip(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let out = crate::numerics::tensor::row_softmax(self.value(x));
        self.push(out, Op::RowSoftmax(x))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length n each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice_rows(x, r, 1)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.value(p).dims2();
            if c != n {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        for &p in parts {
            if self.value(p).dims2().0 != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec())))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).dims2();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            if i >= m {
                return Err(Error::Argument(format!("gather index {i} out of {m} rows")));
            }
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        Ok(self.push(Tensor::from_parts(vec![ids.len(), n], data), Op::Gather(table, ids.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum of a list of same-shaped values.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or_else(|| Error::Argument("add_all of nothing".into()))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Each row divided by its L2 norm (norm floored at 1e-12).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let norms: Vec<f64> = t.row_norms().into_iter().map(|v| v.max(NORM_FLOOR)).collect();
        let mut out = t.data().to_vec();
        for r in 0..m {
            for v in &mut out[r * n..(r + 1) * n] {
                *v /= norms[r];
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::RowNormalize(x, norms))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let loss = crate::numerics::tensor::cross_entropy_logits(self.value(logits).data(), target)?;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target)))
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label` ∈ [0, 1].
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        if !self.value(logit).is_scalar() {
            return Err(Error::Argument("bce_with_logits expects a scalar logit".into()));
        }
        let z = self.value(logit).item();
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits(logit, label)))
    }

    // ----- reverse pass -----

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.mode == Mode::Inference {
            return Err(Error::Contract("backward on an inference-mode graph".into()));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if self.grads_live {
            return Err(Error::Contract("gradients already populated; call zero_grad first".into()));
        }
        self.grads_live = true;
        let shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::ones(&shape));
        self.grad_allocations += 1;

        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, delta) in contributions {
                if matches!(self.nodes[parent.0].op, Op::Const) {
                    continue;
                }
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => {
                        *slot = Some(delta);
                        self.grad_allocations += 1;
                    }
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2();
                let n = val(b).dims2().1;
                let mut da = vec![0.0; m * k];
                matmul_nt_into(g.data(), val(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_tn_into(val(a).data(), g.data(), &mut db, k, m, n);
                vec![
                    (*a, Tensor::from_parts(val(a).shape().to_vec(), da)),
                    (*b, Tensor::from_parts(val(b).shape().to_vec(), db)),
                ]
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(a).dims2();
                let n = val(b).dims2().0;
                let mut da = vec![0.0; m * k];
                matmul_into(g.data(), val(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                matmul_tn_into(g.data(), val(a).data(), &mut db, n, m, k);
                vec![
                    (*a, Tensor::from_parts(val(a).shape().to_vec(), da)),
                    (*b, Tensor::from_parts(val(b).shape().to_vec(), db)),
                ]
            }
            Op::Transpose(a) => {
                let t = g.transpose();
                vec![(*a, Tensor::from_parts(val(a).shape().to_vec(), t.into_data()))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.mul(val(b)).expect("shape")),
                (*b, g.mul(val(a)).expect("shape")),
            ],
            Op::AddRow(x, b) => {
                let (m, n) = g.dims2();
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for (acc, v) in db.iter_mut().zip(g.row_slice(r)) {
                        *acc += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::from_parts(val(b).shape().to_vec(), db)),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::MulScalar(x, s) => {
                let sv = val(s).item();
                let ds = g.dot(val(x)).expect("shape");
                vec![
                    (*x, g.scale(sv)),
                    (*s, Tensor::from_parts(val(s).shape().to_vec(), vec![ds])),
                ]
            }
            Op::Recip(x) => vec![(*x, g.zip_map(val(x), "recip", |gv, xv| -gv / (xv * xv)).expect("shape"))],
            Op::Exp(x) => vec![(*x, g.mul(y).expect("shape"))],
            Op::Square(x) => vec![(*x, g.zip_map(val(x), "square", |gv, xv| 2.0 * xv * gv).expect("shape"))],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(x), "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("shape"),
            )],
            Op::Gelu(x) => vec![(*x, g.zip_map(val(x), "gelu", |gv, xv| gv * gelu_grad(xv)).expect("shape"))],
            Op::RowSoftmax(x) => {
                let (m, n) = y.dims2();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = yr[c] * (gr[c] - inner);
                    }
                }
                vec![(*x, Tensor::from_parts(val(x).shape().to_vec(), dx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = y.dims2();
                let gm = val(gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let gr = g.row_slice(r);
                    let hr = &xhat[r * n..(r + 1) * n];
                    for c in 0..n {
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                        dxhat[c] = gr[c] * gm[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(val(x).shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(val(gamma).shape().to_vec(), dg)),
                    (*beta, Tensor::from_parts(val(beta).shape().to_vec(), db)),
                ]
            }
            Op::SliceRows(x, start) => {
                let n = val(x).dims2().1;
                let mut dx = Tensor::zeros(val(x).shape());
                dx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::SliceCols(x, start) => {
                let (m, n) = val(x).dims2();
                let w = g.dims2().1;
                let mut dx = Tensor::zeros(val(x).shape());
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let len = val(p).numel();
                        let d = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        (*p, Tensor::from_parts(val(p).shape().to_vec(), d))
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let w = val(p).dims2().1;
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        (*p, Tensor::from_parts(val(p).shape().to_vec(), d))
                    })
                    .collect()
            }
            Op::Gather(table, ids) => {
                let n = val(table).dims2().1;
                let mut dt = Tensor::zeros(val(table).shape());
                for (k, &i) in ids.iter().enumerate() {
                    for (a, b) in dt.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(k)) {
                        *a += b;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(x).shape(), g.item()))],
            Op::RowNormalize(x, norms) => {
                let (m, n) = y.dims2();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = (gr[c] - yr[c] * inner) / norms[r];
                    }
                }
                vec![(*x, Tensor::from_parts(val(x).shape().to_vec(), dx))]
            }
            Op::CrossEntropy(logits, target) => {
                let mut p = val(logits).data().to_vec();
                softmax_in_place(&mut p);
                p[*target] -= 1.0;
                let gv = g.item();
                p.iter_mut().for_each(|v| *v *= gv);
                vec![(*logits, Tensor::from_parts(val(logits).shape().to_vec(), p))]
            }
            Op::BceLogits(logit, label) => {
                let z = val(logit).item();
                let d = (sigmoid(z) - label) * g.item();
                vec![(*logit, Tensor::from_parts(val(logit).shape().to_vec(), vec![d]))]
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Stable `log(sum(exp(xs)))`, exposed for loss bookkeeping.
pub fn logsumexp(xs: &[f64]) -> f64 {
    log_sum_exp(xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::train();
        let x = g.leaf(Tensor::row(&[1.0, -2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::train();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        let y = g.leaf(Tensor::row(&[3.0, 4.0]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[3.0, 4.0]);
        assert_eq!(g.grad(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_node_keeps_zero_grad() {
        let mut g = Graph::train();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        let stray = g.leaf(Tensor::row(&[5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(!g.has_grad(stray));
        assert_eq!(g.grad(stray).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::train();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut g = Graph::train();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_mode_records_nothing() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]));
        let s = g.sum(x);
        assert_eq!(g.scalar(s), 3.0);
        assert!(g.parents(s).is_empty());
        assert!(g.backward(s).is_err());
        assert_eq!(g.grad_allocations(), 0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::train();
        let c = g.constant(Tensor::row(&[2.0]));
        let x = g.leaf(Tensor::row(&[3.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(!g.has_grad(c));
        assert_eq!(g.grad(x).data(), &[2.0]);
    }
}
