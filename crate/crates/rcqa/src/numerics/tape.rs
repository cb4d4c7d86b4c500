//! A small reverse-mode gradient tape.
//!
//! This is not a general autodiff system: it records a fixed vocabulary of
//! operations, each with a hand-written backward rule, onto an append-only
//! tape. Model parameters enter as leaves flagged `needs_grad`; a fresh tape
//! is built per training step and [`GradTape::backward`] walks it once in
//! reverse. Node order is the only iteration order involved, so gradient
//! accumulation is deterministic.

use crate::error::{Error, Result};
use crate::numerics::{conv2d, softmax, softmax_rows, sorted_topk_with_sources, Dense2, Dense3};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A value flowing through the tape.
#[derive(Debug, Clone)]
pub enum Value {
    Mat(Dense2),
    Vol(Dense3),
    Num(f64),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Mat(_) => "matrix",
            Value::Vol(_) => "tensor",
            Value::Num(_) => "scalar",
        }
    }
}

enum Op {
    Leaf,
    /// `a @ b`
    MatMul(Var, Var),
    /// `a @ b.T`
    MatMulNT(Var, Var),
    /// elementwise `a + b` (same shape)
    Add(Var, Var),
    /// matrix `a` plus row vector `b` broadcast over rows
    AddRow(Var, Var),
    /// `k * a`
    Scale(Var, f64),
    /// `a + constant` (no gradient into the constant)
    AddConstMat(Var),
    /// elementwise max(0, a) on a matrix
    Relu(Var),
    /// softmax over each row of a matrix
    SoftmaxRows(Var),
    /// gather rows of `table` at fixed indices
    EmbedRows { table: Var, ids: Vec<usize> },
    /// stack row vector `b` under matrix `a`
    AppendRow(Var, Var),
    /// cross-correlation; weights are (out_c) x (in_c*kh*kw), bias out_c x 1
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        kh: usize,
        kw: usize,
        pad: (usize, usize),
    },
    /// elementwise max(0, a) on a tensor
    ReluVol(Var),
    /// per-channel sorted top-k flattened to a (channels*k) x 1 column;
    /// `sources` maps output slots to flat input indices
    TopKChannels {
        input: Var,
        sources: Vec<Option<usize>>,
    },
    /// `logsumexp(z) - z[target]` for a column of logits
    CrossEntropyCol { logits: Var, target: usize },
    /// logistic function on a scalar
    Sigmoid(Var),
    /// scalar `a - b`
    SubNum(Var, Var),
    /// scalar `a + b`
    AddNum(Var, Var),
    /// scalar `a + constant`
    AddNumConst(Var),
    /// scalar max(0, a)
    ReluNum(Var),
    /// mean of scalars
    MeanNums(Vec<Var>),
    /// 1x1 matrix to scalar
    ToNum(Var),
}

struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of a matrix-valued node; `None` if no gradient flowed there.
    pub fn mat(&self, var: Var) -> Option<&Dense2> {
        match self.grads.get(var.0)? {
            Some(Value::Mat(m)) => Some(m),
            _ => None,
        }
    }

    pub fn vol(&self, var: Var) -> Option<&Dense3> {
        match self.grads.get(var.0)? {
            Some(Value::Vol(v)) => Some(v),
            _ => None,
        }
    }

    pub fn num(&self, var: Var) -> Option<f64> {
        match self.grads.get(var.0)? {
            Some(Value::Num(n)) => Some(*n),
            _ => None,
        }
    }
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Value, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Raw value of a node.
    pub fn value(&self, var: Var) -> &Value {
        &self.nodes[var.0].value
    }

    pub fn mat_value(&self, var: Var) -> Result<&Dense2> {
        match self.value(var) {
            Value::Mat(m) => Ok(m),
            other => Err(Error::Shape(format!(
                "expected a matrix node, found {}",
                other.kind()
            ))),
        }
    }

    pub fn vol_value(&self, var: Var) -> Result<&Dense3> {
        match self.value(var) {
            Value::Vol(v) => Ok(v),
            other => Err(Error::Shape(format!(
                "expected a tensor node, found {}",
                other.kind()
            ))),
        }
    }

    pub fn num_value(&self, var: Var) -> Result<f64> {
        match self.value(var) {
            Value::Num(n) => Ok(*n),
            other => Err(Error::Shape(format!(
                "expected a scalar node, found {}",
                other.kind()
            ))),
        }
    }

    /// Insert a matrix leaf. `needs_grad` marks trainable parameters.
    pub fn mat(&mut self, value: Dense2, needs_grad: bool) -> Var {
        self.push(Op::Leaf, Value::Mat(value), needs_grad)
    }

    /// Insert a tensor leaf.
    pub fn vol(&mut self, value: Dense3, needs_grad: bool) -> Var {
        self.push(Op::Leaf, Value::Vol(value), needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.mat_value(a)?.matmul(self.mat_value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Value::Mat(value), needs))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.mat_value(a)?.matmul_nt(self.mat_value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulNT(a, b), Value::Mat(value), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.mat_value(a)?.add(self.mat_value(b)?)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Value::Mat(value), needs))
    }

    /// `a + row` where `row` is 1 x cols, broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let m = self.mat_value(a)?;
        let r = self.mat_value(row)?;
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::Shape(format!(
                "add_row: {}x{} + {}x{}",
                m.rows(),
                m.cols(),
                r.rows(),
                r.cols()
            )));
        }
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.row(0)) {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), Value::Mat(value), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        if !k.is_finite() {
            return Err(Error::InvalidInput(format!("scale factor {k} not finite")));
        }
        let value = self.mat_value(a)?.scale(k);
        let needs = self.needs(a);
        Ok(self.push(Op::Scale(a, k), Value::Mat(value), needs))
    }

    /// Add a constant matrix (e.g. positional encodings); no gradient flows
    /// into the constant.
    pub fn add_const_mat(&mut self, a: Var, constant: Dense2) -> Result<Var> {
        let value = self.mat_value(a)?.add(&constant)?;
        let needs = self.needs(a);
        Ok(self.push(Op::AddConstMat(a), Value::Mat(value), needs))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.mat_value(a)?.map(|v| v.max(0.0));
        let needs = self.needs(a);
        Ok(self.push(Op::Relu(a), Value::Mat(value), needs))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.mat_value(a)?)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a), Value::Mat(value), needs))
    }

    /// Gather rows of `table` at `ids` (an embedding lookup).
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.mat_value(table)?;
        let mut value = Dense2::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::InvalidInput(format!(
                    "embedding id {id} out of range for table of {} rows",
                    t.rows()
                )));
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            Value::Mat(value),
            needs,
        ))
    }

    /// Stack the 1 x cols row `row` under `a`, yielding (rows+1) x cols.
    pub fn append_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let m = self.mat_value(a)?;
        let r = self.mat_value(row)?;
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::Shape(format!(
                "append_row: {}x{} with row {}x{}",
                m.rows(),
                m.cols(),
                r.rows(),
                r.cols()
            )));
        }
        let mut values = m.values().to_vec();
        values.extend_from_slice(r.row(0));
        let value = Dense2::new(m.rows() + 1, m.cols(), values)?;
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AppendRow(a, row), Value::Mat(value), needs))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Var,
        kh: usize,
        kw: usize,
        pad: (usize, usize),
    ) -> Result<Var> {
        let b = self.mat_value(bias)?;
        if b.cols() != 1 {
            return Err(Error::Shape(format!(
                "conv2d bias must be a column vector, got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        let value = conv2d(
            self.vol_value(input)?,
            self.mat_value(weights)?,
            self.mat_value(bias)?.values(),
            kh,
            kw,
            pad,
        )?;
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                kh,
                kw,
                pad,
            },
            Value::Vol(value),
            needs,
        ))
    }

    pub fn relu_vol(&mut self, a: Var) -> Result<Var> {
        let v = self.vol_value(a)?;
        let value = Dense3::new(
            v.channels(),
            v.rows(),
            v.cols(),
            v.values().iter().map(|&x| x.max(0.0)).collect(),
        )?;
        let needs = self.needs(a);
        Ok(self.push(Op::ReluVol(a), Value::Vol(value), needs))
    }

    /// Per-channel sorted top-k over all cells of each channel, concatenated
    /// channel-major into a (channels*k) x 1 column.
    pub fn topk_channels(&mut self, input: Var, k: usize) -> Result<Var> {
        let v = self.vol_value(input)?;
        let plane = v.rows() * v.cols();
        let mut values = Vec::with_capacity(v.channels() * k);
        let mut sources = Vec::with_capacity(v.channels() * k);
        for c in 0..v.channels() {
            let (vals, srcs) = sorted_topk_with_sources(v.channel(c), k)?;
            values.extend(vals);
            sources.extend(srcs.into_iter().map(|s| s.map(|i| c * plane + i)));
        }
        let value = Dense2::new(v.channels() * k, 1, values)?;
        let needs = self.needs(input);
        Ok(self.push(
            Op::TopKChannels { input, sources },
            Value::Mat(value),
            needs,
        ))
    }

    /// Cross-entropy of a column of logits against a single target index:
    /// `logsumexp(z) - z[target]`.
    pub fn cross_entropy_col(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.mat_value(logits)?;
        if z.cols() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy_col expects a column, got {}x{}",
                z.rows(),
                z.cols()
            )));
        }
        if target >= z.rows() {
            return Err(Error::InvalidInput(format!(
                "cross-entropy target {target} out of range for {} logits",
                z.rows()
            )));
        }
        let max = z.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.values().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let value = lse - z.get(target, 0);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropyCol { logits, target },
            Value::Num(value),
            needs,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.num_value(a)?;
        // stable logistic: never exponentiates a positive number
        let value = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Sigmoid(a), Value::Num(value), needs))
    }

    pub fn sub_num(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.num_value(a)? - self.num_value(b)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::SubNum(a, b), Value::Num(value), needs))
    }

    pub fn add_num(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.num_value(a)? + self.num_value(b)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::AddNum(a, b), Value::Num(value), needs))
    }

    pub fn add_num_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.num_value(a)? + k;
        let needs = self.needs(a);
        Ok(self.push(Op::AddNumConst(a), Value::Num(value), needs))
    }

    pub fn relu_num(&mut self, a: Var) -> Result<Var> {
        let value = self.num_value(a)?.max(0.0);
        let needs = self.needs(a);
        Ok(self.push(Op::ReluNum(a), Value::Num(value), needs))
    }

    pub fn mean_nums(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::EmptyInput("mean of no scalars".into()));
        }
        let mut sum = 0.0;
        let mut needs = false;
        for &v in vars {
            sum += self.num_value(v)?;
            needs |= self.needs(v);
        }
        let value = sum / vars.len() as f64;
        Ok(self.push(Op::MeanNums(vars.to_vec()), Value::Num(value), needs))
    }

    /// Convert a 1x1 matrix node into a scalar node.
    pub fn to_num(&mut self, a: Var) -> Result<Var> {
        let m = self.mat_value(a)?;
        if m.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "to_num expects a 1x1 matrix, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let value = m.get(0, 0);
        let needs = self.needs(a);
        Ok(self.push(Op::ToNum(a), Value::Num(value), needs))
    }

    /// Walk the tape in reverse from `root` (a scalar) and return d(root)/d(node)
    /// for every node that transitively feeds it and needs gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.num_value(root)?; // root must be scalar
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Value::Num(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            // Reattach so callers can read it after the pass.
            grads[i] = Some(grad.clone());
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &grad, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        grad: &Value,
        grads: &mut [Option<Value>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g = expect_mat(grad)?;
                let (av, bv) = (self.mat_value(*a)?, self.mat_value(*b)?);
                if self.needs(*a) {
                    accumulate_mat(grads, *a, g.matmul_nt(bv)?)?;
                }
                if self.needs(*b) {
                    accumulate_mat(grads, *b, av.matmul_tn(g)?)?;
                }
            }
            Op::MatMulNT(a, b) => {
                let g = expect_mat(grad)?;
                let (av, bv) = (self.mat_value(*a)?, self.mat_value(*b)?);
                if self.needs(*a) {
                    accumulate_mat(grads, *a, g.matmul(bv)?)?;
                }
                if self.needs(*b) {
                    accumulate_mat(grads, *b, g.matmul_tn(av)?)?;
                }
            }
            Op::Add(a, b) => {
                let g = expect_mat(grad)?;
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate_mat(grads, *v, g.clone())?;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let g = expect_mat(grad)?;
                if self.needs(*a) {
                    accumulate_mat(grads, *a, g.clone())?;
                }
                if self.needs(*row) {
                    let mut sum = Dense2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (s, v) in sum.row_mut(0).iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate_mat(grads, *row, sum)?;
                }
            }
            Op::Scale(a, k) => {
                let g = expect_mat(grad)?;
                if self.needs(*a) {
                    accumulate_mat(grads, *a, g.scale(*k))?;
                }
            }
            Op::AddConstMat(a) => {
                let g = expect_mat(grad)?;
                if self.needs(*a) {
                    accumulate_mat(grads, *a, g.clone())?;
                }
            }
            Op::Relu(a) => {
                let g = expect_mat(grad)?;
                if self.needs(*a) {
                    let input = self.mat_value(*a)?;
                    let masked = Dense2::from_fn(g.rows(), g.cols(), |r, c| {
                        if input.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    accumulate_mat(grads, *a, masked)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let g = expect_mat(grad)?;
                if self.needs(*a) {
                    let y = self.mat_value(Var(i))?;
                    let mut da = Dense2::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gy, yy)| gy * yy).sum();
                        for c in 0..g.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate_mat(grads, *a, da)?;
                }
            }
            Op::EmbedRows { table, ids } => {
                let g = expect_mat(grad)?;
                if self.needs(*table) {
                    let t = self.mat_value(*table)?;
                    let mut dt = Dense2::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate_mat(grads, *table, dt)?;
                }
            }
            Op::AppendRow(a, row) => {
                let g = expect_mat(grad)?;
                let top_rows = g.rows() - 1;
                if self.needs(*a) {
                    let da = Dense2::from_fn(top_rows, g.cols(), |r, c| g.get(r, c));
                    accumulate_mat(grads, *a, da)?;
                }
                if self.needs(*row) {
                    let dr = Dense2::from_fn(1, g.cols(), |_, c| g.get(top_rows, c));
                    accumulate_mat(grads, *row, dr)?;
                }
            }
            Op::Conv2d {
                input,
                weights,
                bias,
                kh,
                kw,
                pad,
            } => {
                let g = expect_vol(grad)?;
                self.backprop_conv2d(*input, *weights, *bias, *kh, *kw, *pad, g, grads)?;
            }
            Op::ReluVol(a) => {
                let g = expect_vol(grad)?;
                if self.needs(*a) {
                    let input = self.vol_value(*a)?;
                    let masked = Dense3::new(
                        g.channels(),
                        g.rows(),
                        g.cols(),
                        g.values()
                            .iter()
                            .zip(input.values())
                            .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate_vol(grads, *a, masked)?;
                }
            }
            Op::TopKChannels { input, sources, .. } => {
                let g = expect_mat(grad)?;
                if self.needs(*input) {
                    let v = self.vol_value(*input)?;
                    let mut dv = Dense3::zeros(v.channels(), v.rows(), v.cols());
                    for (slot, src) in sources.iter().enumerate() {
                        if let Some(flat) = src {
                            dv.values_mut()[*flat] += g.get(slot, 0);
                        }
                    }
                    accumulate_vol(grads, *input, dv)?;
                }
            }
            Op::CrossEntropyCol { logits, target } => {
                let g = expect_num(grad)?;
                if self.needs(*logits) {
                    let z = self.mat_value(*logits)?;
                    let probs = softmax(z.values())?;
                    let mut dz = Dense2::zeros(z.rows(), 1);
                    for (r, p) in probs.iter().enumerate() {
                        dz.set(r, 0, g * p);
                    }
                    dz.set(*target, 0, dz.get(*target, 0) - g);
                    accumulate_mat(grads, *logits, dz)?;
                }
            }
            Op::Sigmoid(a) => {
                let g = expect_num(grad)?;
                if self.needs(*a) {
                    let y = self.num_value(Var(i))?;
                    accumulate_num(grads, *a, g * y * (1.0 - y))?;
                }
            }
            Op::SubNum(a, b) => {
                let g = expect_num(grad)?;
                if self.needs(*a) {
                    accumulate_num(grads, *a, g)?;
                }
                if self.needs(*b) {
                    accumulate_num(grads, *b, -g)?;
                }
            }
            Op::AddNum(a, b) => {
                let g = expect_num(grad)?;
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate_num(grads, *v, g)?;
                    }
                }
            }
            Op::AddNumConst(a) => {
                let g = expect_num(grad)?;
                if self.needs(*a) {
                    accumulate_num(grads, *a, g)?;
                }
            }
            Op::ReluNum(a) => {
                let g = expect_num(grad)?;
                if self.needs(*a) && self.num_value(*a)? > 0.0 {
                    accumulate_num(grads, *a, g)?;
                }
            }
            Op::MeanNums(vars) => {
                let g = expect_num(grad)? / vars.len() as f64;
                for v in vars {
                    if self.needs(*v) {
                        accumulate_num(grads, *v, g)?;
                    }
                }
            }
            Op::ToNum(a) => {
                let g = expect_num(grad)?;
                if self.needs(*a) {
                    accumulate_mat(grads, *a, Dense2::new(1, 1, vec![g])?)?;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        input: Var,
        weights: Var,
        bias: Var,
        kh: usize,
        kw: usize,
        pad: (usize, usize),
        g: &Dense3,
        grads: &mut [Option<Value>],
    ) -> Result<()> {
        let x = self.vol_value(input)?;
        let w = self.mat_value(weights)?;
        let (in_c, rows, cols) = x.shape();
        let mut dx = Dense3::zeros(in_c, rows, cols);
        let mut dw = Dense2::zeros(w.rows(), w.cols());
        let mut db = Dense2::zeros(w.rows(), 1);
        for o in 0..g.channels() {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let gv = g.get(o, r, c);
                    if gv == 0.0 {
                        continue;
                    }
                    db.set(o, 0, db.get(o, 0) + gv);
                    for ic in 0..in_c {
                        for i in 0..kh {
                            let y = (r + i) as isize - pad.0 as isize;
                            if y < 0 || y >= rows as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let xx = (c + j) as isize - pad.1 as isize;
                                if xx < 0 || xx >= cols as isize {
                                    continue;
                                }
                                let widx = (ic * kh + i) * kw + j;
                                let (yu, xu) = (y as usize, xx as usize);
                                dw.set(o, widx, dw.get(o, widx) + gv * x.get(ic, yu, xu));
                                dx.set(ic, yu, xu, dx.get(ic, yu, xu) + gv * w.get(o, widx));
                            }
                        }
                    }
                }
            }
        }
        if self.needs(input) {
            accumulate_vol(grads, input, dx)?;
        }
        if self.needs(weights) {
            accumulate_mat(grads, weights, dw)?;
        }
        if self.needs(bias) {
            accumulate_mat(grads, bias, db)?;
        }
        Ok(())
    }
}

fn expect_mat(v: &Value) -> Result<&Dense2> {
    match v {
        Value::Mat(m) => Ok(m),
        other => Err(Error::Shape(format!(
            "gradient kind mismatch: expected matrix, found {}",
            other.kind()
        ))),
    }
}

fn expect_vol(v: &Value) -> Result<&Dense3> {
    match v {
        Value::Vol(t) => Ok(t),
        other => Err(Error::Shape(format!(
            "gradient kind mismatch: expected tensor, found {}",
            other.kind()
        ))),
    }
}

fn expect_num(v: &Value) -> Result<f64> {
    match v {
        Value::Num(n) => Ok(*n),
        other => Err(Error::Shape(format!(
            "gradient kind mismatch: expected scalar, found {}",
            other.kind()
        ))),
    }
}

fn accumulate_mat(grads: &mut [Option<Value>], var: Var, delta: Dense2) -> Result<()> {
    match &mut grads[var.0] {
        slot @ None => {
            *slot = Some(Value::Mat(delta));
            Ok(())
        }
        Some(Value::Mat(existing)) => existing.add_assign_scaled(&delta, 1.0),
        Some(other) => Err(Error::Shape(format!(
            "gradient kind mismatch: matrix delta onto {}",
            other.kind()
        ))),
    }
}

fn accumulate_vol(grads: &mut [Option<Value>], var: Var, delta: Dense3) -> Result<()> {
    match &mut grads[var.0] {
        slot @ None => {
            *slot = Some(Value::Vol(delta));
            Ok(())
        }
        Some(Value::Vol(existing)) => {
            for (e, d) in existing.values_mut().iter_mut().zip(delta.values()) {
                *e += d;
            }
            Ok(())
        }
        Some(other) => Err(Error::Shape(format!(
            "gradient kind mismatch: tensor delta onto {}",
            other.kind()
        ))),
    }
}

fn accumulate_num(grads: &mut [Option<Value>], var: Var, delta: f64) -> Result<()> {
    match &mut grads[var.0] {
        slot @ None => {
            *slot = Some(Value::Num(delta));
            Ok(())
        }
        Some(Value::Num(existing)) => {
            *existing += delta;
            Ok(())
        }
        Some(other) => Err(Error::Shape(format!(
            "gradient kind mismatch: scalar delta onto {}",
            other.kind()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Dense2 {
        Dense2::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// FD-check a scalar loss built from a single parameter matrix.
    fn fd_check(
        rows: usize,
        cols: usize,
        seed: u64,
        build: impl Fn(&mut GradTape, Var) -> Result<Var>,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let param = rand_mat(&mut rng, rows, cols);

        let mut tape = GradTape::new();
        let p = tape.mat(param.clone(), true);
        let loss = build(&mut tape, p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.mat(p).unwrap().values().to_vec();

        check_gradients(
            |flat| {
                let mut tape = GradTape::new();
                let p = tape.mat(Dense2::new(rows, cols, flat.to_vec())?, true);
                let loss = build(&mut tape, p)?;
                tape.num_value(loss)
            },
            param.values(),
            &analytic,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn matmul_softmax_cross_entropy_gradients_match_fd() {
        let worst = fd_check(4, 3, 1, |tape, p| {
            let x = tape.mat(
                Dense2::from_fn(3, 4, |r, c| ((r * 5 + c) as f64).sin()),
                false,
            );
            let col_w = tape.mat(Dense2::from_fn(3, 1, |r, _| (r as f64) - 1.0), false);
            let logits = tape.matmul(x, p)?; // 3x3
            let probs = tape.softmax_rows(logits)?;
            let col = tape.matmul(probs, col_w)?;
            tape.cross_entropy_col(col, 1)
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    fn tape_const(tape: &mut GradTape, m: Dense2) -> Var {
        tape.mat(m, false)
    }

    #[test]
    fn attention_block_gradients_match_fd() {
        // a miniature of the reader block: scores -> softmax -> context ->
        // relu feed-forward -> cross entropy
        let worst = fd_check(2, 2, 2, |tape, w| {
            let p0 = tape_const(
                tape,
                Dense2::from_fn(4, 2, |r, c| 0.3 * ((r + 2 * c) as f64).cos() + 0.2),
            );
            let q = tape_const(tape, Dense2::from_fn(3, 2, |r, c| 0.5 * (r as f64) - 0.4 * c as f64));
            let pw = tape.matmul(p0, w)?;
            let scores = tape.matmul_nt(pw, q)?;
            let scaled = tape.scale(scores, 1.0 / (2.0f64).sqrt())?;
            let attn = tape.softmax_rows(scaled)?;
            let ctx = tape.matmul(attn, q)?;
            let pre = tape.add(ctx, p0)?;
            let hidden = tape.relu(pre)?;
            let head = tape_const(tape, Dense2::from_fn(2, 1, |r, _| 1.0 - r as f64));
            let logits = tape.matmul(hidden, head)?;
            tape.cross_entropy_col(logits, 2)
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn embed_append_row_gradients_match_fd() {
        let worst = fd_check(5, 3, 3, |tape, table| {
            let null_row = tape.embed_rows(table, &[4])?;
            let gathered = tape.embed_rows(table, &[0, 2, 0])?;
            let stacked = tape.append_row(gathered, null_row)?;
            let head = tape_const(tape, Dense2::from_fn(3, 1, |r, _| 0.7 - 0.3 * r as f64));
            let logits = tape.matmul(stacked, head)?;
            tape.cross_entropy_col(logits, 3)
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn conv_topk_sigmoid_hinge_gradients_match_fd() {
        // a miniature of the confidence head: conv -> relu -> topk -> linear
        // -> sigmoid -> pairwise hinge. Inputs are chosen away from relu and
        // top-k kinks so finite differences are trustworthy.
        let worst = fd_check(2, 2 * 2 * 2, 4, |tape, w| {
            let input = tape_const_vol(
                tape,
                Dense3::new(
                    2,
                    3,
                    4,
                    (0..24).map(|i| 0.9 * ((i * 17 % 23) as f64 / 23.0) + 0.05).collect::<Vec<_>>(),
                )
                .unwrap(),
            );
            let bias = tape.mat(Dense2::new(2, 1, vec![0.31, -0.12]).unwrap(), true);
            let conv = tape.conv2d(input, w, bias, 2, 2, (1, 1))?;
            let act = tape.relu_vol(conv)?;
            let top = tape.topk_channels(act, 3)?;
            let fc = tape_const(tape, Dense2::from_fn(1, 6, |_, c| 0.2 * (c as f64) - 0.5));
            let logit = tape.matmul(fc, top)?;
            let num = tape.to_num(logit)?;
            let score_i = tape.sigmoid(num)?;
            let shifted = tape.add_num_const(score_i, -0.9)?;
            let diff = tape.sub_num(shifted, score_i)?; // contrived pair
            let hinge_arg = tape.add_num_const(diff, 1.0)?;
            let hinge = tape.relu_num(hinge_arg)?;
            tape.mean_nums(&[hinge, score_i])
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    fn tape_const_vol(tape: &mut GradTape, v: Dense3) -> Var {
        tape.vol(v, false)
    }

    #[test]
    fn add_row_and_scale_gradients_match_fd() {
        // A cross-entropy readout would be blind to add_row (a broadcast row
        // shifts every logit equally), so read out through weights that
        // differ per row; every coordinate then has a provably nonzero
        // gradient and the chain stays smooth.
        let worst = fd_check(1, 3, 5, |tape, row| {
            let base = tape_const(
                tape,
                Dense2::from_fn(4, 3, |r, c| (r as f64) * 0.35 - c as f64 * 0.2 - 0.15),
            );
            let shifted = tape.add_row(base, row)?;
            let scaled = tape.scale(shifted, 0.7)?;
            let head = tape_const(tape, Dense2::from_fn(3, 1, |r, _| 0.4 * r as f64 - 0.3));
            let logits = tape.matmul(scaled, head)?;
            let mix = tape_const(
                tape,
                Dense2::new(1, 4, vec![0.3, -0.7, 0.5, 0.2]).unwrap(),
            );
            let combined = tape.matmul(mix, logits)?;
            let num = tape.to_num(combined)?;
            tape.sigmoid(num)
        });
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn tape_values_match_pure_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_mat(&mut rng, 4, 5);
        let mut tape = GradTape::new();
        let v = tape.mat(m.clone(), false);
        let sm = tape.softmax_rows(v).unwrap();
        assert_eq!(
            tape.mat_value(sm).unwrap(),
            &crate::numerics::softmax_rows(&m).unwrap()
        );

        let vol = Dense3::new(1, 3, 3, (0..9).map(|i| i as f64 * 0.5 - 2.0).collect()).unwrap();
        let w = rand_mat(&mut rng, 2, 9);
        let b = rand_mat(&mut rng, 2, 1);
        let vv = tape.vol(vol.clone(), false);
        let wv = tape.mat(w.clone(), false);
        let bv = tape.mat(b.clone(), false);
        let conv = tape.conv2d(vv, wv, bv, 3, 3, (1, 1)).unwrap();
        assert_eq!(
            tape.vol_value(conv).unwrap(),
            &crate::numerics::conv2d(&vol, &w, b.values(), 3, 3, (1, 1)).unwrap()
        );
    }

    #[test]
    fn gradients_do_not_flow_into_frozen_leaves() {
        let mut tape = GradTape::new();
        let frozen = tape.mat(Dense2::from_fn(2, 2, |r, c| (r + c) as f64), false);
        let live = tape.mat(Dense2::from_fn(2, 1, |r, _| r as f64 + 0.5), true);
        let logits = tape.matmul(frozen, live).unwrap();
        let loss = tape.cross_entropy_col(logits, 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.mat(frozen).is_none());
        assert!(grads.mat(live).is_some());
    }

    #[test]
    fn backward_requires_a_scalar_root() {
        let mut tape = GradTape::new();
        let m = tape.mat(Dense2::zeros(2, 2), true);
        assert!(tape.backward(m).is_err());
    }

    #[test]
    fn mean_of_no_scalars_is_an_error() {
        let mut tape = GradTape::new();
        assert!(tape.mean_nums(&[]).is_err());
    }
}
