//! Minimal dense numerics: row-major f64 containers, the handful of kernels
//! the models need (softmax, convolution, sorted top-k), and a finite
//! difference gradient checker. Heavier machinery lives in [`tape`].

pub mod tape;

pub use tape::{GradTape, Gradients, Value, Var};

use crate::error::{Error, Result};

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Dense2 {
    /// Build from explicit values; every entry must be finite and the length
    /// must equal `rows * cols`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "matrix contains non-finite value {bad}"
            )));
        }
        Ok(Dense2 { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense2 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Dense2 { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self @ rhs`.
    pub fn matmul(&self, rhs: &Dense2) -> Result<Dense2> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} @ {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Dense2::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self @ rhs.T`.
    pub fn matmul_nt(&self, rhs: &Dense2) -> Result<Dense2> {
        if self.cols != rhs.cols {
            return Err(Error::Shape(format!(
                "matmul_nt: {}x{} @ ({}x{}).T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Dense2::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                let dot: f64 = a_row.iter().zip(rhs.row(j)).map(|(x, y)| x * y).sum();
                out.values[i * rhs.rows + j] = dot;
            }
        }
        Ok(out)
    }

    /// `self.T @ rhs`.
    pub fn matmul_tn(&self, rhs: &Dense2) -> Result<Dense2> {
        if self.rows != rhs.rows {
            return Err(Error::Shape(format!(
                "matmul_tn: ({}x{}).T @ {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Dense2::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for i in 0..self.cols {
                let a = a_row[i];
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Dense2) -> Result<Dense2> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "add: {}x{} + {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&rhs.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Dense2 {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    /// `self += scale * rhs`, used by optimizers and gradient accumulation.
    pub fn add_assign_scaled(&mut self, rhs: &Dense2, scale: f64) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "add_assign_scaled: {}x{} += {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&rhs.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Dense2 {
        Dense2 {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * k).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense2 {
        Dense2 {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Row-major dense rank-3 tensor (channel, row, column) of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense3 {
    channels: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Dense3 {
    pub fn new(channels: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * rows * cols {
            return Err(Error::Shape(format!(
                "tensor {channels}x{rows}x{cols} needs {} values, got {}",
                channels * rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "tensor contains non-finite value {bad}"
            )));
        }
        Ok(Dense3 {
            channels,
            rows,
            cols,
            values,
        })
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Dense3 {
            channels,
            rows,
            cols,
            values: vec![0.0; channels * rows * cols],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn idx(&self, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(c < self.channels && r < self.rows && col < self.cols);
        (c * self.rows + r) * self.cols + col
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.values[self.idx(c, r, col)]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        let i = self.idx(c, r, col);
        self.values[i] = v;
    }

    /// Contiguous values of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.rows * self.cols;
        &self.values[c * plane..(c + 1) * plane]
    }
}

/// Numerically stable softmax: subtracts the max before exponentiating, so
/// arbitrarily large finite inputs cannot overflow.
pub fn softmax(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("softmax of an empty slice".into()));
    }
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "softmax input contains non-finite value {bad}"
        )));
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax applied independently to every row.
pub fn softmax_rows(m: &Dense2) -> Result<Dense2> {
    let mut out = Dense2::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let row = softmax(m.row(r))?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// 2-D cross-correlation over a multi-channel input with zero padding.
///
/// `weights` has one row per output channel, laid out as
/// `(in_channel, kernel_row, kernel_col)`; `bias` has one entry per output
/// channel. Output extents are `rows + 2*pad.0 - kh + 1` by
/// `cols + 2*pad.1 - kw + 1` and must stay positive.
pub fn conv2d(
    input: &Dense3,
    weights: &Dense2,
    bias: &[f64],
    kh: usize,
    kw: usize,
    pad: (usize, usize),
) -> Result<Dense3> {
    let (in_c, rows, cols) = input.shape();
    if kh == 0 || kw == 0 {
        return Err(Error::InvalidInput("conv2d kernel extents must be positive".into()));
    }
    if weights.cols() != in_c * kh * kw {
        return Err(Error::Shape(format!(
            "conv2d weights have {} columns, expected {} ({} channels x {}x{} kernel)",
            weights.cols(),
            in_c * kh * kw,
            in_c,
            kh,
            kw
        )));
    }
    let out_c = weights.rows();
    if bias.len() != out_c {
        return Err(Error::Shape(format!(
            "conv2d bias has {} entries for {} output channels",
            bias.len(),
            out_c
        )));
    }
    let padded_rows = rows + 2 * pad.0;
    let padded_cols = cols + 2 * pad.1;
    if padded_rows < kh || padded_cols < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {padded_rows}x{padded_cols}"
        )));
    }
    let out_rows = padded_rows - kh + 1;
    let out_cols = padded_cols - kw + 1;
    let mut out = Dense3::zeros(out_c, out_rows, out_cols);
    for o in 0..out_c {
        let w_row = weights.row(o);
        for r in 0..out_rows {
            for c in 0..out_cols {
                let mut acc = bias[o];
                for ic in 0..in_c {
                    for i in 0..kh {
                        let y = (r + i) as isize - pad.0 as isize;
                        if y < 0 || y >= rows as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let x = (c + j) as isize - pad.1 as isize;
                            if x < 0 || x >= cols as isize {
                                continue;
                            }
                            acc += w_row[(ic * kh + i) * kw + j]
                                * input.get(ic, y as usize, x as usize);
                        }
                    }
                }
                out.set(o, r, c, acc);
            }
        }
    }
    Ok(out)
}

/// Largest `k` values in descending order, zero-padded on the right when the
/// input has fewer than `k` entries. Ties keep the lower index first.
pub fn sorted_topk(xs: &[f64], k: usize) -> Result<Vec<f64>> {
    Ok(sorted_topk_with_sources(xs, k)?.0)
}

/// Like [`sorted_topk`] but also reports, per output slot, the index the
/// value came from (`None` for zero padding). This is what gradient routing
/// uses: each selected input receives exactly its slot's gradient.
pub fn sorted_topk_with_sources(xs: &[f64], k: usize) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    if k == 0 {
        return Err(Error::InvalidInput("sorted_topk requires k >= 1".into()));
    }
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sorted_topk input contains non-finite value {bad}"
        )));
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| {
        xs[b].partial_cmp(&xs[a])
            .expect("finiteness checked above")
            .then(a.cmp(&b))
    });
    let mut values = Vec::with_capacity(k);
    let mut sources = Vec::with_capacity(k);
    for slot in 0..k {
        match order.get(slot) {
            Some(&i) => {
                values.push(xs[i]);
                sources.push(Some(i));
            }
            None => {
                values.push(0.0);
                sources.push(None);
            }
        }
    }
    Ok((values, sources))
}

/// Compare analytic gradients against central finite differences of `loss`
/// and return the worst relative error, where the relative error of pair
/// `(a, n)` is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "check_gradients: {} params but {} analytic entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidInput(format!(
            "check_gradients step {step} must be positive and finite"
        )));
    }
    let mut scratch = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..scratch.len() {
        let original = scratch[i];
        scratch[i] = original + step;
        let up = loss(&scratch)?;
        scratch[i] = original - step;
        let down = loss(&scratch)?;
        scratch[i] = original;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::InvalidInput(format!(
                "loss returned a non-finite value near parameter {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Xavier/Glorot uniform initialization: entries drawn from
/// `U(-b, b)` with `b = sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: rand::Rng>(rng: &mut R, rows: usize, cols: usize) -> Dense2 {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Dense2::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Adam optimizer state over a fixed list of parameter shapes.
pub struct Adam {
    m: Vec<Dense2>,
    v: Vec<Dense2>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(shapes: Vec<(usize, usize)>, lr: f64) -> Self {
        Adam {
            m: shapes.iter().map(|&(r, c)| Dense2::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Dense2::zeros(r, c)).collect(),
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Dense2>, grads: &[Dense2]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer saw {} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bias1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bias2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            for ((p, g), (mm, vv)) in param
                .values_mut()
                .iter_mut()
                .zip(grad.values())
                .zip(m.values_mut().iter_mut().zip(v.values_mut()))
            {
                *mm = Self::BETA1 * *mm + (1.0 - Self::BETA1) * g;
                *vv = Self::BETA2 * *vv + (1.0 - Self::BETA2) * g * g;
                let m_hat = *mm / bias1;
                let v_hat = *vv / bias2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
        Ok(())
    }
}
