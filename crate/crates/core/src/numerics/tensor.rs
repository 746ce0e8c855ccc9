//! Dense row-major f64 tensors and the pure kernels behind every tape op.
//!
//! Every exposed kernel checks its output for NaN/Inf; a non-finite value is
//! an error, never a silent state.

use super::{NumericsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Tanh,
    Square,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(NumericsError::DimensionMismatch {
                op: "transpose",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Gather rows of a 2-D tensor by index, preserving order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(NumericsError::DimensionMismatch {
                op: "gather_rows",
                lhs: self.shape.clone(),
                rhs: vec![idx.len()],
            });
        }
        let cols = self.shape[1];
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Tensor::new(vec![idx.len(), cols], out)
    }

    /// Row `i` of a 2-D tensor as a plain slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { op, index: i });
            }
        }
        Ok(self)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-aligned broadcast shape, or an error when some axis pair is
/// incompatible (neither equal nor one of them 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(NumericsError::DimensionMismatch {
                op: "broadcast",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast up to `out_shape`
/// (stride 0 on stretched axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        s[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    s
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NumericsError::DimensionMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

pub fn apply_binary(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let so = strides(&out_shape);
    let mut out = vec![0.0; numel];
    for (flat, slot) in out.iter_mut().enumerate() {
        let (mut ia, mut ib, mut rem) = (0usize, 0usize, flat);
        for d in 0..out_shape.len() {
            let c = rem / so[d];
            rem %= so[d];
            ia += c * sa[d];
            ib += c * sb[d];
        }
        let (x, y) = (a.data[ia], b.data[ib]);
        *slot = match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
    }
    Tensor::new(out_shape, out)?.check_finite(binary_name(kind))
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

pub fn apply_unary(kind: UnaryKind, a: &Tensor) -> Result<Tensor> {
    if kind == UnaryKind::Log {
        for (i, &v) in a.data.iter().enumerate() {
            if v <= 0.0 {
                return Err(NumericsError::Domain {
                    op: "log",
                    index: i,
                    value: v,
                });
            }
        }
    }
    let data = a
        .data
        .iter()
        .map(|&x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Square => x * x,
            UnaryKind::Softplus => softplus(x),
        })
        .collect();
    Tensor::new(a.shape.clone(), data)?.check_finite(unary_name(kind))
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Neg => "neg",
        UnaryKind::Exp => "exp",
        UnaryKind::Log => "log",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::Relu => "relu",
        UnaryKind::Tanh => "tanh",
        UnaryKind::Square => "square",
        UnaryKind::Softplus => "softplus",
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

/// Overflow-safe log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn reduce(kind: ReduceKind, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => {
            let total: f64 = a.data.iter().sum();
            let v = match kind {
                ReduceKind::Sum => total,
                ReduceKind::Mean => total / a.data.len() as f64,
            };
            Tensor::scalar(v).check_finite("reduce")
        }
        Some(ax) => {
            if ax >= a.shape.len() {
                return Err(NumericsError::InvalidAxis {
                    axis: ax,
                    shape: a.shape.clone(),
                });
            }
            let out_shape: Vec<usize> = a
                .shape
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != ax)
                .map(|(_, &e)| e)
                .collect();
            let extent = a.shape[ax];
            let inner: usize = a.shape[ax + 1..].iter().product();
            let outer: usize = a.shape[..ax].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += a.data[base + i];
                    }
                }
            }
            if kind == ReduceKind::Mean {
                for v in &mut out {
                    *v /= extent as f64;
                }
            }
            Tensor::new(out_shape, out)?.check_finite("reduce")
        }
    }
}

/// Stable max + log sum exp(x - max) along `axis`; the axis is dropped.
pub fn log_sum_exp(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.shape.len() {
        return Err(NumericsError::InvalidAxis {
            axis,
            shape: a.shape.clone(),
        });
    }
    let extent = a.shape[axis];
    if extent == 0 {
        return Err(NumericsError::EmptyAxis("log_sum_exp"));
    }
    let out_shape: Vec<usize> = a
        .shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &e)| e)
        .collect();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let outer: usize = a.shape[..axis].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for e in 0..extent {
                mx = mx.max(a.data[(o * extent + e) * inner + i]);
            }
            let mut s = 0.0;
            for e in 0..extent {
                s += (a.data[(o * extent + e) * inner + i] - mx).exp();
            }
            out[o * inner + i] = mx + s.ln();
        }
    }
    Tensor::new(out_shape, out)?.check_finite("log_sum_exp")
}

/// Stable log-sum-exp of a plain slice (evaluation hot path).
pub fn log_sum_exp_slice(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| x.clamp(lo, hi)).collect();
    Tensor::new(a.shape.clone(), data)?.check_finite("clamp")
}

/// Columns [start, end) of a 2-D tensor.
pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    if a.shape.len() != 2 || end > a.shape[1] || start > end {
        return Err(NumericsError::DimensionMismatch {
            op: "slice_cols",
            lhs: a.shape.clone(),
            rhs: vec![start, end],
        });
    }
    let (rows, cols) = (a.shape[0], a.shape[1]);
    let width = end - start;
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&a.data[r * cols + start..r * cols + end]);
    }
    Tensor::new(vec![rows, width], out)
}

/// Sum a gradient back down to `shape` after broadcasting (leading axes
/// summed away, size-1 axes summed in place).
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let mut g = grad.clone();
    while g.shape.len() > shape.len() {
        g = reduce(ReduceKind::Sum, &g, Some(0))?;
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape[ax] != 1 {
            let summed = reduce(ReduceKind::Sum, &g, Some(ax))?;
            let mut s = summed.shape.clone();
            s.insert(ax, 1);
            g = summed.reshape(s)?;
        }
    }
    g.reshape(shape.to_vec())
}

/// Expand a reduced tensor back over a dropped axis (each slot repeated).
pub fn expand_axis(a: &Tensor, axis: usize, extent: usize) -> Result<Tensor> {
    let mut out_shape = a.shape.clone();
    out_shape.insert(axis, extent);
    let inner: usize = a.shape[axis..].iter().product();
    let outer: usize = a.shape[..axis].iter().product();
    let mut out = vec![0.0; outer * extent * inner];
    for o in 0..outer {
        for e in 0..extent {
            for i in 0..inner {
                out[(o * extent + e) * inner + i] = a.data[o * inner + i];
            }
        }
    }
    Tensor::new(out_shape, out)
}
