//! Dense row-major matrices and the handful of differentiable layer
//! primitives the models need, each with a hand-written backward pass.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "{:?}", self.row(r))?;
        }
        if self.rows > 8 {
            write!(f, " ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("from_vec", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &x) in self.row(r).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in out_row.iter_mut().zip(other.row(k)) {
                    *o += x * w;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim("t_matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let rhs = other.row(r);
            for (i, &x) in self.row(r).iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &w) in out_row.iter_mut().zip(rhs) {
                    *o += x * w;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("matmul_t", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let lhs = self.row(r);
            for c in 0..other.rows {
                out.data[r * other.rows + c] = dot(lhs, other.row(c));
            }
        }
        Ok(out)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("hadamard", self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Matrix-vector product `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::dim("mul_vec", self.shape(), (v.len(), 1)));
        }
        Ok(self.row_iter().map(|row| dot(row, v)).collect())
    }

    /// Row vector-matrix product `vᵀ · self`.
    pub fn vec_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::dim("vec_mul", (1, v.len()), self.shape()));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &x) in self.row_iter().zip(v) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        Ok(out)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols != w.rows {
        return Err(Error::dim("affine", x.shape(), w.shape()));
    }
    if b.len() != w.cols {
        return Err(Error::dim("affine bias", w.shape(), (1, b.len())));
    }
    let mut out = x.matmul(w)?;
    for row in out.data.chunks_exact_mut(w.cols.max(1)) {
        for (o, bias) in row.iter_mut().zip(b) {
            *o += bias;
        }
    }
    if !out.is_finite() {
        return Err(Error::Contract("affine produced a non-finite value".into()));
    }
    Ok(out)
}

/// Gradients of one layer: parameter gradients shaped like the parameters
/// and the gradient with respect to the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

/// Backward pass of [`affine`] given the upstream gradient `grad_out`.
pub fn affine_backward(x: &Matrix, w: &Matrix, grad_out: &Matrix) -> Result<LayerGrads> {
    if grad_out.rows != x.rows || grad_out.cols != w.cols {
        return Err(Error::dim("affine_backward", x.shape(), grad_out.shape()));
    }
    Ok(LayerGrads {
        weight: x.t_matmul(grad_out)?,
        bias: grad_out.column_sums(),
        input: grad_out.matmul_t(w)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    SoftmaxRows,
    Relu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn activate(x: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Tanh => x.map(f64::tanh),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::SoftmaxRows => {
            let mut out = Matrix::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                out.row_mut(r).copy_from_slice(&softmax(x.row(r)));
            }
            out
        }
    }
}

/// Backward pass of an elementwise activation, expressed through its output
/// (`out`) and, for relu, its input (`pre`). Softmax is handled by the losses.
pub fn activation_backward(kind: Activation, pre: &Matrix, out: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
    if out.shape() != grad_out.shape() || pre.shape() != out.shape() {
        return Err(Error::dim("activation_backward", out.shape(), grad_out.shape()));
    }
    let data = match kind {
        Activation::Tanh => out.data.iter().zip(&grad_out.data).map(|(y, g)| g * (1.0 - y * y)).collect(),
        Activation::Sigmoid => out.data.iter().zip(&grad_out.data).map(|(y, g)| g * y * (1.0 - y)).collect(),
        Activation::Relu => pre
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
        Activation::SoftmaxRows => {
            let mut data = Vec::with_capacity(out.data.len());
            for r in 0..out.rows {
                let y = out.row(r);
                let g = grad_out.row(r);
                let inner = dot(y, g);
                data.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)));
            }
            data
        }
    };
    Ok(Matrix {
        rows: out.rows,
        cols: out.cols,
        data,
    })
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows {
        return Err(Error::dim("cross_entropy", logits.shape(), (targets.len(), 1)));
    }
    if logits.rows == 0 {
        return Err(Error::Contract("cross_entropy over zero rows".into()));
    }
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::Contract(format!(
                "target {t} out of range for {} classes",
                logits.cols
            )));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (row[c] - lse).exp() / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok(((loss / n).max(0.0), grad))
}

/// Compares an analytic gradient against central differences with step `h`.
///
/// `f` returns the value and analytic gradient at a parameter vector. The
/// result is the largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut f: F, theta: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(theta);
    assert_eq!(analytic.len(), theta.len(), "gradient length must match parameters");
    let mut probe = theta.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let (plus, _) = f(&probe);
        probe[i] = theta[i] - h;
        let (minus, _) = f(&probe);
        probe[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Models and gradient containers that expose their parameters as an ordered
/// list of flat slices.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.param_count();
        if flat.len() != total {
            return Err(Error::dim("load_flat", (total, 1), (flat.len(), 1)));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            let len = slice.len();
            slice.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
