//! Dense 4-D tensors, 2-D matrices and the scalar kernels built on them.
//!
//! Layout is row-major `(batch, channel, row, col)` over contiguous `f32`
//! storage. All operations are pure functions over immutable inputs; any
//! internal parallelism computes each output element independently with a
//! fixed reduction order, so results are bit-identical across thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 4-D array of `f32` in `(batch, channels, height, width)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new".into(),
                expected: format!("{expect} values for shape {shape:?}"),
                actual: format!("{}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_fn(
        shape: [usize; 4],
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Tensor::zeros(shape);
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        let i = t.idx(n, c, y, x);
                        t.data[i] = f(n, c, y, x);
                    }
                }
            }
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `height*width` slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Copy one channel plane out as a matrix.
    pub fn plane_matrix(&self, n: usize, c: usize) -> Matrix {
        Matrix {
            rows: self.shape[2],
            cols: self.shape[3],
            data: self.plane(n, c).to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense 2-D array of `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::new".into(),
                expected: format!("{} values for {rows}x{cols}", rows * cols),
                actual: format!("{}", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Per-channel affine normalization with stored statistics (inference mode):
/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn batch_norm_apply(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = input.channels();
    for (name, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("mean", mean),
        ("var", var),
    ] {
        if v.len() != c {
            return Err(Error::ShapeMismatch {
                context: format!("batch_norm {name}"),
                expected: format!("{c} channels"),
                actual: format!("{}", v.len()),
            });
        }
    }
    for (ch, v) in var.iter().enumerate() {
        if v + eps <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm channel {ch}: var + eps = {} is not positive",
                v + eps
            )));
        }
    }
    let hw = input.height() * input.width();
    let mut out = input.clone();
    for n in 0..input.batch() {
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + eps).sqrt();
            let start = (n * c + ch) * hw;
            for v in &mut out.data_mut()[start..start + hw] {
                *v = (*v - mean[ch]) * inv_std * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Max pooling over `k x k` windows.
pub fn max_pool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    if k < 1 || stride < 1 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d: kernel {k} and stride {stride} must be >= 1"
        )));
    }
    let (h, w) = (input.height(), input.width());
    if k > h || k > w {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d: {k}x{k} window larger than {h}x{w} input"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros([input.batch(), input.channels(), oh, ow]);
    for n in 0..input.batch() {
        for c in 0..input.channels() {
            let plane = input.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            let v = plane[row + kx];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    out.set(n, c, oy, ox, m);
                }
            }
        }
    }
    Ok(out)
}

/// Numerical rank by row reduction, pivoting on the largest remaining entry.
///
/// A pivot counts toward the rank while its magnitude exceeds
/// `rel_tol * max(rows, cols) * |first pivot|`; the first pivot is the
/// largest entry of the matrix. Elimination runs in f64.
pub fn matrix_rank(m: &Matrix, rel_tol: f32) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return 0;
    }
    let mut a: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
    let at = |a: &[f64], r: usize, c: usize| a[r * cols + c];

    let max_rank = rows.min(cols);
    let mut rank = 0;
    let mut threshold = 0.0f64;
    while rank < max_rank {
        // largest entry of the active submatrix
        let (mut pr, mut pc, mut pv) = (rank, rank, 0.0f64);
        for r in rank..rows {
            for c in rank..cols {
                let v = at(&a, r, c).abs();
                if v > pv {
                    pv = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        if rank == 0 {
            if pv == 0.0 {
                return 0;
            }
            threshold = rel_tol as f64 * rows.max(cols) as f64 * pv;
        }
        if pv <= threshold {
            break;
        }
        // move the pivot to (rank, rank)
        if pr != rank {
            for c in 0..cols {
                a.swap(pr * cols + c, rank * cols + c);
            }
        }
        if pc != rank {
            for r in 0..rows {
                a.swap(r * cols + pc, r * cols + rank);
            }
        }
        let pivot = at(&a, rank, rank);
        for r in rank + 1..rows {
            let f = at(&a, r, rank) / pivot;
            if f != 0.0 {
                for c in rank..cols {
                    a[r * cols + c] -= f * a[rank * cols + c];
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Default relative tolerance for [`matrix_rank`] across the toolkit.
///
/// Sits just above the f32 rounding floor of the stored values: small enough
/// that per-filter ranks stay stable across calibration inputs, large enough
/// that genuinely deficient directions (for example maps of zeroed filters,
/// or rank-limited constructions) are still cut off.
pub const DEFAULT_RANK_REL_TOL: f32 = 1e-7;
