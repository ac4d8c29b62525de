//! Dense row-major f64 matrix kernels.
//!
//! Matrices here are tiny (a block of a few dozen tokens by a hidden size of
//! a few dozen), so the kernels favour determinism over speed: every
//! reduction runs in a fixed order, which is what lets the split
//! prefix/suffix forward path reproduce the monolithic dense forward bit for
//! bit when nothing is evicted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D array of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from an explicit row-major buffer. `data.len()` must equal
    /// `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} elements cannot back a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {} has {} columns, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// New matrix holding the given rows of `self`, in the order given.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (slot, &r) in idx.iter().enumerate() {
            if r >= self.rows {
                return Err(Error::Shape(format!(
                    "gather row {} out of range for {} rows",
                    r, self.rows
                )));
            }
            out.row_mut(slot).copy_from_slice(self.row(r));
        }
        Ok(out)
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "cannot diff {}x{} against {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut m = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            m = m.max((a - b).abs());
        }
        Ok(m)
    }
}

/// `a @ b` with the classic i-k-j loop order. The inner accumulation order is
/// fixed, so the result is identical no matter how callers slice their work.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} @ {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction, so huge scores cannot overflow and
/// each output row sums to 1 within 1e-12.
pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// 1-D max pooling with "same" output length. Positions past either edge are
/// treated as negative infinity, i.e. the window just shrinks at the borders.
/// `kernel` must be odd so the window is centred.
pub fn maxpool1d_same(v: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "maxpool kernel must be odd and positive, got {}",
            kernel
        )));
    }
    let half = kernel / 2;
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(n.saturating_sub(1));
        let mut m = f64::NEG_INFINITY;
        for &x in &v[lo..=hi] {
            m = m.max(x);
        }
        out.push(m);
    }
    Ok(out)
}

/// Rotary position embedding over adjacent column pairs (2i, 2i+1).
///
/// Pair i of a row at position p is rotated by angle `p * base^(-2i/d)`,
/// which preserves the row norm and makes dot products between rotated
/// queries and keys depend only on their position offset. `x` must have an
/// even number of columns and one position per row.
pub fn apply_rope(x: &Matrix, positions: &[usize], base: f64) -> Result<Matrix> {
    if !x.cols.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rope needs an even column count, got {}",
            x.cols
        )));
    }
    if positions.len() != x.rows {
        return Err(Error::Shape(format!(
            "rope got {} positions for {} rows",
            positions.len(),
            x.rows
        )));
    }
    if base <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rope base must be positive, got {}",
            base
        )));
    }
    let d = x.cols as f64;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..row.len() / 2 {
            let theta = base.powf(-(2.0 * i as f64) / d);
            let angle = pos as f64 * theta;
            let (sin, cos) = angle.sin_cos();
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}

/// Root-mean-square normalization: each row is scaled by
/// `1 / sqrt(mean(x^2) + 1e-6)` and multiplied elementwise by `gain`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::Shape(format!(
            "rms gain of {} for {} columns",
            gain.len(),
            x.cols
        )));
    }
    const EPS: f64 = 1e-6;
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    Ok(out)
}

/// SiLU (x * sigmoid(x)) applied elementwise, used by the MLP blocks.
pub fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data.iter_mut() {
        *v = *v / (1.0 + (-*v).exp());
    }
    out
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
