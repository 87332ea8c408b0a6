//! Dense vectors and matrices plus the normalization primitives.
//!
//! Vectors are plain `[f64]` slices. [`Matrix`] is row-major. Every
//! normalization treats a vanishing spread as an error rather than
//! smoothing it with an epsilon.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold below which a norm or standard deviation counts as zero.
pub const DEFAULT_EPS_ZERO: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a `d x m` matrix whose columns are the given points.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut m = Self::zeros(rows, columns.len());
        for (j, c) in columns.iter().enumerate() {
            let c = c.as_ref();
            if c.len() != rows {
                return Err(Error::Shape(format!(
                    "column {j} has {} entries, expected {rows}",
                    c.len()
                )));
            }
            for (i, v) in c.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(m)
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

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn columns(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.cols).map(move |j| self.column(j))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} matrix to a vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute difference between `self` and its transpose.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows && self.cols != 0 && other.cols != 0 {
            return Err(Error::Shape(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols: Vec<Vec<f64>> = self.columns().chain(other.columns()).collect();
        Matrix::from_columns(&cols)
    }

    /// Applies `x -> W x + b` to every column.
    pub fn map_columns(&self, w: &Matrix, b: &[f64]) -> Result<Matrix> {
        let cols = self
            .columns()
            .map(|c| apply_affine(w, b, &c))
            .collect::<Result<Vec<_>>>()?;
        if cols.is_empty() {
            return Ok(Matrix::zeros(w.rows(), 0));
        }
        Matrix::from_columns(&cols)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Per-vector statistics used by layer normalization. `stddev` is the
/// population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub stddev: f64,
}

impl NormStats {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            stddev: var.sqrt(),
        }
    }

    pub fn variance(&self) -> f64 {
        self.stddev * self.stddev
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sum of squared deviations of the columns of `x` from their mean.
pub fn sum_of_squares(x: &Matrix) -> Result<f64> {
    if x.cols() == 0 {
        return Err(Error::Degenerate("sum of squares of an empty point set".into()));
    }
    let m = x.cols() as f64;
    let mut total = 0.0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / m;
        total += row.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Sum of squares of a scalar sample.
pub fn sum_of_squares_1d(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mu = mean(x);
    x.iter().map(|v| (v - mu).powi(2)).sum()
}

/// Projects `x` onto the hyperplane of zero coordinate sum.
pub fn center(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mu = mean(x);
    x.iter().map(|v| v - mu).collect()
}

/// `x / ||x||` onto the unit sphere.
pub fn spherical_project(x: &[f64]) -> Result<Vec<f64>> {
    spherical_project_eps(x, DEFAULT_EPS_ZERO)
}

pub fn spherical_project_eps(x: &[f64], eps_zero: f64) -> Result<Vec<f64>> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(Error::NonFinite("spherical projection input"));
    }
    if n <= eps_zero {
        return Err(Error::Degenerate(format!(
            "spherical projection of a vector with norm {n:e}"
        )));
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Layer normalization `(x - mu) / sigma`; the output has zero mean and
/// squared norm `d`.
pub fn layer_norm(x: &[f64]) -> Result<Vec<f64>> {
    layer_norm_eps(x, DEFAULT_EPS_ZERO)
}

pub fn layer_norm_eps(x: &[f64], eps_zero: f64) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::Shape(format!(
            "layer norm needs at least 2 neurons, got {}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer norm input"));
    }
    let stats = NormStats::of(x);
    if stats.stddev <= eps_zero {
        return Err(Error::Degenerate(format!(
            "layer norm of a vector with standard deviation {:e}",
            stats.stddev
        )));
    }
    Ok(x.iter().map(|v| (v - stats.mean) / stats.stddev).collect())
}

/// Splits `x` into `groups` contiguous groups and layer-normalizes each.
pub fn group_layer_norm(x: &[f64], groups: usize) -> Result<Vec<f64>> {
    group_layer_norm_eps(x, groups, DEFAULT_EPS_ZERO)
}

pub fn group_layer_norm_eps(x: &[f64], groups: usize, eps_zero: f64) -> Result<Vec<f64>> {
    let size = group_size(x.len(), groups)?;
    let mut out = Vec::with_capacity(x.len());
    for (g, chunk) in x.chunks(size).enumerate() {
        let y = layer_norm_eps(chunk, eps_zero).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!("group {g}: {msg}")),
            other => other,
        })?;
        out.extend(y);
    }
    Ok(out)
}

/// Validates a `(d, g)` grouping and returns the group size `d / g`.
pub fn group_size(dim: usize, groups: usize) -> Result<usize> {
    if groups == 0 || dim % groups != 0 {
        return Err(Error::Shape(format!(
            "{groups} groups do not divide {dim} neurons"
        )));
    }
    let size = dim / groups;
    if size < 2 {
        return Err(Error::Degenerate(format!(
            "group size {size} has zero variance by construction"
        )));
    }
    Ok(size)
}

/// `W x + b`.
pub fn apply_affine(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(Error::Shape(format!(
            "bias of length {} for a {}x{} weight",
            b.len(),
            w.rows(),
            w.cols()
        )));
    }
    let mut y = w.matvec(x)?;
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    Ok(y)
}

/// Composition of two affine maps, first `(w1, b1)` then `(w2, b2)`:
/// returns `(W2 W1, W2 b1 + b2)`.
pub fn compose_affine(
    w1: &Matrix,
    b1: &[f64],
    w2: &Matrix,
    b2: &[f64],
) -> Result<(Matrix, Vec<f64>)> {
    let w = w2.matmul(w1)?;
    let b = apply_affine(w2, b2, b1)?;
    Ok((w, b))
}
