//! Dense real matrices and the handful of operations the networks need.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.values)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!("non-finite entry {bad}")));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        m.values.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn column_vector(values: &[f64]) -> Result<Self> {
        Matrix::new(values.len(), 1, values.to_vec())
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.values[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `bias[i]` to every entry of row `i` (the `b·1ᵀ` outer product).
    pub fn add_row_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.rows {
            return Err(Error::dims(
                "add_row_bias",
                format!("bias length {} for {} rows", bias.len(), self.rows),
            ));
        }
        for (i, b) in bias.iter().enumerate() {
            if *b != 0.0 {
                for v in &mut self.values[i * self.cols..(i + 1) * self.cols] {
                    *v += b;
                }
            }
        }
        Ok(())
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidMatrix("hcat of nothing".into()))?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::dims("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.values[i * cols + offset..i * cols + offset + p.cols].copy_from_slice(p.row(i));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    /// Columns `start..start + count` as a new matrix.
    pub fn column_block(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.cols);
        let mut out = Matrix::zeros(self.rows, count);
        for i in 0..self.rows {
            out.values[i * count..(i + 1) * count]
                .copy_from_slice(&self.row(i)[start..start + count]);
        }
        out
    }

    /// Copy with extra zero rows appended at the bottom.
    pub fn pad_rows(&self, rows: usize) -> Matrix {
        assert!(rows >= self.rows);
        let mut values = self.values.clone();
        values.resize(rows * self.cols, 0.0);
        Matrix {
            rows,
            cols: self.cols,
            values,
        }
    }

    /// Copy with extra zero columns appended on the right.
    pub fn pad_cols(&self, cols: usize) -> Matrix {
        assert!(cols >= self.cols);
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.values[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product. Zero entries of `a` are skipped, which keeps the
/// mostly-structural-zero weight matrices cheap to apply.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul",
            format!(
                "left is {}x{}, right is {}x{}",
                a.rows, a.cols, b.rows, b.cols
            ),
        ));
    }
    let n = b.cols;
    let mut out = Matrix::zeros(a.rows, n);
    for i in 0..a.rows {
        let out_row = &mut out.values[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn relu(a: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        values: a.values.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Column-wise softmax with negated exponents: entry `(i, j)` becomes
/// `exp(-a_ij) / sum_k exp(-a_kj)`.
pub fn softmax_columns(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::dims(
            "softmax_columns",
            format!("expected a square matrix, got {}x{}", a.rows, a.cols),
        ));
    }
    let n = a.rows;
    let mut out = Matrix::zeros(n, n);
    for j in 0..n {
        let shift = (0..n).map(|i| -a.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..n).map(|i| (-a.get(i, j) - shift).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    Ok(out)
}
