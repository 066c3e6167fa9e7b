use serde::{Deserialize, Serialize};

use crate::error::{Result, ShearsError};

/// Row-major `f32` matrix. Products accumulate in `f64` and round once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(ShearsError::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(ShearsError::InvalidArgument("ragged rows".into()));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
        })
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        out
    }

    /// Leading `n` columns.
    pub fn slice_cols(&self, n: usize) -> Self {
        assert!(n <= self.cols);
        Self::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    /// Leading `n` rows.
    pub fn slice_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows);
        Self {
            rows: n,
            cols: self.cols,
            values: self.values[..n * self.cols].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise sum in `f32`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("add", other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ShearsError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }
}

/// Standard product `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(ShearsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = DenseMatrix::zeros(m, p);
    // -0.0 is the additive identity, so a product with the identity matrix is exact.
    let mut acc = vec![-0.0f64; p];
    for i in 0..m {
        acc.fill(-0.0);
        let arow = a.row(i);
        for k in 0..n {
            let aik = arow[k] as f64;
            let brow = &b.values[k * p..(k + 1) * p];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += aik * bv as f64;
            }
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot_f64(x: &[f32], y: &[f32]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut lanes = [-0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let b = c * 4;
        lanes[0] += x[b] as f64 * y[b] as f64;
        lanes[1] += x[b + 1] as f64 * y[b + 1] as f64;
        lanes[2] += x[b + 2] as f64 * y[b + 2] as f64;
        lanes[3] += x[b + 3] as f64 * y[b + 3] as f64;
    }
    let mut tail = -0.0f64;
    for k in chunks * 4..x.len() {
        tail += x[k] as f64 * y[k] as f64;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// `a · bᵀ` without materializing the transpose. Used for `x · Wᵀ` with
/// weights stored `[out × in]`.
pub fn matmul_a_bt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(ShearsError::ShapeMismatch {
            op: "matmul_a_bt",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.values[i * b.rows..(i + 1) * b.rows];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot_f64(arow, b.row(j)) as f32;
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose. Used for weight gradients.
pub fn matmul_at_b(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(ShearsError::ShapeMismatch {
            op: "matmul_at_b",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, p) = (a.cols, b.cols);
    let mut acc = vec![-0.0f64; m * p];
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &aki) in arow.iter().enumerate() {
            let aki = aki as f64;
            for (s, &bv) in acc[i * p..(i + 1) * p].iter_mut().zip(brow) {
                *s += aki * bv as f64;
            }
        }
    }
    Ok(DenseMatrix {
        rows: m,
        cols: p,
        values: acc.into_iter().map(|v| v as f32).collect(),
    })
}

/// Per-column sum of squares in `f64`, the accumulator behind [`column_l2_norms`].
pub fn column_sum_squares(x: &DenseMatrix) -> Vec<f64> {
    let mut acc = vec![0.0f64; x.cols];
    for i in 0..x.rows {
        for (s, &v) in acc.iter_mut().zip(x.row(i)) {
            *s += v as f64 * v as f64;
        }
    }
    acc
}

/// Euclidean norm of every column over all rows (tokens).
pub fn column_l2_norms(x: &DenseMatrix) -> Result<Vec<f32>> {
    if x.rows == 0 {
        return Err(ShearsError::EmptyInput("column_l2_norms needs at least one row"));
    }
    Ok(column_sum_squares(x)
        .into_iter()
        .map(|s| s.sqrt() as f32)
        .collect())
}
