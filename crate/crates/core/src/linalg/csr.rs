use crate::error::{Result, ShearsError};
use crate::linalg::dense::DenseMatrix;

/// Compressed sparse row matrix. Exact zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f32>,
}

impl CsrMatrix {
    /// Validating constructor.
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let bad = |m: &str| Err(ShearsError::InvalidArgument(format!("csr: {m}")));
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 || row_ptr[rows] != values.len() {
            return bad("row_ptr must have rows+1 entries from 0 to nnz");
        }
        if col_idx.len() != values.len() {
            return bad("col_idx and values differ in length");
        }
        for r in 0..rows {
            if row_ptr[r] > row_ptr[r + 1] {
                return bad("row_ptr must be non-decreasing");
            }
            let cols_in_row = &col_idx[row_ptr[r]..row_ptr[r + 1]];
            if cols_in_row.windows(2).any(|w| w[0] >= w[1]) {
                return bad("column indices must be strictly increasing within a row");
            }
            if cols_in_row.iter().any(|&c| c >= cols) {
                return bad("column index out of range");
            }
        }
        if values.iter().any(|v| *v == 0.0) {
            return bad("explicit zeros are not allowed");
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(m: &DenseMatrix) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..m.rows() {
            for (j, &v) in m.row(i).iter().enumerate() {
                // Drops +0.0 and -0.0 alike.
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.set(i, self.col_idx[p], self.values[p]);
            }
        }
        out
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

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

pub fn csr_from_dense(m: &DenseMatrix) -> CsrMatrix {
    CsrMatrix::from_dense(m)
}

/// Sparse-dense product `s · d`.
pub fn csr_matmul(s: &CsrMatrix, d: &DenseMatrix) -> Result<DenseMatrix> {
    if s.cols != d.rows() {
        return Err(ShearsError::ShapeMismatch {
            op: "csr_matmul",
            lhs: s.shape(),
            rhs: d.shape(),
        });
    }
    let p = d.cols();
    let mut out = DenseMatrix::zeros(s.rows, p);
    let mut acc = vec![-0.0f64; p];
    for i in 0..s.rows {
        acc.fill(-0.0);
        for idx in s.row_ptr[i]..s.row_ptr[i + 1] {
            let v = s.values[idx] as f64;
            for (a, &dv) in acc.iter_mut().zip(d.row(s.col_idx[idx])) {
                *a += v * dv as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    Ok(out)
}

/// `x · sᵀ`: a linear layer whose `[out × in]` weight is held in CSR form.
pub fn dense_matmul_csr_t(x: &DenseMatrix, s: &CsrMatrix) -> Result<DenseMatrix> {
    if x.cols() != s.cols {
        return Err(ShearsError::ShapeMismatch {
            op: "dense_matmul_csr_t",
            lhs: x.shape(),
            rhs: s.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows(), s.rows);
    for i in 0..x.rows() {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for (o, slot) in orow.iter_mut().enumerate() {
            let mut acc = -0.0f64;
            for idx in s.row_ptr[o]..s.row_ptr[o + 1] {
                acc += s.values[idx] as f64 * xrow[s.col_idx[idx]] as f64;
            }
            *slot = acc as f32;
        }
    }
    Ok(out)
}
