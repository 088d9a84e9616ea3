//! Row-major sparse square matrices for the idiosyncratic components.
//!
//! Entries are kept per row, sorted by column. Rows are densified for
//! coordinate descent and re-sparsified afterwards, so exact zeros produced
//! by soft thresholding define the support used by the OLS refinement.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Threshold below which re-sparsification drops an entry.
pub const SPARSE_DROP_TOL: f64 = 1e-12;

/// Square sparse matrix stored as sorted `(column, value)` lists per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    dim: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    /// All-zero matrix of size `dim x dim`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            rows: vec![Vec::new(); dim],
        }
    }

    /// Builds from a dense matrix, dropping entries below `tol` in magnitude.
    pub fn from_dense(dense: &DMatrix<f64>, tol: f64) -> Self {
        let dim = dense.nrows();
        let rows = (0..dim)
            .map(|i| {
                (0..dense.ncols())
                    .filter_map(|j| {
                        let v = dense[(i, j)];
                        (v.abs() > tol).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self { dim, rows }
    }

    /// Builds from `(row, col, value)` triplets.
    pub fn from_triplets(dim: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut out = Self::zeros(dim);
        for &(i, j, v) in triplets {
            if v != 0.0 {
                out.rows[i].push((j, v));
            }
        }
        for row in &mut out.rows {
            row.sort_unstable_by_key(|&(j, _)| j);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.nnz() == 0
    }

    /// Sparse entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Replaces row `i` from a dense buffer, dropping entries below `tol`.
    pub fn set_row_from_dense(&mut self, i: usize, dense: &[f64], tol: f64) {
        self.rows[i] = dense
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| (v.abs() > tol).then_some((j, v)))
            .collect();
    }

    /// Writes row `i` into `buf` (which is zeroed first).
    pub fn densify_row_into(&self, i: usize, buf: &mut [f64]) {
        buf.fill(0.0);
        for &(j, v) in &self.rows[i] {
            buf[j] = v;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[(i, j)] = v;
            }
        }
        out
    }

    /// `(row, col, value)` triplets in row-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, v)| (i, j, v)))
            .collect()
    }

    /// Sum of absolute values of all entries.
    pub fn l1_norm(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|row| row.iter().map(|&(_, v)| v.abs()))
            .sum()
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn frob_sq_diff(&self, other: &Self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.dim {
            let (a, b) = (&self.rows[i], &other.rows[i]);
            let (mut ka, mut kb) = (0, 0);
            while ka < a.len() || kb < b.len() {
                match (a.get(ka), b.get(kb)) {
                    (Some(&(ja, va)), Some(&(jb, vb))) if ja == jb => {
                        total += (va - vb) * (va - vb);
                        ka += 1;
                        kb += 1;
                    }
                    (Some(&(ja, va)), Some(&(jb, _))) if ja < jb => {
                        total += va * va;
                        ka += 1;
                    }
                    (Some(_), Some(&(_, vb))) => {
                        total += vb * vb;
                        kb += 1;
                    }
                    (Some(&(_, va)), None) => {
                        total += va * va;
                        ka += 1;
                    }
                    (None, Some(&(_, vb))) => {
                        total += vb * vb;
                        kb += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
        }
        total
    }

    /// Scales every entry of row `i` by `factor`, dropping the row if the
    /// factor is zero.
    pub fn scale_row(&mut self, i: usize, factor: f64) {
        if factor == 0.0 {
            self.rows[i].clear();
        } else {
            for entry in &mut self.rows[i] {
                entry.1 *= factor;
            }
        }
    }

    /// Scales all entries by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for i in 0..self.dim {
            self.scale_row(i, factor);
        }
    }
}
