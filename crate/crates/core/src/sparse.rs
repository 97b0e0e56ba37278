//! Compressed sparse row matrices.
//!
//! Column indices inside each row are sorted and unique, which fixes the
//! summation order of every product and keeps results bit-reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate entries
    /// are summed in input order.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for (r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "csr_from_triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in per_row {
            // stable sort keeps duplicate accumulation order deterministic
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if indices.len() > *indptr.last().unwrap() && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over the stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Returns `a * self + b * I`, keeping the sparsity pattern sorted.
    pub fn affine_with_identity(&self, a: f64, b: f64) -> Self {
        let n = self.rows.min(self.cols);
        let triplets = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, a * v)))
            .chain((0..n).map(|i| (i, i, b)));
        Self::from_triplets(self.rows, self.cols, triplets).expect("indices in range")
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `out = self * x` where `x` is a row-major `cols x f` block.
    pub fn mul_dense_into(&self, x: &[f64], f: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols * f);
        debug_assert_eq!(out.len(), self.rows * f);
        for r in 0..self.rows {
            let dst = &mut out[r * f..(r + 1) * f];
            dst.fill(0.0);
            for (c, v) in self.row(r) {
                let src = &x[c * f..(c + 1) * f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// `out += self^T * g` where `g` is a row-major `rows x f` block.
    pub fn mul_dense_transposed_acc(&self, g: &[f64], f: usize, out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows * f);
        debug_assert_eq!(out.len(), self.cols * f);
        for r in 0..self.rows {
            let src = &g[r * f..(r + 1) * f];
            for (c, v) in self.row(r) {
                let dst = &mut out[c * f..(c + 1) * f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed_and_sorted() {
        let m = CsrMatrix::from_triplets(2, 3, [(0, 2, 1.0), (0, 0, 2.0), (0, 2, 3.0), (1, 1, 5.0)])
            .unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.row(0).collect::<Vec<_>>(), vec![(0, 2.0), (2, 4.0)]);
        assert_eq!(m.get(1, 1), 5.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn out_of_range_triplet_is_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, [(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn dense_products_match_naive() {
        let m = CsrMatrix::from_triplets(3, 3, [(0, 1, 2.0), (1, 0, -1.0), (2, 2, 4.0), (2, 0, 0.5)])
            .unwrap();
        let dense = m.to_dense();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 6];
        m.mul_dense_into(&x, 2, &mut out);
        let mut naive = vec![0.0; 6];
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..2 {
                    naive[r * 2 + k] += dense[r * 3 + c] * x[c * 2 + k];
                }
            }
        }
        assert_eq!(out, naive);

        let mut t = vec![0.0; 6];
        m.mul_dense_transposed_acc(&x, 2, &mut t);
        let mut naive_t = vec![0.0; 6];
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..2 {
                    naive_t[c * 2 + k] += dense[r * 3 + c] * x[r * 2 + k];
                }
            }
        }
        assert_eq!(t, naive_t);
    }

    #[test]
    fn affine_with_identity_adds_diagonal() {
        let m = CsrMatrix::from_triplets(2, 2, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let a = m.affine_with_identity(2.0, -1.0);
        assert_eq!(a.to_dense(), vec![-1.0, 2.0, 2.0, -1.0]);
    }
}
