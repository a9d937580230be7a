use std::sync::OnceLock;

use rayon::prelude::*;

use super::{Result, Tensor, TensorError};

/// Compressed sparse row matrix with `f64` values. The transpose is built
/// lazily the first time a product needs it.
#[derive(Debug)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    transpose: OnceLock<Box<SparseMatrix>>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are
    /// summed; entries within a row are sorted by column.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &entries {
            if r >= rows || c >= cols {
                return Err(TensorError::Index {
                    op: "sparse",
                    index: r.max(c),
                    len: rows.max(cols),
                });
            }
        }
        entries.sort_by_key(|e| (e.0, e.1));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((r, c));
            offsets[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Ok(Self::from_raw(rows, cols, offsets, indices, values))
    }

    /// Builds from pre-sorted CSR arrays.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(offsets.len(), rows + 1);
        debug_assert_eq!(indices.len(), values.len());
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
            transpose: OnceLock::new(),
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

    /// `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.offsets[r]..self.offsets[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.row_mut(r)[c] += v;
            }
        }
        out
    }

    pub fn transposed(&self) -> &SparseMatrix {
        self.transpose.get_or_init(|| {
            let mut counts = vec![0usize; self.cols + 1];
            for &c in &self.indices {
                counts[c + 1] += 1;
            }
            for c in 0..self.cols {
                counts[c + 1] += counts[c];
            }
            let mut cursor = counts.clone();
            let mut indices = vec![0usize; self.nnz()];
            let mut values = vec![0.0; self.nnz()];
            for r in 0..self.rows {
                for (c, v) in self.row(r) {
                    indices[cursor[c]] = r;
                    values[cursor[c]] = v;
                    cursor[c] += 1;
                }
            }
            Box::new(SparseMatrix::from_raw(
                self.cols, self.rows, counts, indices, values,
            ))
        })
    }

    /// `self * x` for a dense `x` with `self.cols()` rows.
    pub fn matmul_dense(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.cols {
            return Err(TensorError::Shape {
                op: "spmm",
                left: [self.rows, self.cols],
                right: x.shape(),
            });
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.rows, d);
        if d == 0 {
            return Ok(out);
        }
        out.data_mut()
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(r, row)| {
                for (c, v) in self.row(r) {
                    for (o, xi) in row.iter_mut().zip(x.row(c)) {
                        *o += v * xi;
                    }
                }
            });
        Ok(out)
    }
}

impl Clone for SparseMatrix {
    fn clone(&self) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.offsets.clone(),
            self.indices.clone(),
            self.values.clone(),
        )
    }
}

impl PartialEq for SparseMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.offsets == other.offsets
            && self.indices == other.indices
            && self.values == other.values
    }
}
