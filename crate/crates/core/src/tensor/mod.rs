//! Dense row-major matrices, a compressed sparse row matrix, and a
//! recorded-tape reverse-mode differentiation engine over them.

mod adam;
mod gradcheck;
mod sparse;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheckError, GradCheckReport};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Precision, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major 2-D array of `f64`. Column vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid(format!(
                "{} values do not fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            shape: [rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for k in 0..n {
            t.data[k * n + k] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn transposed(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = a * b` for row-major `a: m x k`, `b: k x n`, or `b` stored as
/// its `n x k` transpose when `b_transposed`.
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
) {
    gemm_strided(a, false, b, b_transposed, out, m, k, n, 0.0);
}

/// `out += op(a) * op(b)` where `op` optionally reads the stored matrix
/// as its transpose (`a` stored `k x m`, `b` stored `n x k`). Row blocks
/// are computed in parallel with a fixed block size so results do not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    gemm_strided(a, a_transposed, b, b_transposed, out, m, k, n, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    use rayon::prelude::*;
    const BLOCK: usize = 64;
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if b_transposed {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    out.par_chunks_mut(BLOCK * n)
        .enumerate()
        .for_each(|(block, chunk)| {
            let rows = chunk.len() / n;
            if k == 0 {
                if beta == 0.0 {
                    chunk.iter_mut().for_each(|x| *x = 0.0);
                }
                return;
            }
            let first = block * BLOCK;
            // offset of row `first` of op(a) in the stored buffer
            let offset = if a_transposed { first } else { first * k };
            debug_assert!(offset < a.len());
            // SAFETY: pointers and strides describe in-bounds row-major
            // buffers of the dimensions passed alongside them.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.as_ptr().add(offset),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops() {
        let a: Vec<f64> = (0..200 * 3).map(|x| (x % 7) as f64 - 3.0).collect();
        let b: Vec<f64> = (0..3 * 5).map(|x| (x % 5) as f64 * 0.5).collect();
        let mut out = vec![0.0; 200 * 5];
        gemm(&a, &b, &mut out, 200, 3, 5, false);
        for i in 0..200 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 5 + j]).sum();
                assert_eq!(out[i * 5 + j], want);
            }
        }
        let bt = Tensor::new(3, 5, b).unwrap().transposed();
        let mut out2 = vec![0.0; 200 * 5];
        gemm(&a, bt.data(), &mut out2, 200, 3, 5, true);
        assert_eq!(out, out2);
    }

    #[test]
    fn gemm_acc_reads_transposed_a() {
        let at = Tensor::new(3, 130, (0..390).map(|x| (x % 11) as f64 - 5.0).collect()).unwrap();
        let b: Vec<f64> = (0..3 * 4).map(|x| x as f64 * 0.25).collect();
        let a = at.transposed();
        let mut want = vec![1.0; 130 * 4];
        gemm_acc(a.data(), false, &b, false, &mut want, 130, 3, 4);
        let mut got = vec![1.0; 130 * 4];
        gemm_acc(at.data(), true, &b, false, &mut got, 130, 3, 4);
        assert_eq!(want, got);
        assert_eq!(want[0], 1.0 + (0..3).map(|t| a.data()[t] * b[t * 4]).sum::<f64>());
    }

    #[test]
    fn constructors_validate() {
        assert!(Tensor::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.transposed().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(Tensor::identity(2).sum_squares(), 2.0);
    }
}
