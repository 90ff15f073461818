//! Small dense linear algebra: a row-major matrix, Cholesky and LU solves.
//!
//! Grids handled here have at most a few hundred nodes, so everything is
//! dense and straightforward.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        self.matmul_acc(&other.data, other.cols, &mut out);
        out
    }

    /// `out += self * B` where `b` holds `B` row-major with `b_cols` columns.
    pub fn matmul_acc(&self, b: &[f64], b_cols: usize, out: &mut Matrix) {
        assert_eq!(b.len(), self.cols * b_cols, "matmul inner dimension");
        assert_eq!(
            (out.rows, out.cols),
            (self.rows, b_cols),
            "matmul output shape"
        );
        if b_cols == 1 {
            for (o, r) in out
                .data
                .iter_mut()
                .zip(self.data.chunks_exact(self.cols.max(1)))
            {
                *o += dot(r, b);
            }
            return;
        }
        for (out_row, a_row) in out
            .data
            .chunks_exact_mut(b_cols)
            .zip(self.data.chunks_exact(self.cols.max(1)))
        {
            accumulate_row(out_row, a_row, b, b_cols);
        }
    }

    /// `out += selfᵀ * G` where `out` is `self.cols × g.cols` row-major.
    pub fn tr_matmul_acc(&self, g: &Matrix, out: &mut [f64]) {
        assert_eq!(self.rows, g.rows, "tr_matmul inner dimension");
        assert_eq!(out.len(), self.cols * g.cols, "tr_matmul output shape");
        let mut column = vec![0.0; self.rows];
        for (j, out_row) in out
            .chunks_exact_mut(g.cols.max(1))
            .enumerate()
            .take(self.cols)
        {
            for (v, r) in column.iter_mut().zip(self.data.chunks_exact(self.cols)) {
                *v = r[j];
            }
            accumulate_row(out_row, &column, &g.data, g.cols);
        }
    }

    /// `self * x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "mul_vec dimension");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ * y`.
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, y.len(), "tr_mul_vec dimension");
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

const BLOCK: usize = 8;

/// `out += Σ_i a[i] · B[i, :]` for a row-major `B` with `cols` columns,
/// accumulating blocks of columns in registers.
#[inline]
fn accumulate_row(out: &mut [f64], a: &[f64], b: &[f64], cols: usize) {
    let full = cols / BLOCK * BLOCK;
    for j0 in (0..full).step_by(BLOCK) {
        let mut acc = [0.0; BLOCK];
        for (&av, row) in a.iter().zip(b.chunks_exact(cols)) {
            let blk: &[f64; BLOCK] = row[j0..j0 + BLOCK].try_into().expect("block width");
            for l in 0..BLOCK {
                acc[l] += av * blk[l];
            }
        }
        for (o, v) in out[j0..j0 + BLOCK].iter_mut().zip(acc) {
            *o += v;
        }
    }
    for j in full..cols {
        let mut acc = 0.0;
        for (&av, row) in a.iter().zip(b.chunks_exact(cols)) {
            acc += av * row[j];
        }
        out[j] += acc;
    }
}

/// Four interleaved partial sums so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm2(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Returns `None` when a pivot is not strictly positive.
    pub fn factor(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "cholesky needs a square matrix");
        let mut l = Matrix::zeros(n, n);
        // relative pivot floor; the scale keeps singular Laplacians from slipping through
        let scale = (0..n).fold(0.0, |m, i| f64::max(m, a[(i, i)].abs()));
        let floor = scale * 1e-13;
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return None;
            }
            let d = libm::sqrt(d);
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Some(Self { l })
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.l.rows();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// LU factorization with partial pivoting, for the indefinite systems of the
/// enumeration oracle.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    /// Returns `None` when the matrix is numerically singular.
    pub fn factor(a: &Matrix) -> Option<Self> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "lu needs a square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a
            .as_slice()
            .iter()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
            .max(1.0);
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|r| (r, lu[(r, k)].abs()))
                .fold(
                    (k, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            if pmax <= scale * 1e-12 {
                return None;
            }
            if p != k {
                perm.swap(p, k);
                for c in 0..n {
                    let tmp = lu[(p, c)];
                    lu[(p, c)] = lu[(k, c)];
                    lu[(k, c)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for r in k + 1..n {
                let f = lu[(r, k)] / pivot;
                lu[(r, k)] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[(r, c)] -= f * lu[(k, c)];
                    }
                }
            }
        }
        Some(Self { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        assert_eq!(b.len(), n);
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[(i, k)] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.lu[(i, k)] * x[k];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }
}
