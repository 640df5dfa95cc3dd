//! Dense matrix arithmetic and symmetric eigendecomposition.
//!
//! Row-major `f64` storage throughout; 32-bit floats appear only at file
//! boundaries. Public operations keep every entry finite: constructors
//! reject non-finite input and products are checked before they are
//! returned.

use crate::error::{Result, SentinelError};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
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

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SentinelError::ShapeMismatch(format!(
                "data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite("from_vec")?;
        Ok(m)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Single-row matrix from a slice.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Matrix::from_vec(1, v.len(), v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SentinelError::Diverged(format!(
                "non-finite entry after {ctx} ({}x{})",
                self.rows, self.cols
            )))
        }
    }

    /// Standard matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(SentinelError::ShapeMismatch(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        // ikj order: streams rows of `other`, cache-friendly for row-major data.
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let res = Matrix {
            rows: m,
            cols: n,
            data: out,
        };
        res.check_finite("matmul")?;
        Ok(res)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(SentinelError::ShapeMismatch(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let m = Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        m.check_finite(op)?;
        Ok(m)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax with max-subtraction for stability. Each output row sums to 1.
pub fn softmax_row(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the returned matrix. The input must be square and
/// symmetric within `1e-9` (relative to its largest entry).
pub fn eigh_sym(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if n != m.cols() {
        return Err(SentinelError::ShapeMismatch(format!(
            "eigh_sym: matrix must be square, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m
        .data()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if max_asym > 1e-9 * scale {
        return Err(SentinelError::NotSymmetric { max_asym });
    }

    // Work on the symmetrized copy so the iteration sees an exactly symmetric matrix.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))?;
    let mut v = Matrix::identity(n);

    let tol = 1e-14 * scale;
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a.get(i, j).abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= tol {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a.get(i, i), i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));

    let eigenvalues: Vec<f64> = pairs.iter().map(|&(l, _)| l).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v.get(i, pairs[j].1))?;
    Ok((eigenvalues, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, d: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let m = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = mat(2, 1, &[0.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::SplitRng::seeded(7);
        let a = Matrix::from_fn(5, 3, |_, _| rng.standard_normal()).unwrap();
        let b = Matrix::from_fn(3, 4, |_, _| rng.standard_normal()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((acc - c.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let a = mat(2, 3, &[0.0; 6]);
        let b = mat(2, 3, &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err();
        assert!(err.to_string().contains("2x3 * 2x3"));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let m = mat(2, 2, &[0.0, 0.0, 1000.0, 1000.0]);
        let s = softmax_row(&m);
        for i in 0..2 {
            assert!((s.get(i, 0) - 0.5).abs() < 1e-12);
            assert!((s.get(i, 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let m = mat(1, 2, &[0.0, 3.0f64.ln()]);
        let s = softmax_row(&m);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::rng::SplitRng::seeded(3);
        let m = Matrix::from_fn(6, 9, |_, _| rng.standard_normal() * 10.0).unwrap();
        let s = softmax_row(&m);
        for i in 0..6 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn eigh_identity() {
        let (l, _) = eigh_sym(&Matrix::identity(3)).unwrap();
        for v in l {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eigh_diagonal() {
        let m = mat(3, 3, &[5.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let (l, v) = eigh_sym(&m).unwrap();
        assert!((l[0] - 5.0).abs() < 1e-12);
        assert!((l[1] - 2.0).abs() < 1e-12);
        assert!(l[2].abs() < 1e-12);
        // Axis-aligned eigenvectors: each column has a single unit entry.
        for j in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| v.get(i, j).abs()).collect();
            let max = col.iter().cloned().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eigh_two_by_two_hand_roots() {
        // Characteristic polynomial of [[2,1],[1,2]]: (2-l)^2 - 1 = 0 -> l = 3, 1.
        let m = mat(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (l, _) = eigh_sym(&m).unwrap();
        assert!((l[0] - 3.0).abs() < 1e-10);
        assert!((l[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigh_rejects_asymmetric() {
        let m = mat(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            eigh_sym(&m),
            Err(SentinelError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigh_eigenpairs_and_reconstruction() {
        let mut rng = crate::rng::SplitRng::seeded(11);
        let raw = Matrix::from_fn(8, 8, |_, _| rng.standard_normal()).unwrap();
        let sym = raw.add(&raw.transpose()).unwrap().scale(0.5);
        let (l, v) = eigh_sym(&sym).unwrap();

        // m * v_i = l_i * v_i
        for j in 0..8 {
            for i in 0..8 {
                let mut mv = 0.0;
                for k in 0..8 {
                    mv += sym.get(i, k) * v.get(k, j);
                }
                assert!((mv - l[j] * v.get(i, j)).abs() < 1e-8);
            }
        }
        // Orthonormal columns.
        let vtv = v.transpose().matmul(&v).unwrap();
        assert!(vtv.max_abs_diff(&Matrix::identity(8)) < 1e-8);
        // V diag(l) V^T = m within Frobenius 1e-7.
        let mut recon = Matrix::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    acc += v.get(i, k) * l[k] * v.get(j, k);
                }
                recon.set(i, j, acc);
            }
        }
        assert!(recon.sub(&sym).unwrap().frobenius_norm() < 1e-7);
    }
}
