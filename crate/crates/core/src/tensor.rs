//! Dense row-major `f64` matrices.
//!
//! Everything the denoiser touches is a 2-D matrix: token streams are
//! `tokens × features`, weights are `in × out`, scalars are `1 × 1`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: {rows}x{cols} != {}", data.len());
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_t inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(self, false, other, true, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        gemm(self, true, other, false, &mut out);
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn column_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: strides describe the row-major buffers of `a`, `b`, `c`, whose
    // lengths were checked against (m, k, n) by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                *out.at_mut(i, j) = s;
            }
        }
        out
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = Mat::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect());
        let expected = naive(&a, &b);
        let close = |x: &Mat, y: &Mat| x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&a.matmul(&b), &expected));
        assert!(close(&a.matmul_t(&b.transpose()), &expected));
        assert!(close(&a.transpose().t_matmul(&b), &expected));
    }
}
