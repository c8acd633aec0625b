//! Row-major matrices and GEMM entry points.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// `C = alpha·op(A)·op(B) + beta·C` on row-major slices.
///
/// `a` is `m × k` (or `k × m` when `trans_a`), `b` is `k × n` (or `n × k`
/// when `trans_b`), `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k);
    debug_assert!(b.len() >= k * n);
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    // SAFETY: the strides above describe exactly the row-major layouts of the
    // (optionally transposed) operands, and the debug asserts bound lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err!(
            "matmul {}x{} by {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        false,
        &b.data,
        false,
        0.0,
        &mut c.data,
    );
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for t in 0..a.cols {
                    s += a.get(i, t) * b.get(t, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Matrix::from_vec(4, 5, (0..20).map(|v| (v as f64).sin()).collect()).unwrap();
        let expect = naive(&a, &b);
        for (x, y) in matmul(&a, &b).unwrap().data.iter().zip(&expect.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = a.transpose();
        let bt = b.transpose();
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, 1.0, &at.data, true, &bt.data, true, 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_matmul_is_rejected() {
        let a = Matrix::zeros(2, 3);
        assert!(matmul(&a, &a).is_err());
    }
}
