//! Dense row-major matrices with just enough operations for the estimating
//! equations here: products, Gaussian-elimination solves with partial
//! pivoting, inverses, and ridge stabilization. Systems never exceed a few
//! dozen rows, so no factorization library is warranted.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// Column vector from a slice.
    pub fn col_vec(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.at(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.add_at(i, j, a * other.at(k, j));
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..self.cols {
                s += self.at(i, j) * v[j];
            }
            out[i] = s;
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Add `eps` to the diagonal, in place.
    pub fn add_ridge(&mut self, eps: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.add_at(i, i, eps);
        }
    }

    /// (A + A^T)/2, used to keep sandwich covariances symmetric.
    pub fn symmetrize(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut out = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, 0.5 * (self.at(i, j) + self.at(j, i)));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Solve `self * x = rhs` for several right-hand sides at once by
    /// Gaussian elimination with partial pivoting.
    pub fn solve_mat(&self, rhs: &Mat) -> Result<Mat> {
        assert_eq!(self.rows, self.cols, "solve needs a square matrix");
        assert_eq!(self.rows, rhs.rows, "rhs row mismatch");
        let n = self.rows;
        let m = rhs.cols;
        let mut a = self.data.clone();
        let mut b = rhs.data.clone();

        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].abs();
            for r in (col + 1)..n {
                let v = a[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best < 1e-300 {
                return Err(Error::Numeric(format!(
                    "singular system (pivot {best:e} at column {col})"
                )));
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                for j in 0..m {
                    b.swap(col * m + j, piv * m + j);
                }
            }
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / d;
                if f == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
                for j in 0..m {
                    b[r * m + j] -= f * b[col * m + j];
                }
            }
        }
        // back substitution
        for col in (0..n).rev() {
            let d = a[col * n + col];
            for j in 0..m {
                let mut s = b[col * m + j];
                for k in (col + 1)..n {
                    s -= a[col * n + k] * b[k * m + j];
                }
                b[col * m + j] = s / d;
            }
        }
        Ok(Mat {
            rows: n,
            cols: m,
            data: b,
        })
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let sol = self.solve_mat(&Mat::col_vec(rhs))?;
        Ok(sol.data)
    }

    pub fn inverse(&self) -> Result<Mat> {
        self.solve_mat(&Mat::identity(self.rows))
    }

    /// Rough infinity-norm condition estimate; errors when it exceeds `cap`.
    pub fn check_conditioning(&self, cap: f64, context: &str) -> Result<()> {
        let inv = self
            .inverse()
            .map_err(|_| Error::Numeric(format!("{context}: singular matrix")))?;
        let norm = |m: &Mat| {
            (0..m.rows)
                .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                .fold(0.0_f64, f64::max)
        };
        let cond = norm(self) * norm(&inv);
        if !cond.is_finite() || cond > cap {
            return Err(Error::Numeric(format!(
                "{context}: condition estimate {cond:.3e} exceeds {cap:.1e}"
            )));
        }
        Ok(())
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.at(i, i)).collect()
    }
}

/// Weighted least squares: solve `argmin sum_i w_i (y_i - x_i' b)^2` with a
/// small ridge for rank safety. Rows of `x` are observations.
pub fn weighted_least_squares(x: &[Vec<f64>], y: &[f64], w: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let p = x.first().map_or(0, Vec::len);
    let mut xtx = Mat::zeros(p, p);
    let mut xty = vec![0.0; p];
    for ((xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        for a in 0..p {
            let xa = wi * xi[a];
            xty[a] += xa * yi;
            for b in 0..p {
                xtx.add_at(a, b, xa * xi[b]);
            }
        }
    }
    xtx.add_ridge(ridge);
    xtx.solve_vec(&xty)
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_recovers_known_solution() {
        let a = Mat::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let x = a.solve_vec(&[1.0, 2.0]).unwrap();
        // direct inversion of [[4,1],[1,3]]: det 11
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn inverse_times_self_is_identity() {
        let a = Mat::from_rows(&[
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ]);
        let prod = a.matmul(&a.inverse().unwrap());
        let err = prod.add(&Mat::identity(3).scale(-1.0)).max_abs();
        assert!(err < 1e-13);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(a.solve_vec(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn wls_matches_exact_line() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]];
        let y = vec![1.0, 3.0, 5.0];
        let w = vec![1.0, 2.0, 1.0];
        let b = weighted_least_squares(&x, &y, &w, 0.0).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 2.0).abs() < 1e-12);
    }
}
