//! Small dense 64-bit linear algebra: row-major matrices, Cholesky solves,
//! one-sided Jacobi SVD, seeded orthonormal bases.

use alloc::vec;
use alloc::vec::Vec;

use libm::sqrt;

use crate::error::CoreError;
use crate::rng::Rng64;
use crate::Result;

/// Row-major f64 matrix. Zero-row matrices are allowed (empty blocks).
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                context: "matrix data length",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(CoreError::ShapeMismatch {
                context: "matrix product inner extents",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for t in 0..self.cols {
                let a = self.data[i * self.cols + t];
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(t);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect()
    }

    /// A^T x without materializing the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    /// Vertical stack.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols && self.rows != 0 && other.rows != 0 {
            return Err(CoreError::ShapeMismatch {
                context: "vertical stack widths",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        let cols = if self.rows == 0 { other.cols } else { self.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Mat::from_vec(self.rows + other.rows, cols, data)
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_cols(&self, keep: &[usize]) -> Mat {
        let mut out = Mat::zeros(self.rows, keep.len());
        for i in 0..self.rows {
            for (jj, &j) in keep.iter().enumerate() {
                out.data[i * keep.len() + jj] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// Solves (A) x = b for symmetric positive definite A via Cholesky.
/// A non-positive pivot reports a singular system.
pub fn cholesky_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(CoreError::ShapeMismatch {
            context: "cholesky system extents",
            left: vec![a.rows, a.cols],
            right: vec![b.len()],
        });
    }
    // lower factor
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for t in 0..j {
                s -= l[i * n + t] * l[j * n + t];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(CoreError::SingularSystem("cholesky pivot"));
                }
                l[i * n + i] = sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    // forward then back substitution
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut s = b[i];
        for t in 0..i {
            s -= l[i * n + t] * y[t];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for t in i + 1..n {
            s -= l[t * n + i] * x[t];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Thin SVD, A = U diag(sigma) V^T with singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

const JACOBI_TOL: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 60;

/// One-sided Jacobi on the tall side; handles wide inputs by decomposing the
/// transpose and swapping factors.
pub fn svd_jacobi(a: &Mat) -> Result<Svd> {
    if a.rows == 0 || a.cols == 0 {
        return Ok(Svd {
            u: Mat::zeros(a.rows, 0),
            sigma: Vec::new(),
            v: Mat::zeros(a.cols, 0),
        });
    }
    if a.rows < a.cols {
        let t = svd_jacobi(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    let n = a.rows;
    let p = a.cols;
    // column-major working copy: columns of W converge to sigma_j * u_j
    let mut w: Vec<Vec<f64>> = (0..p).map(|j| a.col(j)).collect();
    let mut v = Mat::identity(p);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / sqrt(alpha * beta);
                off = off.max(ratio);
                if ratio <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = c * t;
                for r in 0..n {
                    let wi = w[i][r];
                    let wj = w[j][r];
                    w[i][r] = c * wi - s * wj;
                    w[j][r] = s * wi + c * wj;
                }
                for r in 0..p {
                    let vi = v.at(r, i);
                    let vj = v.at(r, j);
                    v.set(r, i, c * vi - s * vj);
                    v.set(r, j, s * vi + c * vj);
                }
            }
        }
        if off <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        // at this point the columns are orthogonal to near round-off; a hard
        // failure only happens for pathological inputs
        let max_off = max_off_diagonal(&w);
        if max_off > 1e-9 {
            return Err(CoreError::NumericalFailure("jacobi svd sweeps"));
        }
    }
    // extract singular values, sort descending with index tie-break
    let mut order: Vec<usize> = (0..p).collect();
    let norms: Vec<f64> = w.iter().map(|col| norm2(col)).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));
    let mut u = Mat::zeros(n, p);
    let mut sigma = vec![0.0f64; p];
    let mut v_sorted = Mat::zeros(p, p);
    let scale = norms.iter().cloned().fold(0.0f64, f64::max);
    for (jj, &j) in order.iter().enumerate() {
        sigma[jj] = norms[j];
        if norms[j] > scale * 1e-300 && norms[j] > 0.0 {
            for r in 0..n {
                u.data[r * p + jj] = w[j][r] / norms[j];
            }
        }
        for r in 0..p {
            v_sorted.data[r * p + jj] = v.at(r, j);
        }
    }
    Ok(Svd {
        u,
        sigma,
        v: v_sorted,
    })
}

fn max_off_diagonal(w: &[Vec<f64>]) -> f64 {
    let p = w.len();
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in i + 1..p {
            let alpha = dot(&w[i], &w[i]);
            let beta = dot(&w[j], &w[j]);
            if alpha == 0.0 || beta == 0.0 {
                continue;
            }
            worst = worst.max(dot(&w[i], &w[j]).abs() / sqrt(alpha * beta));
        }
    }
    worst
}

/// Seeded n x m matrix with orthonormal columns (modified Gram-Schmidt with
/// one re-orthogonalization pass).
pub fn random_orthonormal(rng: &mut Rng64, n: usize, m: usize) -> Result<Mat> {
    if m > n {
        return Err(CoreError::Contract(
            "cannot draw more orthonormal columns than the dimension",
        ));
    }
    let mut cols: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.normal()).collect())
        .collect();
    for j in 0..m {
        for _pass in 0..2 {
            for i in 0..j {
                let proj = dot(&cols[j], &cols[i]);
                let ci = cols[i].clone();
                for (x, &c) in cols[j].iter_mut().zip(&ci) {
                    *x -= proj * c;
                }
            }
        }
        let nrm = norm2(&cols[j]);
        if nrm < 1e-12 {
            return Err(CoreError::NumericalFailure("gram-schmidt degenerate draw"));
        }
        for x in cols[j].iter_mut() {
            *x /= nrm;
        }
    }
    let mut out = Mat::zeros(n, m);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out.data[i * m + j] = x;
        }
    }
    Ok(out)
}
