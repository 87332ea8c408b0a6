//! Small dense factorizations: Cholesky and the cyclic Jacobi symmetric
//! eigensolver behind the generalized eigenproblem `M u = lambda N u`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const JACOBI_MAX_SWEEPS: usize = 50;
pub const JACOBI_REL_TOL: f64 = 1e-12;

/// Lower-triangular `L` with `A = L L^T`. Fails if a pivot is not positive.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("cholesky of a {:?} matrix", a.shape())));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(Error::Degenerate(format!(
                "matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector of `values[k]`.
    pub vectors: Matrix,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops
/// below `JACOBI_REL_TOL * ||A||_F` or `JACOBI_MAX_SWEEPS` is reached.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("eigensolve of a {:?} matrix", a.shape())));
    }
    let mut s = a.clone();
    // Symmetrize so round-off in the caller cannot leak into the rotations.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);
    let tol = JACOBI_REL_TOL * a.frobenius_norm();
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&s) <= tol {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = s[(p, p)];
                let aqq = s[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[(p, k)];
                    let sqk = s[(q, k)];
                    s[(p, k)] = c * spk - sn * sqk;
                    s[(q, k)] = sn * spk + c * sqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]));
    let values = order.iter().map(|&i| s[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = Matrix::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        assert!(back.sub(&a).unwrap().frobenius_norm() < 1e-12);
        let b = [1.0, -2.0, 0.5];
        let y = solve_lower(&l, &b);
        let x = solve_lower_transpose(&l, &y);
        let ax = a.matvec(&x).unwrap();
        for (u, v) in ax.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = Matrix::from_rows(&[
            [2.0, -1.0, 0.0, 0.3],
            [-1.0, 2.0, -1.0, 0.0],
            [0.0, -1.0, 2.0, 0.7],
            [0.3, 0.0, 0.7, 1.0],
        ])
        .unwrap();
        let eig = symmetric_eigen(&a).unwrap();
        assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        for k in 0..4 {
            let v = eig.vectors.column(k);
            let av = a.matvec(&v).unwrap();
            for (x, y) in av.iter().zip(&v) {
                assert!((x - eig.values[k] * y).abs() < 1e-10);
            }
        }
        let vtv = eig.vectors.transpose().matmul(&eig.vectors).unwrap();
        assert!(vtv.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-12);
        let trace: f64 = eig.values.iter().sum();
        assert!((trace - a.trace()).abs() < 1e-12);
    }

    #[test]
    fn jacobi_on_diagonal_input_is_immediate() {
        let a = Matrix::from_rows(&[[3.0, 0.0], [0.0, -1.0]]).unwrap();
        let eig = symmetric_eigen(&a).unwrap();
        assert_eq!(eig.sweeps, 0);
        assert_eq!(eig.values, vec![-1.0, 3.0]);
    }
}
