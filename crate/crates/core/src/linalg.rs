//! Dense solvers for the small systems this crate needs: Cholesky for GP
//! kernel matrices and LU with partial pivoting for tabular value solves.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Array2<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors `a`; fails if a pivot is not strictly positive.
    pub fn new(a: &Array2<T>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::LinAlg("cholesky requires a square matrix".into()));
        }
        let mut l = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[[i, j]];
                for k in 0..j {
                    sum = sum - l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    if sum <= T::zero() {
                        return Err(Error::LinAlg(format!(
                            "matrix not positive definite at pivot {i}"
                        )));
                    }
                    l[[i, j]] = sum.sqrt();
                } else {
                    l[[i, j]] = sum / l[[j, j]];
                }
            }
        }
        Ok(Cholesky { l })
    }

    /// Solves `A x = b` via the factor.
    pub fn solve(&self, b: &Array1<T>) -> Array1<T> {
        let y = self.forward(b);
        self.backward(&y)
    }

    /// Solves `L y = b`.
    pub fn forward(&self, b: &Array1<T>) -> Array1<T> {
        let n = self.l.nrows();
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let mut sum = b[i];
            for k in 0..i {
                sum = sum - self.l[[i, k]] * y[k];
            }
            y[i] = sum / self.l[[i, i]];
        }
        y
    }

    /// Solves `L^T x = y`.
    pub fn backward(&self, y: &Array1<T>) -> Array1<T> {
        let n = self.l.nrows();
        let mut x = Array1::zeros(n);
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum = sum - self.l[[k, i]] * x[k];
            }
            x[i] = sum / self.l[[i, i]];
        }
        x
    }

    /// Log-determinant of `A` (twice the log-trace of `L`).
    pub fn log_det(&self) -> T {
        let mut acc = T::zero();
        for i in 0..self.l.nrows() {
            acc = acc + self.l[[i, i]].ln();
        }
        acc + acc
    }

    pub fn factor(&self) -> &Array2<T> {
        &self.l
    }
}

/// Solves `A x = b` by LU with partial pivoting. `a` and `b` are consumed.
pub fn lu_solve<T: Scalar>(mut a: Array2<T>, mut b: Array1<T>) -> Result<Array1<T>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::LinAlg("lu_solve dimension mismatch".into()));
    }
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[[col, col]].abs();
        for row in col + 1..n {
            let v = a[[row, col]].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == T::zero() {
            return Err(Error::LinAlg("singular matrix in lu_solve".into()));
        }
        if pivot != col {
            for k in 0..n {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[pivot, k]];
                a[[pivot, k]] = tmp;
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[[row, col]] / a[[col, col]];
            if factor != T::zero() {
                for k in col..n {
                    let v = a[[col, k]];
                    a[[row, k]] = a[[row, k]] - factor * v;
                }
                let bc = b[col];
                b[row] = b[row] - factor * bc;
            }
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut sum = b[row];
        for k in row + 1..n {
            sum = sum - a[[row, k]] * x[k];
        }
        x[row] = sum / a[[row, row]];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a: ndarray::Array2<f64> = array![[4.0, 2.0], [2.0, 3.0]];
        let chol = Cholesky::new(&a).unwrap();
        let x = chol.solve(&array![2.0, 1.0]);
        // exact solution of [[4,2],[2,3]] x = [2,1]
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!((x[1] - 0.0).abs() < 1e-12);
        assert!((chol.log_det() - (4.0f64 * 3.0 - 2.0 * 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a: ndarray::Array2<f64> = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(Cholesky::new(&a).is_err());
    }

    #[test]
    fn lu_solves_general_system() {
        let a = array![[0.0, 2.0, 1.0], [1.0, -2.0, -3.0], [-1.0, 1.0, 2.0]];
        let b = array![-8.0, 0.0, 3.0];
        let x = lu_solve(a.clone(), b.clone()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v: &f64| v.abs() < 1e-12));
    }

    #[test]
    fn lu_rejects_singular() {
        let a: ndarray::Array2<f64> = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(lu_solve(a, array![1.0, 2.0]).is_err());
    }
}
