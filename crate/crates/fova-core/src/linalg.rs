//! Small dense linear solver used by the exact evaluation oracles.
//!
//! The systems solved here are `(I - gamma * P)` with `P` row-stochastic and
//! `gamma < 1`, which are strictly diagonally dominant and therefore
//! nonsingular. Problems are tiny, so a direct dense solve is the right tool.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Argument(format!(
            "solve_dense: expected square system, got {}x{} with rhs {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }

    let mut m = a.clone();
    let mut rhs = b.clone();

    for col in 0..n {
        // Partial pivot: largest magnitude entry in this column.
        let mut pivot = col;
        let mut best = m[[col, col]].abs();
        for row in (col + 1)..n {
            let v = m[[row, col]].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best == 0.0 {
            return Err(Error::Domain("solve_dense: singular matrix".into()));
        }
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            rhs.swap(col, pivot);
        }

        for row in (col + 1)..n {
            let factor = m[[row, col]] / m[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[[row, k]] -= factor * m[[col, k]];
            }
            rhs[row] -= factor * rhs[col];
        }
    }

    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= m[[row, k]] * x[k];
        }
        x[row] = acc / m[[row, row]];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solves_identity() {
        let a = Array2::eye(3);
        let b = array![1.0, -2.0, 3.5];
        let x = solve_dense(&a, &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solves_known_system() {
        // 2x + y = 5, x + 3y = 10 -> x = 1, y = 3
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let b = array![5.0, 10.0];
        let x = solve_dense(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![1.0, 2.0];
        assert!(solve_dense(&a, &b).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = Array2::eye(3);
        let b = array![1.0, 2.0];
        assert!(solve_dense(&a, &b).is_err());
    }
}
