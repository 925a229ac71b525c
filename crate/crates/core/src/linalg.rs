//! Small dense-matrix helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

pub type Mat = DMatrix<f64>;

pub fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, c, |i, j| rows[i][j])
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// `max|a - b| / max(max|b|, floor)`.
pub fn rel_diff(a: &Mat, b: &Mat, floor: f64) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(floor)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn asymmetry(m: &Mat) -> f64 {
    max_abs(&(m - m.transpose()))
}

pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v))
}

/// `diag(v) - v' v`.
pub fn multinomial_cov(v: &[f64]) -> Mat {
    let k = v.len();
    DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            v[i] - v[i] * v[j]
        } else {
            -v[i] * v[j]
        }
    })
}

pub fn diag(v: &[f64]) -> Mat {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

/// `I - v' 1`, whose transpose is `I - 1' v`.
pub fn centering(v: &[f64]) -> Mat {
    let k = v.len();
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 - v[i] } else { -v[i] })
}

/// `1' v`: every row equal to `v`.
pub fn ones_v(v: &[f64]) -> Mat {
    let k = v.len();
    DMatrix::from_fn(k, k, |_, j| v[j])
}

pub fn eigenvalues(m: &Mat) -> Vec<Complex<f64>> {
    m.clone().complex_eigenvalues().iter().copied().collect()
}

/// Max-norm of `A' X + X A + Q`.
pub fn lyapunov_residual(a: &Mat, x: &Mat, q: &Mat) -> f64 {
    max_abs(&(a.transpose() * x + x * a + q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projections() {
        let v = [0.625, 0.375];
        let s = multinomial_cov(&v);
        assert!((s[(0, 0)] - 0.234375).abs() < 1e-15);
        assert!((s[(0, 1)] + 0.234375).abs() < 1e-15);
        let ones = DMatrix::from_element(2, 1, 1.0);
        assert!(max_abs(&(&s * &ones)) < 1e-15);
        let p = centering(&v);
        assert!(max_abs(&(p.transpose() * &ones)) < 1e-15);
        assert!(max_abs(&(ones.transpose() * &p)) < 1e-15);
    }

    #[test]
    fn rows_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_rows(&rows(&m)), m);
    }
}
