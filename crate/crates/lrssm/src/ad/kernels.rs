//! Dense value kernels shared by the eager backend and the tape.
//!
//! Both backends compute forward values through these functions, so a pass
//! evaluated eagerly and the same pass recorded on a tape produce
//! bit-identical values.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Number of jitter retries after the first failed factorization.
const JITTER_RETRIES: usize = 3;
/// Initial jitter, relative to the mean of the diagonal.
const JITTER_REL: f64 = 1e-8;

pub fn add_col(a: &Mat, v: &Mat) -> Mat {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col += v.column(0);
    }
    out
}

pub fn mul_rows(a: &Mat, v: &Mat) -> Mat {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(&v.column(0));
    }
    out
}

pub fn mul_cols(a: &Mat, v: &Mat) -> Mat {
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= v[(0, j)];
    }
    out
}

pub fn row_mean(a: &Mat) -> Mat {
    let n = a.ncols();
    Mat::from_column_slice(a.nrows(), 1, a.column_sum().as_slice()) / n as f64
}

pub fn col_sums(a: &Mat) -> Mat {
    Mat::from_iterator(1, a.ncols(), a.column_iter().map(|c| c.sum()))
}

pub fn row_sums(a: &Mat) -> Mat {
    Mat::from_column_slice(a.nrows(), 1, a.column_sum().as_slice())
}

pub fn hcat(parts: &[&Mat]) -> Mat {
    let rows = parts.first().map_or(0, |p| p.nrows());
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    out
}

pub fn vcat(parts: &[&Mat]) -> Mat {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}

/// Column-major reshape.
pub fn reshape(a: &Mat, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, a.as_slice())
}

fn cholesky_raw(a: &Mat, jitter: f64) -> std::result::Result<Mat, (usize, f64)> {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Lower Cholesky factor reading the lower triangle of `a`.
///
/// On breakdown the factorization is retried with diagonal jitter
/// `1e-8 * mean(diag)`, escalating tenfold, at most three times.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape("cholesky", "square", format!("{:?}", a.shape())));
    }
    let mut failure = match cholesky_raw(a, 0.0) {
        Ok(l) => return Ok(l),
        Err(f) => f,
    };
    let n = a.nrows().max(1) as f64;
    let mean_diag = a.diagonal().iter().map(|d| d.abs()).sum::<f64>() / n;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
    let mut jitter = JITTER_REL * scale;
    for _ in 0..JITTER_RETRIES {
        match cholesky_raw(a, jitter) {
            Ok(l) => {
                log::debug!("cholesky succeeded with jitter {jitter:e}");
                return Ok(l);
            }
            Err(f) => failure = f,
        }
        jitter *= 10.0;
    }
    Err(Error::NumericalBreakdown {
        pivot: failure.0,
        value: failure.1,
    })
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for mut col in x.column_iter_mut() {
        for k in 0..n {
            let xk = col[k] / l[(k, k)];
            col[k] = xk;
            if xk != 0.0 {
                for i in k + 1..n {
                    col[i] -= l[(i, k)] * xk;
                }
            }
        }
    }
    x
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_upper_tr(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    let mut x = b.clone();
    for mut col in x.column_iter_mut() {
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in i + 1..n {
                s -= l[(k, i)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
    x
}

/// Keeps the lower triangle, halving the diagonal.
pub fn phi(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut out = Mat::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = 0.5 * a[(j, j)];
        for i in j + 1..n {
            out[(i, j)] = a[(i, j)];
        }
    }
    out
}

pub fn tril(a: &Mat) -> Mat {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Adjoint of the Cholesky factorization, symmetrized.
pub fn cholesky_adjoint(l: &Mat, lbar: &Mat) -> Mat {
    let p = phi(&(l.transpose() * lbar));
    let x = solve_upper_tr(l, &p);
    let s = solve_upper_tr(l, &x.transpose()).transpose();
    (&s + s.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = Mat::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let l = cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-14);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_reports_pivot() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match cholesky(&a) {
            Err(Error::NumericalBreakdown { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        // rank one: exact zero pivot at index 1
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = cholesky(&a).unwrap();
        assert!(l[(1, 1)] > 0.0 && l[(1, 1)] < 1e-3);
    }

    #[test]
    fn triangular_solves() {
        let l = Mat::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 3.0, 0.0, -1.0, 0.5, 1.5]);
        let b = Mat::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = solve_lower(&l, &b);
        assert!((&l * &x - &b).abs().max() < 1e-14);
        let y = solve_upper_tr(&l, &b);
        assert!((l.transpose() * &y - &b).abs().max() < 1e-14);
    }

    #[test]
    fn empty_cholesky() {
        let l = cholesky(&Mat::zeros(0, 0)).unwrap();
        assert_eq!(l.shape(), (0, 0));
    }
}
