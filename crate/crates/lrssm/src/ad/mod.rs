//! Matrix-valued computation backends.
//!
//! Every numerical routine in the crate is written once against [`Backend`].
//! [`Eager`] evaluates directly on dense matrices; [`Tape`] records the same
//! operations and replays their adjoints in reverse to produce exact
//! gradients of a scalar output.

pub mod kernels;
mod tape;

use std::fmt::Debug;

use nalgebra::DMatrix;

use crate::error::Result;

pub use tape::{Gradients, Tape, Var};

/// Elementwise functions supported by both backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Square,
    Sqrt,
    Sin,
    Cos,
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
        }
    }

    /// Derivative given input `x` and output `y`.
    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
        }
    }
}

/// Dense matrix algebra over some handle type.
///
/// Column vectors are `n×1` matrices and scalars are `1×1`.
pub trait Backend {
    type M: Clone + Debug;

    /// Wraps a constant (no gradient flows into it).
    fn lift(&self, m: DMatrix<f64>) -> Self::M;
    /// Wraps a value that gradients are requested for. Same as [`lift`](Backend::lift)
    /// on backends without differentiation.
    fn param(&self, m: DMatrix<f64>) -> Self::M {
        self.lift(m)
    }
    fn with_value<R>(&self, a: &Self::M, f: impl FnOnce(&DMatrix<f64>) -> R) -> R;

    fn add(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn sub(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn scale(&self, a: &Self::M, c: f64) -> Self::M;
    fn hadamard(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn matmul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    /// `aᵀ b`
    fn tr_matmul(&self, a: &Self::M, b: &Self::M) -> Self::M;
    /// `a bᵀ`
    fn matmul_tr(&self, a: &Self::M, b: &Self::M) -> Self::M;
    fn transpose(&self, a: &Self::M) -> Self::M;
    /// Adds column vector `v` to every column of `a`.
    fn add_col(&self, a: &Self::M, v: &Self::M) -> Self::M;
    /// Scales row `i` of `a` by `v[i]` (`v` is a column vector).
    fn mul_rows(&self, a: &Self::M, v: &Self::M) -> Self::M;
    /// Scales column `j` of `a` by `v[j]` (`v` is a row vector).
    fn mul_cols(&self, a: &Self::M, v: &Self::M) -> Self::M;
    fn row_mean(&self, a: &Self::M) -> Self::M;
    fn sum(&self, a: &Self::M) -> Self::M;
    fn col_sums(&self, a: &Self::M) -> Self::M;
    fn unary(&self, a: &Self::M, f: Unary) -> Self::M;
    /// Clamps entries to `[lo, hi]`; the gradient is zero where clamped.
    fn clamp(&self, a: &Self::M, lo: f64, hi: f64) -> Self::M;
    fn hcat(&self, parts: &[Self::M]) -> Self::M;
    fn vcat(&self, parts: &[Self::M]) -> Self::M;
    fn cols(&self, a: &Self::M, start: usize, len: usize) -> Self::M;
    fn rows(&self, a: &Self::M, start: usize, len: usize) -> Self::M;
    /// Column-major reshape.
    fn reshape(&self, a: &Self::M, rows: usize, cols: usize) -> Self::M;
    /// Diagonal of a square matrix as a column vector.
    fn diag(&self, a: &Self::M) -> Self::M;
    /// Lower Cholesky factor (with the jitter retry policy of [`kernels::cholesky`]).
    fn cholesky(&self, a: &Self::M) -> Result<Self::M>;
    /// `L⁻¹ B` for lower-triangular `L`.
    fn solve_lower(&self, l: &Self::M, b: &Self::M) -> Self::M;
    /// `L⁻ᵀ B` for lower-triangular `L`.
    fn solve_upper_tr(&self, l: &Self::M, b: &Self::M) -> Self::M;

    // Provided combinators.

    fn value(&self, a: &Self::M) -> DMatrix<f64> {
        self.with_value(a, |m| m.clone())
    }

    fn shape(&self, a: &Self::M) -> (usize, usize) {
        self.with_value(a, |m| m.shape())
    }

    fn scalar(&self, a: &Self::M) -> f64 {
        self.with_value(a, |m| m[(0, 0)])
    }

    fn is_finite(&self, a: &Self::M) -> bool {
        self.with_value(a, |m| m.iter().all(|x| x.is_finite()))
    }

    fn zeros(&self, rows: usize, cols: usize) -> Self::M {
        self.lift(DMatrix::zeros(rows, cols))
    }

    fn identity(&self, n: usize) -> Self::M {
        self.lift(DMatrix::identity(n, n))
    }

    fn neg(&self, a: &Self::M) -> Self::M {
        self.scale(a, -1.0)
    }

    /// Squared Frobenius norm as a scalar.
    fn frob_sq(&self, a: &Self::M) -> Self::M {
        self.sum(&self.unary(a, Unary::Square))
    }

    fn trace(&self, a: &Self::M) -> Self::M {
        self.sum(&self.diag(a))
    }

    /// `(L Lᵀ)⁻¹ B`
    fn chol_solve(&self, l: &Self::M, b: &Self::M) -> Self::M {
        self.solve_upper_tr(l, &self.solve_lower(l, b))
    }

    /// `Σ log L_ii`
    fn sum_log_diag(&self, l: &Self::M) -> Self::M {
        self.sum(&self.unary(&self.diag(l), Unary::Ln))
    }

    /// Flattens to a column vector (column-major).
    fn flatten(&self, a: &Self::M) -> Self::M {
        let (r, c) = self.shape(a);
        self.reshape(a, r * c, 1)
    }
}

/// Direct evaluation on owned dense matrices.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl Backend for Eager {
    type M = DMatrix<f64>;

    fn lift(&self, m: DMatrix<f64>) -> Self::M {
        m
    }

    fn with_value<R>(&self, a: &Self::M, f: impl FnOnce(&DMatrix<f64>) -> R) -> R {
        f(a)
    }

    fn add(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a + b
    }

    fn sub(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a - b
    }

    fn scale(&self, a: &Self::M, c: f64) -> Self::M {
        a * c
    }

    fn hadamard(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a.component_mul(b)
    }

    fn matmul(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a * b
    }

    fn tr_matmul(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a.tr_mul(b)
    }

    fn matmul_tr(&self, a: &Self::M, b: &Self::M) -> Self::M {
        a * b.transpose()
    }

    fn transpose(&self, a: &Self::M) -> Self::M {
        a.transpose()
    }

    fn add_col(&self, a: &Self::M, v: &Self::M) -> Self::M {
        kernels::add_col(a, v)
    }

    fn mul_rows(&self, a: &Self::M, v: &Self::M) -> Self::M {
        kernels::mul_rows(a, v)
    }

    fn mul_cols(&self, a: &Self::M, v: &Self::M) -> Self::M {
        kernels::mul_cols(a, v)
    }

    fn row_mean(&self, a: &Self::M) -> Self::M {
        kernels::row_mean(a)
    }

    fn sum(&self, a: &Self::M) -> Self::M {
        DMatrix::from_element(1, 1, a.sum())
    }

    fn col_sums(&self, a: &Self::M) -> Self::M {
        kernels::col_sums(a)
    }

    fn unary(&self, a: &Self::M, f: Unary) -> Self::M {
        a.map(|x| f.eval(x))
    }

    fn clamp(&self, a: &Self::M, lo: f64, hi: f64) -> Self::M {
        a.map(|x| x.clamp(lo, hi))
    }

    fn hcat(&self, parts: &[Self::M]) -> Self::M {
        let refs: Vec<&DMatrix<f64>> = parts.iter().collect();
        kernels::hcat(&refs)
    }

    fn vcat(&self, parts: &[Self::M]) -> Self::M {
        let refs: Vec<&DMatrix<f64>> = parts.iter().collect();
        kernels::vcat(&refs)
    }

    fn cols(&self, a: &Self::M, start: usize, len: usize) -> Self::M {
        a.columns(start, len).into_owned()
    }

    fn rows(&self, a: &Self::M, start: usize, len: usize) -> Self::M {
        a.rows(start, len).into_owned()
    }

    fn reshape(&self, a: &Self::M, rows: usize, cols: usize) -> Self::M {
        kernels::reshape(a, rows, cols)
    }

    fn diag(&self, a: &Self::M) -> Self::M {
        DMatrix::from_column_slice(a.nrows(), 1, a.diagonal().as_slice())
    }

    fn cholesky(&self, a: &Self::M) -> Result<Self::M> {
        kernels::cholesky(a)
    }

    fn solve_lower(&self, l: &Self::M, b: &Self::M) -> Self::M {
        kernels::solve_lower(l, b)
    }

    fn solve_upper_tr(&self, l: &Self::M, b: &Self::M) -> Self::M {
        kernels::solve_upper_tr(l, b)
    }
}
