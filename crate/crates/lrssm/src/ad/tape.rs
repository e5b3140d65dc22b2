use std::cell::RefCell;

use nalgebra::DMatrix;

use super::kernels::{self, Mat};
use super::{Backend, Unary};
use crate::error::Result;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    MatMul(usize, usize),
    TrMatMul(usize, usize),
    MatMulTr(usize, usize),
    Transpose(usize),
    AddCol(usize, usize),
    MulRows(usize, usize),
    MulCols(usize, usize),
    RowMean(usize),
    Sum(usize),
    ColSums(usize),
    Unary(usize, Unary),
    Clamp(usize, f64, f64),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Cols(usize, usize),
    Rows(usize, usize),
    Reshape(usize),
    Diag(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveUpperTr(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode recorder over matrix-valued operations.
///
/// Values are computed eagerly as operations are recorded; [`Tape::gradients`]
/// then walks the record backwards once. A tape is single-threaded; run one
/// tape per sequence for batch parallelism.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn unop(&self, a: Var, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        let needs = self.needs(&[a.0]);
        self.push(value, op, needs)
    }

    fn binop(&self, a: Var, b: Var, op: Op, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(&[a.0, b.0]);
        self.push(value, op, needs)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn gradients(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.0].value.shape(), (1, 1), "gradient output must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Mat::from_element(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |j: usize| &nodes[j].value;
            let live = |j: usize| nodes[j].needs_grad;
            let mut acc = |j: usize, d: Mat| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(x) => *x += d,
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Hadamard(a, b) => {
                    if live(*a) {
                        acc(*a, g.component_mul(val(*b)));
                    }
                    if live(*b) {
                        acc(*b, g.component_mul(val(*a)));
                    }
                }
                Op::MatMul(a, b) => {
                    if live(*a) {
                        acc(*a, &g * val(*b).transpose());
                    }
                    if live(*b) {
                        acc(*b, val(*a).tr_mul(&g));
                    }
                }
                Op::TrMatMul(a, b) => {
                    if live(*a) {
                        acc(*a, val(*b) * g.transpose());
                    }
                    if live(*b) {
                        acc(*b, val(*a) * &g);
                    }
                }
                Op::MatMulTr(a, b) => {
                    if live(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if live(*b) {
                        acc(*b, g.tr_mul(val(*a)));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::AddCol(a, v) => {
                    if live(*v) {
                        acc(*v, kernels::row_sums(&g));
                    }
                    acc(*a, g);
                }
                Op::MulRows(a, v) => {
                    if live(*v) {
                        acc(*v, kernels::row_sums(&g.component_mul(val(*a))));
                    }
                    if live(*a) {
                        acc(*a, kernels::mul_rows(&g, val(*v)));
                    }
                }
                Op::MulCols(a, v) => {
                    if live(*v) {
                        acc(*v, kernels::col_sums(&g.component_mul(val(*a))));
                    }
                    if live(*a) {
                        acc(*a, kernels::mul_cols(&g, val(*v)));
                    }
                }
                Op::RowMean(a) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    let gs = &g / c as f64;
                    for mut col in d.column_iter_mut() {
                        col.copy_from(&gs.column(0));
                    }
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::ColSums(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_fn(r, c, |_, j| g[(0, j)]));
                }
                Op::Unary(a, f) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = Mat::from_fn(x.nrows(), x.ncols(), |r, c| {
                        g[(r, c)] * f.deriv(x[(r, c)], y[(r, c)])
                    });
                    acc(*a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let d = Mat::from_fn(x.nrows(), x.ncols(), |r, c| {
                        let v = x[(r, c)];
                        if v > *lo && v < *hi {
                            g[(r, c)]
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::HCat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if live(p) {
                            acc(p, g.columns(at, w).into_owned());
                        }
                        at += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        if live(p) {
                            acc(p, g.rows(at, h).into_owned());
                        }
                        at += h;
                    }
                }
                Op::Cols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    d.columns_mut(*start, g.ncols()).copy_from(&g);
                    acc(*a, d);
                }
                Op::Rows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut d = Mat::zeros(r, c);
                    d.rows_mut(*start, g.nrows()).copy_from(&g);
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, kernels::reshape(&g, r, c));
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut d = Mat::zeros(n, n);
                    for k in 0..n {
                        d[(k, k)] = g[(k, 0)];
                    }
                    acc(*a, d);
                }
                Op::Cholesky(a) => {
                    acc(*a, kernels::cholesky_adjoint(&node.value, &g));
                }
                Op::SolveLower(l, b) => {
                    let lv = val(*l);
                    let gb = kernels::solve_upper_tr(lv, &g);
                    if live(*l) {
                        acc(*l, -kernels::tril(&(&gb * node.value.transpose())));
                    }
                    acc(*b, gb);
                }
                Op::SolveUpperTr(l, b) => {
                    let lv = val(*l);
                    let gb = kernels::solve_lower(lv, &g);
                    if live(*l) {
                        acc(*l, -kernels::tril(&(&node.value * gb.transpose())));
                    }
                    acc(*b, gb);
                }
            }
        }
        Gradients { grads }
    }
}

impl Backend for Tape {
    type M = Var;

    fn param(&self, m: DMatrix<f64>) -> Var {
        self.leaf(m)
    }

    fn lift(&self, m: DMatrix<f64>) -> Var {
        self.push(m, Op::Const, false)
    }

    fn with_value<R>(&self, a: &Var, f: impl FnOnce(&DMatrix<f64>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    fn add(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    fn scale(&self, a: &Var, c: f64) -> Var {
        self.unop(*a, Op::Scale(a.0, c), |x| x * c)
    }

    fn hadamard(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::Hadamard(a.0, b.0), |x, y| x.component_mul(y))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::MatMul(a.0, b.0), |x, y| x * y)
    }

    fn tr_matmul(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::TrMatMul(a.0, b.0), |x, y| x.tr_mul(y))
    }

    fn matmul_tr(&self, a: &Var, b: &Var) -> Var {
        self.binop(*a, *b, Op::MatMulTr(a.0, b.0), |x, y| x * y.transpose())
    }

    fn transpose(&self, a: &Var) -> Var {
        self.unop(*a, Op::Transpose(a.0), |x| x.transpose())
    }

    fn add_col(&self, a: &Var, v: &Var) -> Var {
        self.binop(*a, *v, Op::AddCol(a.0, v.0), kernels::add_col)
    }

    fn mul_rows(&self, a: &Var, v: &Var) -> Var {
        self.binop(*a, *v, Op::MulRows(a.0, v.0), kernels::mul_rows)
    }

    fn mul_cols(&self, a: &Var, v: &Var) -> Var {
        self.binop(*a, *v, Op::MulCols(a.0, v.0), kernels::mul_cols)
    }

    fn row_mean(&self, a: &Var) -> Var {
        self.unop(*a, Op::RowMean(a.0), kernels::row_mean)
    }

    fn sum(&self, a: &Var) -> Var {
        self.unop(*a, Op::Sum(a.0), |x| Mat::from_element(1, 1, x.sum()))
    }

    fn col_sums(&self, a: &Var) -> Var {
        self.unop(*a, Op::ColSums(a.0), kernels::col_sums)
    }

    fn unary(&self, a: &Var, f: Unary) -> Var {
        self.unop(*a, Op::Unary(a.0, f), |x| x.map(|v| f.eval(v)))
    }

    fn clamp(&self, a: &Var, lo: f64, hi: f64) -> Var {
        self.unop(*a, Op::Clamp(a.0, lo, hi), |x| x.map(|v| v.clamp(lo, hi)))
    }

    fn hcat(&self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Mat> = ids.iter().map(|&i| &nodes[i].value).collect();
            kernels::hcat(&refs)
        };
        let needs = self.needs(&ids);
        self.push(value, Op::HCat(ids), needs)
    }

    fn vcat(&self, parts: &[Var]) -> Var {
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Mat> = ids.iter().map(|&i| &nodes[i].value).collect();
            kernels::vcat(&refs)
        };
        let needs = self.needs(&ids);
        self.push(value, Op::VCat(ids), needs)
    }

    fn cols(&self, a: &Var, start: usize, len: usize) -> Var {
        self.unop(*a, Op::Cols(a.0, start), |x| x.columns(start, len).into_owned())
    }

    fn rows(&self, a: &Var, start: usize, len: usize) -> Var {
        self.unop(*a, Op::Rows(a.0, start), |x| x.rows(start, len).into_owned())
    }

    fn reshape(&self, a: &Var, rows: usize, cols: usize) -> Var {
        self.unop(*a, Op::Reshape(a.0), |x| kernels::reshape(x, rows, cols))
    }

    fn diag(&self, a: &Var) -> Var {
        self.unop(*a, Op::Diag(a.0), |x| {
            Mat::from_column_slice(x.nrows(), 1, x.diagonal().as_slice())
        })
    }

    fn cholesky(&self, a: &Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            kernels::cholesky(&nodes[a.0].value)?
        };
        let needs = self.needs(&[a.0]);
        Ok(self.push(value, Op::Cholesky(a.0), needs))
    }

    fn solve_lower(&self, l: &Var, b: &Var) -> Var {
        self.binop(*l, *b, Op::SolveLower(l.0, b.0), kernels::solve_lower)
    }

    fn solve_upper_tr(&self, l: &Var, b: &Var) -> Var {
        self.binop(*l, *b, Op::SolveUpperTr(l.0, b.0), kernels::solve_upper_tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // small deterministic LCG; keeps the test free of RNG plumbing
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Checks d(f)/d(x) against central differences for every entry of x.
    fn check<F>(x0: &Mat, f: F)
    where
        F: Fn(&Tape, Var) -> Var,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = f(&tape, x);
        let g = tape.gradients(out).get_or_zeros(x, x0.shape());
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let t = Tape::new();
                let mut xp = x0.clone();
                xp[k] += delta;
                let v = t.leaf(xp);
                let o = f(&t, v);
                t.scalar(&o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((g[k] - fd).abs() < tol, "entry {k}: analytic {} vs fd {fd}", g[k]);
        }
    }

    #[test]
    fn matmul_family() {
        let b = rand_mat(3, 4, 2);
        let x0 = rand_mat(2, 3, 1);
        check(&x0, |t, x| {
            let bb = t.lift(b.clone());
            let y = t.matmul(&x, &bb);
            let z = t.tr_matmul(&y, &y);
            let w = t.matmul_tr(&z, &z);
            t.sum(&w)
        });
    }

    #[test]
    fn broadcasting_and_reductions() {
        let x0 = rand_mat(3, 4, 5);
        check(&x0, |t, x| {
            let v = t.row_mean(&x);
            let y = t.add_col(&x, &v);
            let y = t.mul_rows(&y, &v);
            let cs = t.col_sums(&x);
            let y = t.mul_cols(&y, &cs);
            let y = t.unary(&y, Unary::Tanh);
            let y = t.hadamard(&y, &x);
            t.frob_sq(&y)
        });
    }

    #[test]
    fn elementwise() {
        let x0 = rand_mat(2, 2, 9).map(|v| v.abs() + 0.5);
        for f in [
            Unary::Tanh,
            Unary::Sigmoid,
            Unary::Exp,
            Unary::Ln,
            Unary::Square,
            Unary::Sqrt,
            Unary::Sin,
            Unary::Cos,
        ] {
            check(&x0, |t, x| {
                let y = t.unary(&x, f);
                let y = t.hadamard(&y, &x);
                t.sum(&y)
            });
        }
    }

    #[test]
    fn slicing_and_concat() {
        let x0 = rand_mat(4, 3, 11);
        check(&x0, |t, x| {
            let a = t.cols(&x, 1, 2);
            let b = t.rows(&x, 0, 2);
            let c = t.hcat(&[a, a]);
            let d = t.vcat(&[c, c]);
            let e = t.reshape(&b, 3, 2);
            let f = t.transpose(&e);
            let dd = t.rows(&d, 0, 2);
            let prod = t.matmul(&dd, &t.cols(&x, 0, 1));
            let s1 = t.frob_sq(&prod);
            let s2 = t.frob_sq(&f);
            t.sub(&s1, &t.scale(&s2, 0.3))
        });
    }

    #[test]
    fn cholesky_and_solves() {
        let x0 = rand_mat(3, 3, 13);
        let b = rand_mat(3, 2, 17);
        check(&x0, |t, x| {
            // SPD input built from x
            let a = t.add(&t.tr_matmul(&x, &x), &t.identity(3));
            let l = t.cholesky(&a).unwrap();
            let bb = t.lift(b.clone());
            let y = t.chol_solve(&l, &bb);
            let s = t.sum_log_diag(&l);
            let tr = t.trace(&t.matmul_tr(&y, &bb));
            t.add(&s, &tr)
        });
    }

    #[test]
    fn triangular_solve_wrt_factor() {
        let x0 = rand_mat(3, 3, 23);
        let b = rand_mat(3, 2, 29);
        check(&x0, |t, x| {
            let a = t.add(&t.tr_matmul(&x, &x), &t.scale(&t.identity(3), 2.0));
            let l = t.cholesky(&a).unwrap();
            let bb = t.lift(b.clone());
            let y1 = t.solve_lower(&l, &bb);
            let y2 = t.solve_upper_tr(&l, &y1);
            let d = t.diag(&a);
            let c = t.clamp(&d, -10.0, 2.5);
            t.add(&t.frob_sq(&y2), &t.sum(&c))
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let c = t.lift(Mat::identity(2, 2));
        let x = t.leaf(Mat::identity(2, 2));
        let y = t.sum(&t.matmul(&c, &x));
        let g = t.gradients(y);
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }
}
