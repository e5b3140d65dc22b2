//! Low-rank-plus-diagonal Gaussian algebra.
//!
//! Predictive distributions carry covariance `P̄ = Mc Mcᵀ + Q` with `Q`
//! diagonal and `Mc` the `L×S` matrix of scaled, centered propagated
//! samples. Posteriors add a rank-`r` precision update `K Kᵀ` on top of a
//! base distribution, so `P = P̄ − P̄K (I + KᵀP̄K)⁻¹ KᵀP̄`. No `L×L` matrix is
//! ever formed: every operation is a handful of `L×S`/`L×r` products and
//! small `S×S`/`r×r` Cholesky solves.
//!
//! Small factors are stored as the lower Cholesky factor `C` of the inner
//! matrix (`I + McᵀQ⁻¹Mc` or `I + KᵀP̄K`). The square root `Υ` of its
//! inverse is `C⁻ᵀ` up to an orthogonal rotation; products with `ΥΥᵀ` are
//! evaluated as triangular solves against `C`, and `−2 Σ log Υᵢᵢ` equals
//! `2 Σ log Cᵢᵢ`. [`upsilon`] materializes the lower-triangular `Υ` for
//! inspection.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::ad::{kernels, Backend, Unary};
use crate::error::{Error, Result};

/// Lowest KL value accepted before reporting a numerical inconsistency.
pub const KL_FLOOR: f64 = -1e-9;

/// Diagonal covariance with cached inverse and square roots.
#[derive(Debug, Clone)]
pub struct DiagCov<M> {
    pub var: M,
    pub inv: M,
    pub sqrt: M,
    pub inv_sqrt: M,
}

impl<M: Clone> DiagCov<M> {
    /// Builds from a column of log-variances.
    pub fn from_log_var<O: Backend<M = M>>(o: &O, log_var: &M) -> Self {
        DiagCov {
            var: o.unary(log_var, Unary::Exp),
            inv: o.unary(&o.neg(log_var), Unary::Exp),
            sqrt: o.unary(&o.scale(log_var, 0.5), Unary::Exp),
            inv_sqrt: o.unary(&o.scale(log_var, -0.5), Unary::Exp),
        }
    }

    /// Builds from a column of variances, which must be strictly positive.
    pub fn from_var<O: Backend<M = M>>(o: &O, var: &M) -> Result<Self> {
        let ok = o.with_value(var, |v| v.ncols() == 1 && v.iter().all(|x| *x > 0.0 && x.is_finite()));
        if !ok {
            return Err(Error::Invalid("diagonal covariance needs positive finite entries".into()));
        }
        Ok(Self::from_log_var(o, &o.unary(var, Unary::Ln)))
    }

    pub fn dim<O: Backend<M = M>>(&self, o: &O) -> usize {
        o.shape(&self.var).0
    }
}

/// One-step predictive `N(m̄, Mc Mcᵀ + Q)`.
///
/// A predictive without sample matrix (`S = 0`) is a plain diagonal
/// Gaussian; the initial-state prior takes this form.
#[derive(Debug, Clone)]
pub struct PredictiveGaussian<M> {
    pub mean: M,
    pub mc: Option<M>,
    pub q: DiagCov<M>,
    qinv_mc: Option<M>,
    /// Lower Cholesky factor of `I_S + McᵀQ⁻¹Mc`.
    chol: Option<M>,
    dim: usize,
    samples: usize,
}

impl<M: Clone> PredictiveGaussian<M> {
    /// Moment-matches `S ≥ 2` propagated samples (the columns of `propagated`).
    pub fn from_samples<O: Backend<M = M>>(o: &O, propagated: &M, q: DiagCov<M>) -> Result<Self> {
        let (l, s) = o.shape(propagated);
        if s < 2 {
            return Err(Error::Invalid(format!("moment matching needs S >= 2 samples, got {s}")));
        }
        if q.dim(o) != l {
            return Err(Error::shape("predictive_from_samples", l, q.dim(o)));
        }
        if !o.is_finite(propagated) {
            return Err(Error::NonFinite { what: "propagated samples" });
        }
        let mean = o.row_mean(propagated);
        let centered = o.add_col(propagated, &o.neg(&mean));
        let mc = o.scale(&centered, 1.0 / (s as f64).sqrt());
        let qinv_mc = o.mul_rows(&mc, &q.inv);
        let inner = o.add(&o.identity(s), &o.tr_matmul(&mc, &qinv_mc));
        let chol = o.cholesky(&inner)?;
        Ok(PredictiveGaussian {
            mean,
            mc: Some(mc),
            q,
            qinv_mc: Some(qinv_mc),
            chol: Some(chol),
            dim: l,
            samples: s,
        })
    }

    /// Builds a predictive from an explicit square-root factor `Mc`
    /// (`P̄ = Mc Mcᵀ + Q`), e.g. from closed-form moment propagation.
    pub fn from_factor<O: Backend<M = M>>(o: &O, mean: M, mc: M, q: DiagCov<M>) -> Result<Self> {
        let (l, s) = o.shape(&mc);
        if o.shape(&mean) != (l, 1) || q.dim(o) != l {
            return Err(Error::shape("predictive_from_factor", l, o.shape(&mean).0));
        }
        let qinv_mc = o.mul_rows(&mc, &q.inv);
        let inner = o.add(&o.identity(s), &o.tr_matmul(&mc, &qinv_mc));
        let chol = o.cholesky(&inner)?;
        Ok(PredictiveGaussian {
            mean,
            mc: Some(mc),
            q,
            qinv_mc: Some(qinv_mc),
            chol: Some(chol),
            dim: l,
            samples: s,
        })
    }

    /// Diagonal Gaussian `N(mean, Q)` with no sample component.
    pub fn diagonal<O: Backend<M = M>>(o: &O, mean: M, q: DiagCov<M>) -> Result<Self> {
        let l = q.dim(o);
        if o.shape(&mean) != (l, 1) {
            return Err(Error::shape("diagonal predictive", format!("({l}, 1)"), format!("{:?}", o.shape(&mean))));
        }
        Ok(PredictiveGaussian {
            mean,
            mc: None,
            q,
            qinv_mc: None,
            chol: None,
            dim: l,
            samples: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sample columns `S` (zero for a diagonal predictive).
    pub fn num_samples(&self) -> usize {
        self.samples
    }

    pub fn inner_chol(&self) -> Option<&M> {
        self.chol.as_ref()
    }

    /// `P̄ v` in `O(LS)` per column.
    pub fn cov_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> M {
        let diag = o.mul_rows(v, &self.q.var);
        match &self.mc {
            Some(mc) => o.add(&diag, &o.matmul(mc, &o.tr_matmul(mc, v))),
            None => diag,
        }
    }

    /// `P̄⁻¹ v` through the Woodbury identity, `O(LS + S²)` per column.
    pub fn prec_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> Result<M> {
        let (rows, _) = o.shape(v);
        if rows != self.dim {
            return Err(Error::shape("prec_mvm", self.dim, rows));
        }
        let qv = o.mul_rows(v, &self.q.inv);
        Ok(match (&self.qinv_mc, &self.chol) {
            (Some(qm), Some(c)) => {
                let inner = o.chol_solve(c, &o.tr_matmul(qm, v));
                o.sub(&qv, &o.matmul(qm, &inner))
            }
            _ => qv,
        })
    }

    /// Zero-mean draws `[Mc Q^{1/2}] ε`. Rows `0..S` of `noise` drive the
    /// sample component and rows `S..S+L` the diagonal; extra rows are ignored.
    pub fn sample_centered<O: Backend<M = M>>(&self, o: &O, noise: &M) -> Result<M> {
        let (rows, _) = o.shape(noise);
        let s = self.samples;
        if rows < s + self.dim {
            return Err(Error::shape("sample_centered", format!(">= {}", s + self.dim), rows));
        }
        let diag = o.mul_rows(&o.rows(noise, s, self.dim), &self.q.sqrt);
        Ok(match &self.mc {
            Some(mc) => o.add(&o.matmul(mc, &o.rows(noise, 0, s)), &diag),
            None => diag,
        })
    }

    /// `log |I_S + McᵀQ⁻¹Mc|`
    pub fn logdet_inner<O: Backend<M = M>>(&self, o: &O) -> Option<M> {
        self.chol.as_ref().map(|c| o.scale(&o.sum_log_diag(c), 2.0))
    }

    /// `log |P̄|`
    pub fn logdet<O: Backend<M = M>>(&self, o: &O) -> M {
        let lq = o.sum(&o.unary(&self.q.var, Unary::Ln));
        match self.logdet_inner(o) {
            Some(inner) => o.add(&lq, &inner),
            None => lq,
        }
    }

    /// `tr(D P̄)` for diagonal `D` given as a column.
    fn trace_diag_product<O: Backend<M = M>>(&self, o: &O, d: &M, d_sqrt: &M) -> M {
        let diag = o.sum(&o.hadamard(d, &self.q.var));
        match &self.mc {
            Some(mc) => o.add(&diag, &o.frob_sq(&o.mul_rows(mc, d_sqrt))),
            None => diag,
        }
    }
}

/// Natural-parameter update `(k, K Kᵀ)`; absent parts are zero and an
/// absent `K` means rank zero.
#[derive(Debug, Clone)]
pub struct LowRankNatUpdate<M> {
    pub k: Option<M>,
    pub factor: Option<M>,
}

impl<M: Clone> LowRankNatUpdate<M> {
    pub fn empty() -> Self {
        LowRankNatUpdate { k: None, factor: None }
    }

    pub fn new(k: M, factor: M) -> Self {
        LowRankNatUpdate {
            k: Some(k),
            factor: Some(factor),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_none() && self.factor.is_none()
    }

    pub fn rank<O: Backend<M = M>>(&self, o: &O) -> usize {
        self.factor.as_ref().map_or(0, |f| o.shape(f).1)
    }
}

/// The distribution a posterior update is applied to.
#[derive(Debug, Clone)]
pub enum Base<M> {
    Predictive(Arc<PredictiveGaussian<M>>),
    Posterior(Arc<PosteriorGaussian<M>>),
}

impl<M: Clone> Base<M> {
    pub fn mean(&self) -> &M {
        match self {
            Base::Predictive(p) => &p.mean,
            Base::Posterior(p) => &p.mean,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Base::Predictive(p) => p.dim(),
            Base::Posterior(p) => p.dim(),
        }
    }

    pub fn cov_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> M {
        match self {
            Base::Predictive(p) => p.cov_mvm(o, v),
            Base::Posterior(p) => p.cov_mvm_unchecked(o, v),
        }
    }

    pub fn prec_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> Result<M> {
        match self {
            Base::Predictive(p) => p.prec_mvm(o, v),
            Base::Posterior(p) => p.prec_mvm(o, v),
        }
    }

    /// The predictive at the bottom of the update stack.
    pub fn root(&self) -> &Arc<PredictiveGaussian<M>> {
        match self {
            Base::Predictive(p) => p,
            Base::Posterior(p) => p.base.root(),
        }
    }
}

#[derive(Debug, Clone)]
struct Stage<M> {
    factor: M,
    /// `P_base K`
    gain: M,
    /// Lower Cholesky factor of `I_r + Kᵀ P_base K`.
    chol: M,
}

/// Posterior `N(m, (P_base⁻¹ + K Kᵀ)⁻¹)` with the covariance held implicitly.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian<M> {
    pub mean: M,
    pub base: Base<M>,
    stage: Option<Stage<M>>,
    dim: usize,
}

/// Conjugate update of `base` by the natural-parameter increment `upd`:
/// `h = P_base⁻¹ m_base + k`, `P⁻¹ = P_base⁻¹ + K Kᵀ`, `m = P h`.
pub fn posterior_update<O: Backend>(
    o: &O,
    base: Base<O::M>,
    upd: &LowRankNatUpdate<O::M>,
) -> Result<PosteriorGaussian<O::M>> {
    let l = base.dim();
    if let Some(k) = &upd.k {
        if o.shape(k) != (l, 1) {
            return Err(Error::shape("posterior_update k", format!("({l}, 1)"), format!("{:?}", o.shape(k))));
        }
    }
    if let Some(f) = &upd.factor {
        if o.shape(f).0 != l {
            return Err(Error::shape("posterior_update K rows", l, o.shape(f).0));
        }
    }
    // u = P_base h = m_base + P_base k
    let u = match &upd.k {
        Some(k) => o.add(base.mean(), &base.cov_mvm(o, k)),
        None => base.mean().clone(),
    };
    let factor = upd.factor.as_ref().filter(|f| o.shape(*f).1 > 0);
    let (mean, stage) = match factor {
        Some(f) => {
            let r = o.shape(f).1;
            let gain = base.cov_mvm(o, f);
            let inner = o.add(&o.identity(r), &o.tr_matmul(f, &gain));
            let chol = o.cholesky(&inner)?;
            // m = u − G (I + KᵀG)⁻¹ Kᵀ u
            let corr = o.matmul(&gain, &o.chol_solve(&chol, &o.tr_matmul(f, &u)));
            (
                o.sub(&u, &corr),
                Some(Stage {
                    factor: f.clone(),
                    gain,
                    chol,
                }),
            )
        }
        None => (u, None),
    };
    Ok(PosteriorGaussian {
        mean,
        base,
        stage,
        dim: l,
    })
}

impl<M: Clone> PosteriorGaussian<M> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank<O: Backend<M = M>>(&self, o: &O) -> usize {
        self.stage.as_ref().map_or(0, |s| o.shape(&s.factor).1)
    }

    pub fn factor(&self) -> Option<&M> {
        self.stage.as_ref().map(|s| &s.factor)
    }

    /// Lower Cholesky factor of `I_r + KᵀP_base K`.
    pub fn inner_chol(&self) -> Option<&M> {
        self.stage.as_ref().map(|s| &s.chol)
    }

    pub fn predictive(&self) -> Option<&Arc<PredictiveGaussian<M>>> {
        match &self.base {
            Base::Predictive(p) => Some(p),
            Base::Posterior(_) => None,
        }
    }

    fn cov_mvm_unchecked<O: Backend<M = M>>(&self, o: &O, v: &M) -> M {
        let pv = self.base.cov_mvm(o, v);
        match &self.stage {
            Some(st) => {
                let inner = o.chol_solve(&st.chol, &o.tr_matmul(&st.gain, v));
                o.sub(&pv, &o.matmul(&st.gain, &inner))
            }
            None => pv,
        }
    }

    /// `P v` using only structured products.
    pub fn cov_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> Result<M> {
        let (rows, _) = o.shape(v);
        if rows != self.dim {
            return Err(Error::shape("cov_mvm", self.dim, rows));
        }
        Ok(self.cov_mvm_unchecked(o, v))
    }

    /// `P⁻¹ v = P_base⁻¹ v + K Kᵀ v`
    pub fn prec_mvm<O: Backend<M = M>>(&self, o: &O, v: &M) -> Result<M> {
        let pv = self.base.prec_mvm(o, v)?;
        Ok(match &self.stage {
            Some(st) => o.add(&pv, &o.matmul(&st.factor, &o.tr_matmul(&st.factor, v))),
            None => pv,
        })
    }

    /// Maps zero-mean draws from the base distribution to zero-mean draws
    /// from this posterior: `z̄ − P_base K ΥΥᵀ (Kᵀ z̄ + w)` with `w` standard
    /// normal. The first `r` rows of `w` are used.
    pub fn correct<O: Backend<M = M>>(&self, o: &O, base_centered: &M, w: &M) -> Result<M> {
        match &self.stage {
            Some(st) => {
                let r = o.shape(&st.factor).1;
                let (wr, wc) = o.shape(w);
                if wr < r || wc != o.shape(base_centered).1 {
                    return Err(Error::shape("posterior correction noise", format!(">= {r} rows"), format!("({wr}, {wc})")));
                }
                let rhs = o.add(&o.tr_matmul(&st.factor, base_centered), &o.rows(w, 0, r));
                let inner = o.chol_solve(&st.chol, &rhs);
                Ok(o.sub(base_centered, &o.matmul(&st.gain, &inner)))
            }
            None => Ok(base_centered.clone()),
        }
    }

    /// Draws from a posterior whose base is a predictive:
    /// `m + z̄ − P̄K ΥΥᵀ(Kᵀ z̄ + w)`, `z̄ = [Mc Q^{1/2}] noise`.
    pub fn sample<O: Backend<M = M>>(&self, o: &O, pred_noise: &M, w: &M) -> Result<M> {
        let pred = self
            .predictive()
            .ok_or_else(|| Error::Invalid("sample() needs a posterior over a predictive".into()))?;
        let zbar = pred.sample_centered(o, pred_noise)?;
        let centered = self.correct(o, &zbar, w)?;
        Ok(o.add_col(&centered, &self.mean))
    }

    /// `log |P_base| − log |P|` summed over the whole update stack.
    fn stack_logdet_gain<O: Backend<M = M>>(&self, o: &O) -> Option<M> {
        let own = self.stage.as_ref().map(|st| o.scale(&o.sum_log_diag(&st.chol), 2.0));
        let below = match &self.base {
            Base::Posterior(p) => p.stack_logdet_gain(o),
            Base::Predictive(_) => None,
        };
        match (own, below) {
            (Some(a), Some(b)) => Some(o.add(&a, &b)),
            (a, b) => a.or(b),
        }
    }

    /// `log |P|`
    pub fn logdet<O: Backend<M = M>>(&self, o: &O) -> M {
        let root = self.base.root().logdet(o);
        match self.stack_logdet_gain(o) {
            Some(g) => o.sub(&root, &g),
            None => root,
        }
    }

    /// `tr(D P)` for diagonal `D` (column `d`, with square root `d_sqrt`).
    fn trace_diag_product<O: Backend<M = M>>(&self, o: &O, d: &M, d_sqrt: &M) -> M {
        let below = match &self.base {
            Base::Predictive(p) => p.trace_diag_product(o, d, d_sqrt),
            Base::Posterior(p) => p.trace_diag_product(o, d, d_sqrt),
        };
        match &self.stage {
            Some(st) => {
                // tr(D^{1/2} G C⁻ᵀC⁻¹ Gᵀ D^{1/2}) = ‖C⁻¹ Gᵀ D^{1/2}‖²
                let gd = o.mul_rows(&st.gain, d_sqrt);
                let z = o.solve_lower(&st.chol, &o.transpose(&gd));
                o.sub(&below, &o.frob_sq(&z))
            }
            None => below,
        }
    }
}

/// Pieces of `KL(q ‖ p̄)`; the KL is `½ (mean + trace + logdet − L)`.
#[derive(Debug, Clone)]
pub struct KlTerms<M> {
    /// `(m̄ − m)ᵀ P̄⁻¹ (m̄ − m)`
    pub mean: M,
    /// `tr(P̄⁻¹ P)`
    pub trace: M,
    /// `log |P̄| − log |P|`
    pub logdet: M,
    pub dim: usize,
}

impl<M: Clone> KlTerms<M> {
    pub fn total<O: Backend<M = M>>(&self, o: &O) -> Result<M> {
        let sum = o.add(&o.add(&self.mean, &self.trace), &self.logdet);
        let kl = o.scale(&o.add(&sum, &o.lift(DMatrix::from_element(1, 1, -(self.dim as f64)))), 0.5);
        let v = o.scalar(&kl);
        if v.is_nan() {
            return Err(Error::NonFinite { what: "KL" });
        }
        if v < KL_FLOOR {
            return Err(Error::NegativeKl { value: v });
        }
        Ok(kl)
    }
}

fn require_pred<M: Clone>(post: &PosteriorGaussian<M>) -> Result<&Arc<PredictiveGaussian<M>>> {
    post.predictive()
        .ok_or_else(|| Error::Invalid("expected a posterior over a predictive".into()))
}

/// `log |P̄| / |P| = log |I_r + KᵀP̄K| = 2 Σ log Cᵢᵢ`
pub fn logdet_ratio<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> Result<O::M> {
    require_pred(post)?;
    Ok(match post.inner_chol() {
        Some(c) => o.scale(&o.sum_log_diag(c), 2.0),
        None => o.zeros(1, 1),
    })
}

/// `tr(P̄⁻¹ P) = L − tr(McᵀKΥΥᵀKᵀMc) − tr(ΥᵀKᵀQKΥ)`
pub fn trace_term<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> Result<O::M> {
    let pred = require_pred(post)?;
    let l = o.lift(DMatrix::from_element(1, 1, post.dim() as f64));
    let Some(st) = &post.stage else {
        return Ok(l);
    };
    let kq = o.mul_rows(&st.factor, &pred.q.sqrt);
    let zq = o.solve_lower(&st.chol, &o.transpose(&kq));
    let mut out = o.sub(&l, &o.frob_sq(&zq));
    if let Some(mc) = &pred.mc {
        let zm = o.solve_lower(&st.chol, &o.tr_matmul(&st.factor, mc));
        out = o.sub(&out, &o.frob_sq(&zm));
    }
    Ok(out)
}

/// KL from a posterior to the predictive it updated, in `O(LSr + LS² + Lr²)`.
pub fn kl_terms<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> Result<KlTerms<O::M>> {
    let pred = require_pred(post)?;
    let d = o.sub(&pred.mean, &post.mean);
    let mean = o.sum(&o.hadamard(&d, &pred.prec_mvm(o, &d)?));
    Ok(KlTerms {
        mean,
        trace: trace_term(o, post)?,
        logdet: logdet_ratio(o, post)?,
        dim: post.dim(),
    })
}

/// `KL(q ‖ q̄)` where `q` is a posterior built directly on `q̄`.
pub fn kl_post_pred<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> Result<O::M> {
    kl_terms(o, post)?.total(o)
}

/// KL from an arbitrary (possibly stacked) posterior to a predictive that
/// it was *not* necessarily built on.
///
/// Determinants come from the small factors of both predictives and every
/// update stage; the trace is `tr(Q⁻¹P)` minus a rank-`S` Woodbury
/// correction, with `tr(Q⁻¹P)` peeled stage by stage.
pub fn kl_terms_general<O: Backend>(
    o: &O,
    post: &PosteriorGaussian<O::M>,
    target: &PredictiveGaussian<O::M>,
) -> Result<KlTerms<O::M>> {
    if target.dim() != post.dim() {
        return Err(Error::shape("kl_terms_general", post.dim(), target.dim()));
    }
    let logdet = o.sub(&target.logdet(o), &post.logdet(o));
    let qs = &target.q;
    let mut trace = post.trace_diag_product(o, &qs.inv, &qs.inv_sqrt);
    if let (Some(qm), Some(c)) = (&target.qinv_mc, &target.chol) {
        // tr(C⁻¹ XᵀPX), X = Q⁻¹Ms
        let px = post.cov_mvm_unchecked(o, qm);
        let inner = o.chol_solve(c, &o.tr_matmul(qm, &px));
        trace = o.sub(&trace, &o.trace(&inner));
    }
    let d = o.sub(&target.mean, &post.mean);
    let mean = o.sum(&o.hadamard(&d, &target.prec_mvm(o, &d)?));
    Ok(KlTerms {
        mean,
        trace,
        logdet,
        dim: post.dim(),
    })
}

/// Lower-triangular `Υ` with positive diagonal and `ΥΥᵀ = (C Cᵀ)⁻¹`.
pub fn upsilon(chol: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = chol.nrows();
    let inv = kernels::solve_upper_tr(chol, &kernels::solve_lower(chol, &DMatrix::identity(n, n)));
    kernels::cholesky(&((&inv + inv.transpose()) * 0.5))
}

/// Dense covariance of a posterior, by multiplying basis vectors.
/// Costs `O(L²(S + r))`; meant for small `L` and diagnostics.
pub fn densify<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> DMatrix<f64> {
    let id = o.identity(post.dim());
    o.value(&post.cov_mvm_unchecked(o, &id))
}

/// Dense covariance of a predictive.
pub fn densify_pred<O: Backend>(o: &O, pred: &PredictiveGaussian<O::M>) -> DMatrix<f64> {
    let id = o.identity(pred.dim());
    o.value(&pred.cov_mvm(o, &id))
}

/// Diagonal of `P`, computed column by column in `O(L²(S + r))` total.
pub fn cov_diagonal<O: Backend>(o: &O, post: &PosteriorGaussian<O::M>) -> Vec<f64> {
    let l = post.dim();
    (0..l)
        .map(|i| {
            let mut e = DMatrix::zeros(l, 1);
            e[(i, 0)] = 1.0;
            let pe = post.cov_mvm_unchecked(o, &o.lift(e));
            o.with_value(&pe, |v| v[(i, 0)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Eager;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn unit_q(l: usize) -> DiagCov<DMatrix<f64>> {
        DiagCov::from_var(&Eager, &DMatrix::from_element(l, 1, 1.0)).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_spread() {
        let o = Eager;
        let prop = DMatrix::from_fn(3, 4, |i, _| i as f64 + 0.5);
        let pred = PredictiveGaussian::from_samples(&o, &prop, unit_q(3)).unwrap();
        assert_eq!(pred.mean, col(&[0.5, 1.5, 2.5]));
        assert!(pred.mc.as_ref().unwrap().iter().all(|x| *x == 0.0));
        let c = pred.inner_chol().unwrap();
        assert_eq!(c, &DMatrix::identity(4, 4));
        assert!((upsilon(c).unwrap() - DMatrix::identity(4, 4)).abs().max() < 1e-15);
    }

    #[test]
    fn two_sample_arithmetic() {
        let o = Eager;
        let prop = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let pred = PredictiveGaussian::from_samples(&o, &prop, unit_q(2)).unwrap();
        assert_eq!(pred.mean, col(&[1.0, 0.0]));
        let h = 1.0 / 2f64.sqrt();
        let expected = DMatrix::from_row_slice(2, 2, &[-h, h, 0.0, 0.0]);
        assert!((pred.mc.as_ref().unwrap() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn rejects_too_few_or_bad_samples() {
        let o = Eager;
        assert!(PredictiveGaussian::from_samples(&o, &DMatrix::zeros(2, 1), unit_q(2)).is_err());
        let mut bad = DMatrix::zeros(2, 3);
        bad[(1, 2)] = f64::NAN;
        assert!(matches!(
            PredictiveGaussian::from_samples(&o, &bad, unit_q(2)),
            Err(Error::NonFinite { .. })
        ));
        assert!(DiagCov::from_var(&o, &col(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn prec_mvm_without_samples_divides_by_q() {
        let o = Eager;
        let q = DiagCov::from_var(&o, &col(&[2.0, 4.0, 0.5])).unwrap();
        let prop = DMatrix::from_element(3, 3, 1.0);
        let pred = PredictiveGaussian::from_samples(&o, &prop, q).unwrap();
        let v = col(&[1.0, 1.0, 1.0]);
        let got = pred.prec_mvm(&o, &v).unwrap();
        assert!((got - col(&[0.5, 0.25, 2.0])).abs().max() < 1e-15);
        assert_eq!(pred.prec_mvm(&o, &DMatrix::zeros(3, 1)).unwrap(), DMatrix::zeros(3, 1));
        assert!(pred.prec_mvm(&o, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn empty_update_is_identity() {
        let o = Eager;
        let prop = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, -0.5, 2.0, 0.3, 0.1]);
        let pred = Arc::new(PredictiveGaussian::from_samples(&o, &prop, unit_q(2)).unwrap());
        let post = posterior_update(&o, Base::Predictive(pred.clone()), &LowRankNatUpdate::empty()).unwrap();
        assert_eq!(post.mean, pred.mean);
        let v = col(&[0.3, -1.0]);
        assert_eq!(post.cov_mvm(&o, &v).unwrap(), pred.cov_mvm(&o, &v));
        assert_eq!(o.scalar(&kl_post_pred(&o, &post).unwrap()), 0.0);

        let zero = LowRankNatUpdate::new(DMatrix::zeros(2, 1), DMatrix::zeros(2, 1));
        let post0 = posterior_update(&o, Base::Predictive(pred.clone()), &zero).unwrap();
        assert_eq!(post0.mean, pred.mean);
        assert!((post0.cov_mvm(&o, &v).unwrap() - pred.cov_mvm(&o, &v)).abs().max() < 1e-15);
        assert_eq!(o.scalar(&kl_post_pred(&o, &post0).unwrap()), 0.0);
        assert_eq!(o.scalar(&logdet_ratio(&o, &post0).unwrap()), 0.0);
        assert_eq!(o.scalar(&trace_term(&o, &post0).unwrap()), 2.0);
    }

    #[test]
    fn unit_vector_update_logdet() {
        let o = Eager;
        // Mc = 0, Q = I so P̄ = I
        let prop = DMatrix::from_element(3, 2, 0.7);
        let pred = Arc::new(PredictiveGaussian::from_samples(&o, &prop, unit_q(3)).unwrap());
        let upd = LowRankNatUpdate::new(DMatrix::zeros(3, 1), col(&[1.0, 0.0, 0.0]));
        let post = posterior_update(&o, Base::Predictive(pred), &upd).unwrap();
        let ld = o.scalar(&logdet_ratio(&o, &post).unwrap());
        assert!((ld - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sampling_degenerate_cases() {
        let o = Eager;
        let prop = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let pred = Arc::new(PredictiveGaussian::from_samples(&o, &prop, unit_q(2)).unwrap());
        let noise = DMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.3);
        // no update: m + z̄
        let post = posterior_update(&o, Base::Predictive(pred.clone()), &LowRankNatUpdate::empty()).unwrap();
        let z = post.sample(&o, &noise, &DMatrix::zeros(0, 3)).unwrap();
        let zbar = pred.sample_centered(&o, &noise).unwrap();
        assert_eq!(z, kernels::add_col(&zbar, &post.mean));
        // zero noise: returns the mean
        let upd = LowRankNatUpdate::new(col(&[1.0, -1.0]), col(&[0.5, 0.2]));
        let post = posterior_update(&o, Base::Predictive(pred), &upd).unwrap();
        let z = post.sample(&o, &DMatrix::zeros(4, 3), &DMatrix::zeros(1, 3)).unwrap();
        for c in z.column_iter() {
            assert_eq!(c, post.mean.column(0));
        }
    }
}
