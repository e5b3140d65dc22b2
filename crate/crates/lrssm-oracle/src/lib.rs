//! Dense reference implementations.
//!
//! Everything here is written in the most direct O(L³) form: textbook Kalman
//! filtering, RTS smoothing, joint-Gaussian conditioning and dense Gaussian
//! KL divergences. These exist to check the structured routines in `lrssm`
//! and to serve as the dense baseline in scaling benchmarks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn chol(a: &DMatrix<f64>, what: &'static str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let sym = (a + a.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym).ok_or(OracleError::NotPositiveDefinite(what))
}

/// `log |A|` for symmetric positive definite `A`.
pub fn logdet(a: &DMatrix<f64>) -> Result<f64> {
    let c = chol(a, "logdet")?;
    Ok(2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(chol(a, "inverse")?.inverse())
}

/// Log density of `N(x | m, P)`.
pub fn gaussian_logpdf(x: &DVector<f64>, m: &DVector<f64>, p: &DMatrix<f64>) -> Result<f64> {
    let c = chol(p, "gaussian_logpdf")?;
    let d = x - m;
    let sol = c.solve(&d);
    let n = x.len() as f64;
    let ld = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n * (2.0 * PI).ln() + ld + d.dot(&sol)))
}

/// `KL(N(m1, P1) ‖ N(m2, P2))`.
pub fn dense_kl(
    m1: &DVector<f64>,
    p1: &DMatrix<f64>,
    m2: &DVector<f64>,
    p2: &DMatrix<f64>,
) -> Result<f64> {
    let n = m1.len() as f64;
    let c2 = chol(p2, "dense_kl P2")?;
    let d = m2 - m1;
    let maha = d.dot(&c2.solve(&d));
    let tr = c2.solve(p1).trace();
    Ok(0.5 * (maha + tr + logdet(p2)? - logdet(p1)? - n))
}

/// Linear-Gaussian state-space model
/// `z₁ ~ N(m1, p1)`, `z_t = A z_{t-1} + b + N(0, Q)`, `y_t = C z_t + d + N(0, R)`.
#[derive(Debug, Clone)]
pub struct Lgssm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub r: DMatrix<f64>,
    pub m1: DVector<f64>,
    pub p1: DMatrix<f64>,
}

impl Lgssm {
    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }
}

/// Output of [`kalman_filter`]: per-step predictive and filtered moments.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub pred_means: Vec<DVector<f64>>,
    pub pred_covs: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `log p(y_t | y_{1:t-1})` per step.
    pub step_loglik: Vec<f64>,
    pub loglik: f64,
}

/// Textbook Kalman filter; `None` observations are skipped (missing data).
pub fn kalman_filter(ssm: &Lgssm, ys: &[Option<DVector<f64>>]) -> Result<FilterOutput> {
    let mut out = FilterOutput {
        pred_means: vec![],
        pred_covs: vec![],
        means: vec![],
        covs: vec![],
        step_loglik: vec![],
        loglik: 0.0,
    };
    let mut m = ssm.m1.clone();
    let mut p = ssm.p1.clone();
    for (t, y) in ys.iter().enumerate() {
        if t > 0 {
            m = &ssm.a * &m + &ssm.b;
            p = &ssm.a * &p * ssm.a.transpose() + &ssm.q;
        }
        out.pred_means.push(m.clone());
        out.pred_covs.push(p.clone());
        let mut ll = 0.0;
        if let Some(y) = y {
            if y.len() != ssm.obs_dim() {
                return Err(OracleError::Shape(format!("y_{t} has length {}", y.len())));
            }
            let s = &ssm.c * &p * ssm.c.transpose() + &ssm.r;
            let yhat = &ssm.c * &m + &ssm.d;
            ll = gaussian_logpdf(y, &yhat, &s)?;
            let sc = chol(&s, "innovation covariance")?;
            let pct = &p * ssm.c.transpose();
            let gain = sc.solve(&pct.transpose()).transpose();
            m = &m + &gain * (y - yhat);
            p = &p - &gain * pct.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        out.step_loglik.push(ll);
        out.loglik += ll;
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

/// Filtering on natural-parameter pseudo observations: at each step the
/// predictive precision and precision-scaled mean receive `K Kᵀ` and `k`.
pub fn information_filter(
    ssm: &Lgssm,
    updates: &[(DVector<f64>, DMatrix<f64>)],
) -> Result<FilterOutput> {
    let mut out = FilterOutput {
        pred_means: vec![],
        pred_covs: vec![],
        means: vec![],
        covs: vec![],
        step_loglik: vec![],
        loglik: 0.0,
    };
    let mut m = ssm.m1.clone();
    let mut p = ssm.p1.clone();
    for (t, (k, kk)) in updates.iter().enumerate() {
        if t > 0 {
            m = &ssm.a * &m + &ssm.b;
            p = &ssm.a * &p * ssm.a.transpose() + &ssm.q;
        }
        out.pred_means.push(m.clone());
        out.pred_covs.push(p.clone());
        let jbar = spd_inverse(&p)?;
        let h = &jbar * &m + k;
        let j = jbar + kk * kk.transpose();
        p = spd_inverse(&j)?;
        m = &p * h;
        out.step_loglik.push(0.0);
        out.means.push(m.clone());
        out.covs.push(p.clone());
    }
    Ok(out)
}

/// Rauch–Tung–Striebel backward pass over a [`kalman_filter`] result.
pub fn rts_smoother(
    ssm: &Lgssm,
    filt: &FilterOutput,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let t_len = filt.means.len();
    let mut ms = filt.means.clone();
    let mut ps = filt.covs.clone();
    for t in (0..t_len.saturating_sub(1)).rev() {
        let pp = &filt.pred_covs[t + 1];
        let cp = chol(pp, "smoother predictive covariance")?;
        // G = P_t Aᵀ P̄_{t+1}⁻¹
        let g = cp.solve(&(&ssm.a * &filt.covs[t])).transpose();
        ms[t] = &filt.means[t] + &g * (&ms[t + 1] - &filt.pred_means[t + 1]);
        let p = &filt.covs[t] + &g * (&ps[t + 1] - pp) * g.transpose();
        ps[t] = (&p + p.transpose()) * 0.5;
    }
    Ok((ms, ps))
}

/// Joint Gaussian over `(z_{1:T}, y_{1:T})` of a linear-Gaussian model,
/// stacked as `[z_1 .. z_T, y_1 .. y_T]`.
pub fn joint_gaussian(ssm: &Lgssm, t_len: usize) -> (DVector<f64>, DMatrix<f64>) {
    let l = ssm.latent_dim();
    let n = ssm.obs_dim();
    let dim = t_len * (l + n);
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    // latent means and covariances: Cov(z_s, z_t) = A^{t-s} P_s for t ≥ s
    let mut means = vec![ssm.m1.clone()];
    let mut covs = vec![ssm.p1.clone()];
    for t in 1..t_len {
        means.push(&ssm.a * &means[t - 1] + &ssm.b);
        covs.push(&ssm.a * &covs[t - 1] * ssm.a.transpose() + &ssm.q);
    }
    for s in 0..t_len {
        mean.rows_mut(s * l, l).copy_from(&means[s]);
        let mut cross = covs[s].clone();
        for t in s..t_len {
            if t > s {
                cross = &ssm.a * &cross;
            }
            cov.view_mut((t * l, s * l), (l, l)).copy_from(&cross);
            cov.view_mut((s * l, t * l), (l, l)).copy_from(&cross.transpose());
        }
    }
    let zdim = t_len * l;
    // y_t = C z_t + d + e_t
    let mut big_c = DMatrix::zeros(t_len * n, zdim);
    for t in 0..t_len {
        big_c.view_mut((t * n, t * l), (n, l)).copy_from(&ssm.c);
        mean.rows_mut(zdim + t * n, n)
            .copy_from(&(&ssm.c * &means[t] + &ssm.d));
    }
    let czz = cov.view((0, 0), (zdim, zdim)).into_owned();
    let zy = &czz * big_c.transpose();
    let mut yy = &big_c * &zy;
    for t in 0..t_len {
        let mut blk = yy.view_mut((t * n, t * n), (n, n));
        blk += &ssm.r;
    }
    cov.view_mut((0, zdim), (zdim, t_len * n)).copy_from(&zy);
    cov.view_mut((zdim, 0), (t_len * n, zdim)).copy_from(&zy.transpose());
    cov.view_mut((zdim, zdim), (t_len * n, t_len * n)).copy_from(&yy);
    (mean, cov)
}

/// Conditions a joint Gaussian on the entries listed in `observed`
/// taking values `values`; returns the conditional over the remaining
/// entries listed in `target`.
pub fn condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    target: &[usize],
    observed: &[usize],
    values: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| cov[(rows[i], cols[j])])
    };
    let mt = DVector::from_iterator(target.len(), target.iter().map(|&i| mean[i]));
    let mo = DVector::from_iterator(observed.len(), observed.iter().map(|&i| mean[i]));
    if observed.is_empty() {
        return Ok((mt, pick(target, target)));
    }
    let soo = chol(&pick(observed, observed), "conditioning block")?;
    let sto = pick(target, observed);
    let m = &mt + &sto * soo.solve(&(values - mo));
    let p = pick(target, target) - &sto * soo.solve(&sto.transpose());
    Ok((m, (&p + p.transpose()) * 0.5))
}

/// Stationary covariance of `z ← A z + N(0, Q)` by fixed-point iteration.
pub fn lyapunov_stationary(a: &DMatrix<f64>, q: &DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..iters {
        p = a * &p * a.transpose() + q;
    }
    p
}

/// One dense step of the sample-based variational filter, the O(L³)
/// counterpart of the structured update: moment-match the propagated
/// samples, add the low-rank natural-parameter update, sample, and
/// evaluate the KL to the predictive.
pub struct DenseStep {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub samples: DMatrix<f64>,
    pub kl: f64,
}

pub fn dense_filter_step(
    propagated: &DMatrix<f64>,
    q_diag: &DVector<f64>,
    k: &DVector<f64>,
    kmat: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> Result<DenseStep> {
    let l = propagated.nrows();
    let s = propagated.ncols() as f64;
    let mbar = propagated.column_mean();
    let centered = DMatrix::from_fn(l, propagated.ncols(), |i, j| {
        (propagated[(i, j)] - mbar[i]) / s.sqrt()
    });
    let mut pbar = &centered * centered.transpose();
    for i in 0..l {
        pbar[(i, i)] += q_diag[i];
    }
    let cbar = chol(&pbar, "dense predictive")?;
    let jbar = cbar.inverse();
    let h = &jbar * &mbar + k;
    let j = &jbar + kmat * kmat.transpose();
    let cj = chol(&j, "dense posterior precision")?;
    let mean = cj.solve(&h);
    let cov = cj.inverse();
    let cp = chol(&cov, "dense posterior")?;
    let samples = {
        let mut z = cp.l() * noise;
        for mut col in z.column_iter_mut() {
            col += &mean;
        }
        z
    };
    let d = &mbar - &mean;
    let ld_bar = 2.0 * cbar.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ld = 2.0 * cp.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = jbar.component_mul(&cov).sum();
    let kl = 0.5 * (d.dot(&(&jbar * &d)) + tr + ld_bar - ld - l as f64);
    Ok(DenseStep {
        mean,
        cov,
        samples,
        kl,
    })
}
