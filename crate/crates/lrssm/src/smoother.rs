//! Single-pass variational filtering recursions and ELBO assembly.
//!
//! The smoothing pass alternates a predict step (push the previous samples
//! through the mean map and moment-match) with a conjugate update by the
//! encoded pseudo observation `λ̃_t = α_t + β_{t+1}`. The real-time pass
//! keeps a filtering recursion driven by `α_t` alone and adds `β_{t+1}` on
//! top of each filtered marginal to get the smoothed one.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::{Backend, Eager};
use crate::encoders::PseudoObsSeq;
use crate::error::{Error, Result};
use crate::lowrank::{
    cov_diagonal, kl_terms, kl_terms_general, posterior_update, Base, KlTerms, LowRankNatUpdate, PosteriorGaussian,
    PredictiveGaussian,
};
use crate::model::Model;
use crate::params::{Bound, Params};
use crate::sequence::Sequence;

/// How the one-step predictive is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Moment-match the pushed-forward samples.
    #[default]
    Sampled,
    /// Exact moments for affine dynamics: `A m + b`, `A P Aᵀ + Q`.
    /// Forms `L×L` matrices; for testing at small `L`.
    ExactLinear,
}

/// How `E_q[log p(y_t | z_t)]` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoglikMode {
    #[default]
    MonteCarlo,
    /// Exact expectation; Gaussian observations only.
    ClosedForm,
}

/// Standard-normal draws for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// Drives `[Mc Q^{1/2}]`; `(S_pred + L) × S` rows are consumed.
    pub eps: DMatrix<f64>,
    /// Drives the update corrections; `r × S`.
    pub w: DMatrix<f64>,
}

/// All exogenous randomness of one pass, fixed ahead of time.
#[derive(Debug, Clone, PartialEq)]
pub struct PassNoise {
    pub steps: Vec<StepNoise>,
}

impl PassNoise {
    /// `eps_rows` must cover the widest predictive factor plus `L`.
    pub fn draw(rng: &mut impl Rng, t_len: usize, eps_rows: usize, rank: usize, samples: usize) -> Self {
        let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng));
        let steps = (0..t_len)
            .map(|_| StepNoise {
                eps: g(eps_rows, samples),
                w: g(rank, samples),
            })
            .collect();
        PassNoise { steps }
    }

    /// Noise sized for `model` with `samples` draws per step.
    pub fn for_model(rng: &mut impl Rng, model: &Model, t_len: usize, samples: usize, prop: Propagation) -> Self {
        let l = model.latent_dim();
        let width = match prop {
            Propagation::Sampled => samples,
            Propagation::ExactLinear => l.max(samples),
        };
        let rank = model.encoders.rank_local + model.encoders.rank_backward;
        Self::draw(rng, t_len, width + l, rank, samples)
    }

    pub fn samples(&self) -> usize {
        self.steps.first().map_or(0, |s| s.eps.ncols())
    }
}

#[derive(Debug, Clone)]
pub struct SmoothingStep<M> {
    pub pred: Arc<PredictiveGaussian<M>>,
    pub post: Arc<PosteriorGaussian<M>>,
    pub samples: M,
    pub kl: KlTerms<M>,
    pub kl_value: M,
}

#[derive(Debug, Clone)]
pub struct SmoothingPass<M> {
    pub steps: Vec<SmoothingStep<M>>,
}

#[derive(Debug, Clone)]
pub struct RealtimeStep<M> {
    /// One-step predictive from filtered samples.
    pub pred_filter: Arc<PredictiveGaussian<M>>,
    /// One-step predictive from smoothed samples (the KL reference).
    pub pred_smooth: Arc<PredictiveGaussian<M>>,
    pub filtered: Arc<PosteriorGaussian<M>>,
    pub smoothed: Arc<PosteriorGaussian<M>>,
    pub filtered_samples: M,
    pub samples: M,
    pub kl: KlTerms<M>,
    pub kl_value: M,
}

#[derive(Debug, Clone)]
pub struct RealtimePass<M> {
    pub steps: Vec<RealtimeStep<M>>,
}

/// Read-only view shared by both pass types.
pub trait PassView<M> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn posterior(&self, t: usize) -> &PosteriorGaussian<M>;
    fn samples(&self, t: usize) -> &M;
    fn kl_value(&self, t: usize) -> &M;
}

impl<M: Clone> PassView<M> for SmoothingPass<M> {
    fn len(&self) -> usize {
        self.steps.len()
    }
    fn posterior(&self, t: usize) -> &PosteriorGaussian<M> {
        &self.steps[t].post
    }
    fn samples(&self, t: usize) -> &M {
        &self.steps[t].samples
    }
    fn kl_value(&self, t: usize) -> &M {
        &self.steps[t].kl_value
    }
}

impl<M: Clone> PassView<M> for RealtimePass<M> {
    fn len(&self) -> usize {
        self.steps.len()
    }
    fn posterior(&self, t: usize) -> &PosteriorGaussian<M> {
        &self.steps[t].smoothed
    }
    fn samples(&self, t: usize) -> &M {
        &self.steps[t].samples
    }
    fn kl_value(&self, t: usize) -> &M {
        &self.steps[t].kl_value
    }
}

fn check_noise(noise: &PassNoise, t_len: usize) -> Result<()> {
    if noise.steps.len() < t_len {
        return Err(Error::shape("pass noise steps", t_len, noise.steps.len()));
    }
    if noise.samples() < 1 {
        return Err(Error::Invalid("pass noise needs at least one sample".into()));
    }
    Ok(())
}

/// Exact predictive for affine dynamics from a posterior.
fn exact_predict<O: Backend>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    prev: &PosteriorGaussian<O::M>,
) -> Result<PredictiveGaussian<O::M>> {
    let (a, b) = model
        .dynamics
        .affine::<O>(p)
        .ok_or_else(|| Error::Invalid("exact propagation needs linear dynamics".into()))?;
    let l = prev.dim();
    let dense = prev.cov_mvm(o, &o.identity(l))?;
    let sym = o.scale(&o.add(&dense, &o.transpose(&dense)), 0.5);
    let chol = o.cholesky(&sym)?;
    let mean = o.add(&o.matmul(&a, &prev.mean), &b);
    PredictiveGaussian::from_factor(o, mean, o.matmul(&a, &chol), model.dynamics.q(o, p))
}

fn predict<O: Backend>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    prop: Propagation,
    prev_post: &PosteriorGaussian<O::M>,
    prev_samples: &O::M,
) -> Result<PredictiveGaussian<O::M>> {
    match prop {
        Propagation::Sampled => {
            let pushed = model.dynamics.propagate(o, p, prev_samples)?;
            PredictiveGaussian::from_samples(o, &pushed, model.dynamics.q(o, p))
        }
        Propagation::ExactLinear => exact_predict(o, model, p, prev_post),
    }
}

/// The smoothing recursion driven by combined updates `λ̃_t`.
pub fn variational_filter<O: Backend>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    updates: &[LowRankNatUpdate<O::M>],
    noise: &PassNoise,
    prop: Propagation,
) -> Result<SmoothingPass<O::M>> {
    let t_len = updates.len();
    if t_len == 0 {
        return Err(Error::Invalid("a pass needs T >= 1".into()));
    }
    check_noise(noise, t_len)?;
    let mut steps: Vec<SmoothingStep<O::M>> = Vec::with_capacity(t_len);
    for (t, upd) in updates.iter().enumerate() {
        let step = (|| {
            let pred = match steps.last() {
                None => model.dynamics.prior(o, p)?,
                Some(prev) => predict(o, model, p, prop, &prev.post, &prev.samples)?,
            };
            let pred = Arc::new(pred);
            let post = posterior_update(o, Base::Predictive(pred.clone()), upd)?;
            let nz = &noise.steps[t];
            let samples = post.sample(o, &o.lift(nz.eps.clone()), &o.lift(nz.w.clone()))?;
            let kl = kl_terms(o, &post)?;
            let kl_value = kl.total(o)?;
            Ok(SmoothingStep {
                pred,
                post: Arc::new(post),
                samples,
                kl,
                kl_value,
            })
        })()
        .map_err(|e: Error| e.at_step(t))?;
        steps.push(step);
    }
    Ok(SmoothingPass { steps })
}

/// The real-time recursion: `λ̆_t = λ̄_t + α_t` (filtering, predicted from
/// filtered samples) and `λ_t = λ̆_t + β_{t+1}`. The KL at each step is
/// taken against the predictive built from the previous smoothed samples.
pub fn realtime_filter<O: Backend>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    enc: &PseudoObsSeq<O::M>,
    noise: &PassNoise,
    prop: Propagation,
) -> Result<RealtimePass<O::M>> {
    let t_len = enc.len();
    if t_len == 0 {
        return Err(Error::Invalid("a pass needs T >= 1".into()));
    }
    check_noise(noise, t_len)?;
    let ra = model.encoders.rank_local;
    let mut steps: Vec<RealtimeStep<O::M>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let step = (|| {
            let (pred_filter, pred_smooth) = match steps.last() {
                None => {
                    let prior = Arc::new(model.dynamics.prior(o, p)?);
                    (prior.clone(), prior)
                }
                Some(prev) => {
                    let pf = Arc::new(predict(o, model, p, prop, &prev.filtered, &prev.filtered_samples)?);
                    // no backward increment last step: both sample sets coincide
                    let ps = if Arc::ptr_eq(&prev.smoothed, &prev.filtered) {
                        pf.clone()
                    } else {
                        Arc::new(predict(o, model, p, prop, &prev.smoothed, &prev.samples)?)
                    };
                    (pf, ps)
                }
            };
            let filtered = Arc::new(posterior_update(
                o,
                Base::Predictive(pred_filter.clone()),
                &enc.filter_update(t),
            )?);
            let back = enc.backward_update(t);
            let nz = &noise.steps[t];
            let w = o.lift(nz.w.clone());
            let base = pred_filter.sample_centered(o, &o.lift(nz.eps.clone()))?;
            let filt_c = filtered.correct(o, &base, &o.rows(&w, 0, ra.min(nz.w.nrows())))?;
            let filtered_samples = o.add_col(&filt_c, &filtered.mean);
            let (smoothed, samples, kl) = if back.is_empty() && Arc::ptr_eq(&pred_smooth, &pred_filter) {
                // the smoothed marginal is the filtered one, built directly on the reference
                (filtered.clone(), filtered_samples.clone(), kl_terms(o, &filtered)?)
            } else {
                let smoothed = posterior_update(o, Base::Posterior(filtered.clone()), &back)?;
                let rb = nz.w.nrows().saturating_sub(ra);
                let smooth_c = smoothed.correct(o, &filt_c, &o.rows(&w, ra.min(nz.w.nrows()), rb))?;
                let samples = o.add_col(&smooth_c, &smoothed.mean);
                let kl = kl_terms_general(o, &smoothed, &pred_smooth)?;
                (Arc::new(smoothed), samples, kl)
            };
            let kl_value = kl.total(o)?;
            Ok(RealtimeStep {
                pred_filter,
                pred_smooth,
                filtered,
                smoothed,
                filtered_samples,
                samples,
                kl,
                kl_value,
            })
        })()
        .map_err(|e: Error| e.at_step(t))?;
        steps.push(step);
    }
    Ok(RealtimePass { steps })
}

/// `(log-det ratio, trace, mean term)` of one real-time step's KL.
pub fn realtime_kl_terms<M: Clone>(step: &RealtimeStep<M>) -> (&M, &M, &M) {
    (&step.kl.logdet, &step.kl.trace, &step.kl.mean)
}

/// ELBO with its decomposition.
#[derive(Debug, Clone)]
pub struct Elbo<M> {
    pub total: M,
    pub loglik: M,
    pub kl: M,
}

/// `Σ_t E_q[log p(y_t | z_t)] − KL(q_t ‖ q̄_t)`.
pub fn elbo<O: Backend, P: PassView<O::M>>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    pass: &P,
    seq: &Sequence,
    mode: LoglikMode,
) -> Result<Elbo<O::M>> {
    if pass.len() != seq.len() {
        return Err(Error::shape("elbo steps", seq.len(), pass.len()));
    }
    let loglik = match mode {
        LoglikMode::MonteCarlo => {
            let samples: Vec<O::M> = (0..pass.len()).map(|t| pass.samples(t).clone()).collect();
            model.obs.sequence_expected_loglik(o, p, seq, &samples)?
        }
        LoglikMode::ClosedForm => {
            let ct = readout_embedding(o, model, p);
            let mut acc = o.zeros(1, 1);
            for t in 0..pass.len() {
                let post = pass.posterior(t);
                let pc = post.cov_mvm(o, &ct)?;
                let ll = model.obs.gaussian_expected_closed_form(o, p, seq, t, &post.mean, &pc)?;
                acc = o.add(&acc, &ll);
            }
            acc
        }
    };
    let kls: Vec<O::M> = (0..pass.len()).map(|t| pass.kl_value(t).clone()).collect();
    let kl = o.sum(&o.vcat(&kls));
    Ok(Elbo {
        total: o.sub(&loglik, &kl),
        loglik,
        kl,
    })
}

/// `[Cᵀ; 0]`, the readout lifted to all `L` latents.
fn readout_embedding<O: Backend>(o: &O, model: &Model, p: &Bound<O::M>) -> O::M {
    let ct = o.transpose(p.get(model.obs.c));
    let extra = model.latent_dim() - model.obs.read_dim;
    if extra == 0 {
        ct
    } else {
        o.vcat(&[ct, o.zeros(extra, model.obs.obs_dim)])
    }
}

/// Per-step ELBO pieces evaluated on plain values.
pub fn step_terms<P: PassView<DMatrix<f64>>>(
    model: &Model,
    params: &Params,
    pass: &P,
    seq: &Sequence,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let bound = params.bind(&Eager);
    let mut ll = Vec::with_capacity(pass.len());
    let mut kl = Vec::with_capacity(pass.len());
    for t in 0..pass.len() {
        ll.push(model.obs.expected_loglik(&Eager, &bound, seq, t, pass.samples(t))?[(0, 0)]);
        kl.push(pass.kl_value(t)[(0, 0)]);
    }
    Ok((ll, kl))
}

/// Per-step summary for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T` rows of `L` means.
    pub means: Vec<Vec<f64>>,
    /// `T` rows of `L` marginal variances.
    pub variances: Vec<Vec<f64>>,
    pub loglik: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Latent sizes up to this use exact marginal variances; above it the
/// sample variance is reported.
pub const EXACT_VARIANCE_MAX_DIM: usize = 64;

pub fn trajectory<P: PassView<DMatrix<f64>>>(
    model: &Model,
    params: &Params,
    pass: &P,
    seq: &Sequence,
) -> Result<Trajectory> {
    let (loglik, kl) = step_terms(model, params, pass, seq)?;
    let mut means = Vec::with_capacity(pass.len());
    let mut variances = Vec::with_capacity(pass.len());
    for t in 0..pass.len() {
        let post = pass.posterior(t);
        means.push(post.mean.as_slice().to_vec());
        let var = if post.dim() <= EXACT_VARIANCE_MAX_DIM {
            cov_diagonal(&Eager, post)
        } else {
            sample_variance(pass.samples(t))
        };
        variances.push(var);
    }
    Ok(Trajectory {
        means,
        variances,
        loglik,
        kl,
    })
}

fn sample_variance(z: &DMatrix<f64>) -> Vec<f64> {
    let s = z.ncols();
    if s < 2 {
        return vec![0.0; z.nrows()];
    }
    z.row_iter()
        .map(|r| {
            let m = r.mean();
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s - 1) as f64
        })
        .collect()
}

/// Sample rollouts pushed forward from a set of starting draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `samples[h]` are the draws `h` steps ahead (`h = 0` is the start).
    pub samples: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
    pub spread: Vec<DVector<f64>>,
}

/// Rolls `start` (`L×S`) through `z' = m(z) + Q^{1/2} ε` for `noise.len()`
/// steps.
pub fn forecast(model: &Model, params: &Params, start: &DMatrix<f64>, noise: &[DMatrix<f64>]) -> Result<Forecast> {
    let bound = params.bind(&Eager);
    let qsd = params.matrix(model.dynamics.log_q).map(|v| (0.5 * v).exp());
    let mut samples = vec![start.clone()];
    for (h, eps) in noise.iter().enumerate() {
        if eps.shape() != start.shape() {
            return Err(Error::shape("forecast noise", format!("{:?}", start.shape()), format!("{:?}", eps.shape())));
        }
        let prev = samples.last().expect("nonempty");
        let next = model.dynamics.mean_fn(&Eager, &bound, prev) + crate::ad::kernels::mul_rows(eps, &qsd);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "forecast" }.at_step(h + 1));
        }
        samples.push(next);
    }
    let means = samples.iter().map(|z| z.column_mean()).collect();
    let spread = samples
        .iter()
        .map(|z| DVector::from_vec(sample_variance(z).into_iter().map(f64::sqrt).collect()))
        .collect();
    Ok(Forecast { samples, means, spread })
}
