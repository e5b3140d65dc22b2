//! Observation models `p(y_t | z_t)` that read the first `read_dim` latents.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ad::{Backend, Unary};
use crate::error::{Error, Result};
use crate::params::{BlockId, Bound, Layout, Params};
use crate::sequence::Sequence;

/// Bounds applied to Poisson log-rates before exponentiation.
pub const LOG_RATE_CLAMP: (f64, f64) = (-30.0, 30.0);

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn default_r_init() -> f64 {
    1.0
}

/// `log y!`, exactly zero for `y < 2`.
pub fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        0.0
    } else {
        ln_gamma(y + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsSpec {
    /// `y = C z[..read] + d + ε`, `ε ~ N(0, diag(R))`.
    Gaussian {
        #[serde(default)]
        read_dim: Option<usize>,
        #[serde(default = "default_r_init")]
        r_init: f64,
    },
    /// `y ~ Poisson(exp(C z[..read] + b))`.
    Poisson {
        #[serde(default)]
        read_dim: Option<usize>,
    },
}

impl Default for ObsSpec {
    fn default() -> Self {
        ObsSpec::Gaussian {
            read_dim: None,
            r_init: default_r_init(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObsModel {
    pub spec: ObsSpec,
    pub obs_dim: usize,
    pub read_dim: usize,
    pub c: BlockId,
    pub bias: BlockId,
    pub log_r: Option<BlockId>,
}

impl ObsModel {
    pub fn new(layout: &mut Layout, spec: ObsSpec, latent_dim: usize, obs_dim: usize) -> Result<Self> {
        let read = match &spec {
            ObsSpec::Gaussian { read_dim, .. } | ObsSpec::Poisson { read_dim } => read_dim.unwrap_or(latent_dim),
        };
        if read == 0 || read > latent_dim {
            return Err(Error::Invalid(format!("read dimension {read} must be in 1..={latent_dim}")));
        }
        let c = layout.push("obs.c", obs_dim, read);
        let bias = layout.push("obs.bias", obs_dim, 1);
        let log_r = matches!(spec, ObsSpec::Gaussian { .. }).then(|| layout.push("obs.log_r", obs_dim, 1));
        Ok(ObsModel {
            spec,
            obs_dim,
            read_dim: read,
            c,
            bias,
            log_r,
        })
    }

    pub fn is_poisson(&self) -> bool {
        matches!(self.spec, ObsSpec::Poisson { .. })
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        params.init_scaled_normal(self.c, 1.0, rng);
        params.fill(self.bias, 0.0);
        if let (Some(lr), ObsSpec::Gaussian { r_init, .. }) = (self.log_r, &self.spec) {
            params.fill(lr, r_init.ln());
        }
    }

    /// Sets the bias to the per-dimension data mean (log mean rate for counts).
    pub fn init_bias_from_data(&self, params: &mut Params, data: &[Sequence]) {
        let mut sum = vec![0.0; self.obs_dim];
        let mut count = vec![0.0; self.obs_dim];
        for s in data {
            for t in 0..s.len() {
                for n in 0..self.obs_dim {
                    if s.observed[(n, t)] {
                        sum[n] += s.y[(n, t)];
                        count[n] += 1.0;
                    }
                }
            }
        }
        let b = params.slice_mut(self.bias);
        for n in 0..b.len() {
            if count[n] > 0.0 {
                let mean = sum[n] / count[n];
                b[n] = if self.is_poisson() { mean.max(1e-3).ln() } else { mean };
            }
        }
    }

    /// Checks observed entries are valid for this model.
    pub fn validate(&self, seq: &Sequence) -> Result<()> {
        if seq.obs_dim() != self.obs_dim {
            return Err(Error::shape("observation dimension", self.obs_dim, seq.obs_dim()));
        }
        if self.is_poisson() {
            for (y, o) in seq.y.iter().zip(seq.observed.iter()) {
                if *o && (*y < 0.0 || y.fract() != 0.0) {
                    return Err(Error::Domain(*y));
                }
            }
        }
        Ok(())
    }

    /// Natural parameter `η = C z[..read] + bias` for every column of `z`.
    pub fn predictor<O: Backend>(&self, o: &O, p: &Bound<O::M>, z: &O::M) -> O::M {
        let zr = o.rows(z, 0, self.read_dim);
        o.add_col(&o.matmul(p.get(self.c), &zr), p.get(self.bias))
    }

    /// Elementwise log density for observations `y` (`N×B`) against the
    /// matching columns of `z`, weighted by `weight` (`N×B`) and summed.
    fn weighted_loglik<O: Backend>(&self, o: &O, p: &Bound<O::M>, y: &DMatrix<f64>, weight: &DMatrix<f64>, z: &O::M) -> O::M {
        let eta = self.predictor(o, p, z);
        let w = o.lift(weight.clone());
        match self.log_r {
            Some(lr) => {
                let log_r = p.get(lr);
                let inv_r = o.unary(&o.neg(log_r), Unary::Exp);
                let resid = o.sub(&o.lift(y.clone()), &eta);
                let quad = o.mul_rows(&o.unary(&resid, Unary::Square), &inv_r);
                // per-entry: -½ (quad + ln 2π + ln r)
                let cnt = o.lift(DMatrix::from_column_slice(weight.nrows(), 1, weight.column_sum().as_slice()));
                let norm = o.sum(&o.hadamard(&cnt, &o.add(log_r, &o.lift(DMatrix::from_element(self.obs_dim, 1, LN_2PI)))));
                o.scale(&o.add(&o.sum(&o.hadamard(&quad, &w)), &norm), -0.5)
            }
            None => {
                let (lo, hi) = LOG_RATE_CLAMP;
                let clamped = o.with_value(&eta, |e| e.iter().any(|v| *v < lo || *v > hi));
                if clamped {
                    log::debug!("poisson log-rate clamped to [{lo}, {hi}]");
                }
                let eta = o.clamp(&eta, lo, hi);
                let yw = y.component_mul(weight);
                let lg: f64 = y.iter().zip(weight.iter()).map(|(v, w)| w * ln_factorial(*v)).sum();
                let term = o.sub(&o.hadamard(&o.lift(yw), &eta), &o.hadamard(&o.unary(&eta, Unary::Exp), &w));
                o.add(&o.sum(&term), &o.lift(DMatrix::from_element(1, 1, -lg)))
            }
        }
    }

    /// `log p(y | z)` for a single latent state; only observed entries count.
    pub fn loglik<O: Backend>(&self, o: &O, p: &Bound<O::M>, seq: &Sequence, t: usize, z: &O::M) -> Result<O::M> {
        self.expected_loglik(o, p, seq, t, z)
    }

    /// `S⁻¹ Σ_s log p(y_t | z^s)` over the columns of `samples`.
    pub fn expected_loglik<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        seq: &Sequence,
        t: usize,
        samples: &O::M,
    ) -> Result<O::M> {
        let s = o.shape(samples).1;
        if s == 0 {
            return Err(Error::Invalid("expected log-likelihood needs at least one sample".into()));
        }
        if !seq.step_observed(t) {
            return Ok(o.zeros(1, 1));
        }
        let y = DMatrix::from_fn(self.obs_dim, s, |n, _| seq.y[(n, t)]);
        let w = DMatrix::from_fn(self.obs_dim, s, |n, _| if seq.observed[(n, t)] { 1.0 } else { 0.0 });
        Ok(o.scale(&self.weighted_loglik(o, p, &y, &w, samples), 1.0 / s as f64))
    }

    /// `Σ_t S⁻¹ Σ_s log p(y_t | z_t^s)` evaluated in one batch. `samples[t]`
    /// holds the `S` draws for step `t`.
    pub fn sequence_expected_loglik<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        seq: &Sequence,
        samples: &[O::M],
    ) -> Result<O::M> {
        if samples.len() != seq.len() {
            return Err(Error::shape("sample steps", seq.len(), samples.len()));
        }
        let steps: Vec<usize> = (0..seq.len()).filter(|t| seq.step_observed(*t)).collect();
        if steps.is_empty() {
            return Ok(o.zeros(1, 1));
        }
        let s = o.shape(&samples[0]).1;
        if s == 0 || samples.iter().any(|m| o.shape(m).1 != s) {
            return Err(Error::Invalid("every step needs the same positive sample count".into()));
        }
        let b = steps.len() * s;
        let mut y = DMatrix::zeros(self.obs_dim, b);
        let mut w = DMatrix::zeros(self.obs_dim, b);
        for (i, t) in steps.iter().enumerate() {
            for j in 0..s {
                for n in 0..self.obs_dim {
                    y[(n, i * s + j)] = seq.y[(n, *t)];
                    w[(n, i * s + j)] = if seq.observed[(n, *t)] { 1.0 } else { 0.0 };
                }
            }
        }
        let z = o.hcat(&steps.iter().map(|t| samples[*t].clone()).collect::<Vec<_>>());
        Ok(o.scale(&self.weighted_loglik(o, p, &y, &w, &z), 1.0 / s as f64))
    }

    /// Closed-form `E_q[log N(y_t | C z + d, R)]` for `q = N(m, P)`, given
    /// `pc = P [Cᵀ; 0]` (`L×N`). Gaussian observations only.
    pub fn gaussian_expected_closed_form<O: Backend>(
        &self,
        o: &O,
        p: &Bound<O::M>,
        seq: &Sequence,
        t: usize,
        mean: &O::M,
        pc: &O::M,
    ) -> Result<O::M> {
        let Some(lr) = self.log_r else {
            return Err(Error::Invalid("closed-form expectation needs Gaussian observations".into()));
        };
        if !seq.step_observed(t) {
            return Ok(o.zeros(1, 1));
        }
        let y = DMatrix::from_fn(self.obs_dim, 1, |n, _| seq.y[(n, t)]);
        let w = DMatrix::from_fn(self.obs_dim, 1, |n, _| if seq.observed[(n, t)] { 1.0 } else { 0.0 });
        let at_mean = self.weighted_loglik(o, p, &y, &w, mean);
        // diag(C P Cᵀ) as a column
        let c = p.get(self.c);
        let pc_read = o.rows(pc, 0, self.read_dim);
        let var = o.transpose(&o.col_sums(&o.hadamard(&o.transpose(c), &pc_read)));
        let inv_r = o.unary(&o.neg(p.get(lr)), Unary::Exp);
        let spread = o.sum(&o.hadamard(&o.hadamard(&var, &inv_r), &o.lift(w)));
        Ok(o.sub(&at_mean, &o.scale(&spread, 0.5)))
    }

    /// Predictive mean of `y` per step, averaging over samples: `E[C z + d]`
    /// or `E[exp(C z + b)]`.
    pub fn predictive_mean(&self, p: &Params, samples: &DMatrix<f64>) -> DMatrix<f64> {
        let eager = crate::ad::Eager;
        let bound = p.bind(&eager);
        let eta = self.predictor(&eager, &bound, samples);
        let (lo, hi) = LOG_RATE_CLAMP;
        let vals = if self.is_poisson() { eta.map(|v| v.clamp(lo, hi).exp()) } else { eta };
        crate::ad::kernels::row_mean(&vals)
    }
}
