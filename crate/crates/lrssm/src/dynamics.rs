//! Prior dynamics `z_t ~ N(m(z_{t-1}), Q)` with a learnable mean map,
//! diagonal state noise and a diagonal Gaussian initial state.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Backend, Unary};
use crate::error::{Error, Result};
use crate::lowrank::{DiagCov, PredictiveGaussian};
use crate::nn::Mlp;
use crate::params::{BlockId, Bound, Layout, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFnSpec {
    /// `m(z) = A z + b`, initialized to the identity map.
    Linear,
    /// `m(z) = z + MLP(z)` with tanh hidden layers; the output layer starts at
    /// zero so the initial map is the identity.
    ResidualMlp { hidden: Vec<usize> },
    /// Symplectic Euler step of `θ̈ = −κ sin θ` on the first two coordinates
    /// (angle, angular velocity) with learnable `log κ`; other coordinates are
    /// carried unchanged.
    Pendulum { dt: f64 },
}

impl Default for MeanFnSpec {
    fn default() -> Self {
        MeanFnSpec::ResidualMlp { hidden: vec![64] }
    }
}

fn default_q_init() -> f64 {
    0.1
}

fn default_init_var() -> f64 {
    1.0
}

fn default_kappa() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSpec {
    pub latent_dim: usize,
    #[serde(default)]
    pub mean_fn: MeanFnSpec,
    /// Initial value of every diagonal entry of `Q`.
    #[serde(default = "default_q_init")]
    pub q_init: f64,
    /// Initial value of the initial-state variance.
    #[serde(default = "default_init_var")]
    pub init_var: f64,
    /// Initial `κ` for the pendulum map.
    #[serde(default = "default_kappa")]
    pub kappa_init: f64,
}

impl DynamicsSpec {
    pub fn new(latent_dim: usize, mean_fn: MeanFnSpec) -> Self {
        DynamicsSpec {
            latent_dim,
            mean_fn,
            q_init: default_q_init(),
            init_var: default_init_var(),
            kappa_init: default_kappa(),
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Linear { a: BlockId, b: BlockId },
    Residual(Mlp),
    Pendulum { log_kappa: BlockId, dt: f64 },
}

/// Natural parameters of `p(z_t | z_{t-1})` as a function of `z_{t-1}`:
/// `h = Q⁻¹ m(z)`, `J = Q⁻¹`.
#[derive(Debug, Clone)]
pub struct NatParams<M> {
    pub h: M,
    pub precision: M,
}

#[derive(Debug, Clone)]
pub struct Dynamics {
    pub spec: DynamicsSpec,
    kind: Kind,
    pub log_q: BlockId,
    pub init_mean: BlockId,
    pub init_log_var: BlockId,
}

impl Dynamics {
    pub fn new(layout: &mut Layout, spec: DynamicsSpec) -> Result<Self> {
        let l = spec.latent_dim;
        if l == 0 {
            return Err(Error::Invalid("latent dimension must be positive".into()));
        }
        let kind = match &spec.mean_fn {
            MeanFnSpec::Linear => Kind::Linear {
                a: layout.push("dyn.a", l, l),
                b: layout.push("dyn.b", l, 1),
            },
            MeanFnSpec::ResidualMlp { hidden } => {
                let mut sizes = vec![l];
                sizes.extend(hidden.iter().copied());
                sizes.push(l);
                Kind::Residual(Mlp::new(layout, "dyn.mlp", &sizes, Unary::Tanh))
            }
            MeanFnSpec::Pendulum { dt } => {
                if l < 2 {
                    return Err(Error::Invalid("pendulum dynamics need at least 2 latents".into()));
                }
                Kind::Pendulum {
                    log_kappa: layout.push("dyn.log_kappa", 1, 1),
                    dt: *dt,
                }
            }
        };
        Ok(Dynamics {
            kind,
            log_q: layout.push("dyn.log_q", l, 1),
            init_mean: layout.push("init.mean", l, 1),
            init_log_var: layout.push("init.log_var", l, 1),
            spec,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        let l = self.latent_dim();
        match &self.kind {
            Kind::Linear { a, b } => {
                params.set_matrix(*a, &DMatrix::identity(l, l)).expect("shape");
                params.fill(*b, 0.0);
            }
            Kind::Residual(mlp) => mlp.init(params, 0.0, rng),
            Kind::Pendulum { log_kappa, .. } => params.fill(*log_kappa, self.spec.kappa_init.ln()),
        }
        params.fill(self.log_q, self.spec.q_init.ln());
        params.fill(self.init_mean, 0.0);
        params.fill(self.init_log_var, self.spec.init_var.ln());
    }

    /// Applies the mean map to every column of `z`.
    pub fn mean_fn<O: Backend>(&self, o: &O, p: &Bound<O::M>, z: &O::M) -> O::M {
        match &self.kind {
            Kind::Linear { a, b } => o.add_col(&o.matmul(p.get(*a), z), p.get(*b)),
            Kind::Residual(mlp) => o.add(z, &mlp.forward(o, p, z)),
            Kind::Pendulum { log_kappa, dt } => {
                let (l, s) = o.shape(z);
                let theta = o.rows(z, 0, 1);
                let omega = o.rows(z, 1, 1);
                let kappa = o.unary(p.get(*log_kappa), Unary::Exp);
                // κ as a 1×S row for broadcasting
                let kappa_row = o.matmul(&kappa, &o.lift(DMatrix::from_element(1, s, 1.0)));
                let accel = o.hadamard(&kappa_row, &o.unary(&theta, Unary::Sin));
                let omega_next = o.sub(&omega, &o.scale(&accel, *dt));
                let theta_next = o.add(&theta, &o.scale(&omega_next, *dt));
                let mut parts = vec![theta_next, omega_next];
                if l > 2 {
                    parts.push(o.rows(z, 2, l - 2));
                }
                o.vcat(&parts)
            }
        }
    }

    /// Pushes samples through the mean map, checking the result is finite.
    pub fn propagate<O: Backend>(&self, o: &O, p: &Bound<O::M>, samples: &O::M) -> Result<O::M> {
        let (l, s) = o.shape(samples);
        if l != self.latent_dim() {
            return Err(Error::shape("propagate", self.latent_dim(), l));
        }
        if s < 2 {
            return Err(Error::Invalid(format!("propagation needs S >= 2 samples, got {s}")));
        }
        let out = self.mean_fn(o, p, samples);
        if !o.is_finite(&out) {
            return Err(Error::NonFinite { what: "propagated mean" });
        }
        Ok(out)
    }

    pub fn q<O: Backend>(&self, o: &O, p: &Bound<O::M>) -> DiagCov<O::M> {
        DiagCov::from_log_var(o, p.get(self.log_q))
    }

    /// `N(m₁, diag(v₁))` as a predictive with no sample component.
    pub fn prior<O: Backend>(&self, o: &O, p: &Bound<O::M>) -> Result<PredictiveGaussian<O::M>> {
        let var = DiagCov::from_log_var(o, p.get(self.init_log_var));
        PredictiveGaussian::diagonal(o, p.get(self.init_mean).clone(), var)
    }

    pub fn natural_params<O: Backend>(&self, o: &O, p: &Bound<O::M>, z: &O::M) -> NatParams<O::M> {
        let q = self.q(o, p);
        NatParams {
            h: o.mul_rows(&self.mean_fn(o, p, z), &q.inv),
            precision: q.inv,
        }
    }

    /// Expected sufficient statistics `(E z, E[-½ z zᵀ])` of the transition
    /// from a single state. Dense; for diagnostics at small `L`.
    pub fn mean_params(&self, p: &Params, z: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eager = crate::ad::Eager;
        let bound = p.bind(&eager);
        let zm = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        let m = DVector::from_column_slice(self.mean_fn(&eager, &bound, &zm).as_slice());
        let q = p.matrix(self.log_q).map(f64::exp);
        let second = (&m * m.transpose() + DMatrix::from_diagonal(&q.column(0).into_owned())) * -0.5;
        (m, second)
    }

    /// `(A, b)` when the mean map is affine.
    pub fn affine<O: Backend>(&self, p: &Bound<O::M>) -> Option<(O::M, O::M)> {
        match &self.kind {
            Kind::Linear { a, b } => Some((p.get(*a).clone(), p.get(*b).clone())),
            _ => None,
        }
    }

    /// Generative rollout: `z₁ = m₁ + v₁^{1/2} ε₁`, `z_t = m(z_{t-1}) + Q^{1/2} ε_t`.
    /// `step_noise` has one column per transition; the result is `L×T` with
    /// `T = 1 + step_noise.ncols()`.
    pub fn simulate(&self, p: &Params, z1_noise: &DVector<f64>, step_noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = self.latent_dim();
        if z1_noise.len() != l || step_noise.nrows() != l {
            return Err(Error::shape("simulate noise", l, z1_noise.len()));
        }
        let eager = crate::ad::Eager;
        let bound = p.bind(&eager);
        let sd0 = p.matrix(self.init_log_var).map(|v| (0.5 * v).exp());
        let qsd = p.matrix(self.log_q).map(|v| (0.5 * v).exp());
        let t_len = step_noise.ncols() + 1;
        let mut out = DMatrix::zeros(l, t_len);
        let z1 = p.matrix(self.init_mean) + sd0.component_mul(&DMatrix::from_column_slice(l, 1, z1_noise.as_slice()));
        out.set_column(0, &z1.column(0));
        for t in 1..t_len {
            let prev = out.columns(t - 1, 1).into_owned();
            let next = self.mean_fn(&eager, &bound, &prev) + qsd.component_mul(&step_noise.columns(t - 1, 1));
            if !next.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { what: "simulated state" }.at_step(t));
            }
            out.set_column(t, &next.column(0));
        }
        Ok(out)
    }
}
