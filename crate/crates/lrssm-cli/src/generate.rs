//! Synthetic dataset generators.

use std::collections::BTreeMap;

use lrssm::dynamics::MeanFnSpec;
use lrssm::likelihoods::{ObsSpec, LOG_RATE_CLAMP};
use lrssm::model::{Model, ModelSpec};
use lrssm::params::Params;
use lrssm::sequence::Sequence;
use lrssm::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceDataset, Truth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorSpec {
    Lgssm(LgssmGen),
    Pendulum(PendulumGen),
    VanderpolPoisson(VanDerPolGen),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LgssmGen {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub t_len: usize,
    pub n_seq: usize,
    pub spectral_radius: f64,
    pub q_var: f64,
    pub r_var: f64,
    pub init_var: f64,
}

impl Default for LgssmGen {
    fn default() -> Self {
        LgssmGen {
            latent_dim: 4,
            obs_dim: 6,
            t_len: 100,
            n_seq: 20,
            spectral_radius: 0.95,
            q_var: 0.1,
            r_var: 0.1,
            init_var: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Gaussian,
    Poisson,
}

/// Pendulum `θ̈ = −(g/ℓ) sin θ`, state `(θ, θ̇)`, read out linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PendulumGen {
    pub obs_dim: usize,
    pub t_len: usize,
    pub n_seq: usize,
    pub dt: f64,
    /// `g/ℓ`.
    pub g_over_l: f64,
    pub process_var: f64,
    pub obs_var: f64,
    pub readout: Readout,
    /// Log-rate offset for the Poisson readout.
    pub base_log_rate: f64,
    pub init_angle: f64,
    pub init_angle_var: f64,
    pub init_velocity_var: f64,
    /// Initial states are redrawn until their energy is below this fraction
    /// of the separatrix, so every sequence swings rather than rotates.
    /// `None` keeps every draw.
    pub max_energy_fraction: Option<f64>,
}

impl Default for PendulumGen {
    fn default() -> Self {
        PendulumGen {
            obs_dim: 10,
            t_len: 200,
            n_seq: 200,
            dt: 0.1,
            g_over_l: 4.0,
            process_var: 1e-4,
            obs_var: 0.01,
            readout: Readout::Gaussian,
            base_log_rate: 0.0,
            init_angle: 0.0,
            init_angle_var: 1.0,
            init_velocity_var: 1.0,
            max_energy_fraction: Some(0.8),
        }
    }
}

/// Van der Pol oscillator `ẍ − μ(1 − x²)ẋ + x = 0` driving log-linear
/// Poisson counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VanDerPolGen {
    pub obs_dim: usize,
    pub t_len: usize,
    pub n_seq: usize,
    pub dt: f64,
    pub mu: f64,
    /// Euler sub-steps per observation bin.
    pub substeps: usize,
    pub process_var: f64,
    pub base_log_rate: f64,
    /// Standard deviation of readout weights per unit of latent amplitude.
    pub gain: f64,
    pub burn_in: usize,
}

impl Default for VanDerPolGen {
    fn default() -> Self {
        VanDerPolGen {
            obs_dim: 30,
            t_len: 100,
            n_seq: 100,
            dt: 0.1,
            mu: 1.5,
            substeps: 10,
            process_var: 1e-3,
            base_log_rate: -0.5,
            gain: 0.5,
            burn_in: 50,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("generator: {m}")));
        let (n, t, s) = match self {
            GeneratorSpec::Lgssm(g) => {
                if g.latent_dim == 0 || !(g.spectral_radius > 0.0) || !(g.q_var > 0.0 && g.r_var > 0.0 && g.init_var > 0.0) {
                    return bad("lgssm needs positive dimensions, radius and variances");
                }
                (g.obs_dim, g.t_len, g.n_seq)
            }
            GeneratorSpec::Pendulum(g) => {
                if !(g.dt > 0.0 && g.g_over_l > 0.0 && g.process_var > 0.0 && g.init_angle_var > 0.0 && g.init_velocity_var > 0.0) {
                    return bad("pendulum needs positive dt, g/l and variances");
                }
                if g.max_energy_fraction.is_some_and(|f| !(f > 0.0)) {
                    return bad("pendulum max_energy_fraction must be positive");
                }
                if g.readout == Readout::Gaussian && !(g.obs_var > 0.0) {
                    return bad("pendulum Gaussian readout needs obs_var > 0");
                }
                (g.obs_dim, g.t_len, g.n_seq)
            }
            GeneratorSpec::VanderpolPoisson(g) => {
                if !(g.dt > 0.0 && g.mu >= 0.0 && g.process_var >= 0.0) || g.substeps == 0 {
                    return bad("van der pol needs positive dt and substeps, nonnegative mu and noise");
                }
                (g.obs_dim, g.t_len, g.n_seq)
            }
        };
        if n == 0 || t == 0 || s == 0 {
            return bad("obs_dim, t_len and n_seq must be positive");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            GeneratorSpec::Lgssm(g) => g.obs_dim,
            GeneratorSpec::Pendulum(g) => g.obs_dim,
            GeneratorSpec::VanderpolPoisson(g) => g.obs_dim,
        }
    }
}

fn randn(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

/// A stable matrix with the given spectral radius.
pub fn random_stable(rng: &mut impl Rng, l: usize, radius: f64) -> DMatrix<f64> {
    let raw = randn(rng, l, l);
    let rho = raw.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
    if rho == 0.0 {
        return DMatrix::zeros(l, l);
    }
    raw * (radius / rho)
}

/// Overwrites every generative block of `params` named in `truth`.
pub fn apply_truth(model: &Model, params: &mut Params, truth: &Truth) -> Result<()> {
    model.check_params(params)?;
    for (name, m) in &truth.blocks {
        if let Some(id) = params.layout.find(name) {
            params.set_matrix(id, m)?;
        }
    }
    Ok(())
}

/// Model whose generative part matches `truth`, with the given inference
/// networks, initialized at the true parameters.
pub fn oracle_model(spec: &ModelSpec, truth: &Truth, seed: u64) -> Result<(Model, Params)> {
    let mut spec = spec.clone();
    spec.mean_fn = truth
        .mean_fn
        .clone()
        .ok_or_else(|| Error::Invalid("the generating dynamics have no in-family counterpart".into()))?;
    spec.obs = truth.obs.clone();
    let model = Model::new(spec)?;
    let mut p = model.init_params(seed);
    apply_truth(&model, &mut p, truth)?;
    Ok((model, p))
}

fn observe(rng: &mut impl Rng, obs: &ObsSpec, blocks: &BTreeMap<String, DMatrix<f64>>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = &blocks["obs.c"];
    let d = &blocks["obs.bias"];
    let read = z.rows(0, c.ncols());
    let mut eta = c * read;
    for mut colm in eta.column_iter_mut() {
        colm += d.column(0);
    }
    match obs {
        ObsSpec::Gaussian { .. } => {
            let sd = blocks["obs.log_r"].map(|v| (0.5 * v).exp());
            let noise = randn(rng, eta.nrows(), eta.ncols());
            Ok(DMatrix::from_fn(eta.nrows(), eta.ncols(), |i, j| eta[(i, j)] + sd[(i, 0)] * noise[(i, j)]))
        }
        ObsSpec::Poisson { .. } => {
            let mut y = DMatrix::zeros(eta.nrows(), eta.ncols());
            for (out, e) in y.iter_mut().zip(eta.iter()) {
                let rate = e.clamp(LOG_RATE_CLAMP.0, LOG_RATE_CLAMP.1).exp();
                *out = if rate > 0.0 {
                    Poisson::new(rate).map_err(|e| Error::Invalid(e.to_string()))?.sample(rng)
                } else {
                    0.0
                };
            }
            Ok(y)
        }
    }
}

const MAX_INIT_DRAWS: usize = 10_000;

/// Simulates in-family truth through the library's own dynamics.
fn simulate_in_family(
    rng: &mut ChaCha8Rng,
    truth: &Truth,
    latent_dim: usize,
    obs_dim: usize,
    t_len: usize,
    n_seq: usize,
    accept_init: impl Fn(&DVector<f64>) -> bool,
) -> Result<(Vec<Sequence>, Vec<DMatrix<f64>>)> {
    let mut spec = ModelSpec::new(latent_dim, obs_dim);
    spec.encoder.local_hidden = vec![];
    spec.encoder.gru_hidden = 1;
    let (model, params) = oracle_model(&spec, truth, 0)?;
    let mut seqs = Vec::with_capacity(n_seq);
    let mut lats = Vec::with_capacity(n_seq);
    for _ in 0..n_seq {
        let mean = &truth.blocks["init.mean"];
        let sd = truth.blocks["init.log_var"].map(|v| (0.5 * v).exp());
        let mut tries = 0;
        let z1 = loop {
            let z1 = DVector::from_fn(latent_dim, |_, _| StandardNormal.sample(rng));
            let state = DVector::from_fn(latent_dim, |i, _| mean[(i, 0)] + sd[(i, 0)] * z1[i]);
            if accept_init(&state) {
                break z1;
            }
            tries += 1;
            if tries == MAX_INIT_DRAWS {
                return Err(Error::Invalid("no acceptable initial state; loosen the initial-state constraint".into()));
            }
        };
        let steps = randn(rng, latent_dim, t_len - 1);
        let z = model.dynamics.simulate(&params, &z1, &steps)?;
        let y = observe(rng, &truth.obs, &truth.blocks, &z)?;
        seqs.push(Sequence::fully_observed(y));
        lats.push(z);
    }
    Ok((seqs, lats))
}

fn gen_lgssm(rng: &mut ChaCha8Rng, g: &LgssmGen) -> Result<(Truth, Vec<Sequence>, Vec<DMatrix<f64>>)> {
    let (l, n) = (g.latent_dim, g.obs_dim);
    let mut blocks = BTreeMap::new();
    blocks.insert("dyn.a".into(), random_stable(rng, l, g.spectral_radius));
    blocks.insert("dyn.b".into(), DMatrix::zeros(l, 1));
    blocks.insert("dyn.log_q".into(), DMatrix::from_element(l, 1, g.q_var.ln()));
    blocks.insert("init.mean".into(), DMatrix::zeros(l, 1));
    blocks.insert("init.log_var".into(), DMatrix::from_element(l, 1, g.init_var.ln()));
    blocks.insert("obs.c".into(), randn(rng, n, l) / (l as f64).sqrt());
    blocks.insert("obs.bias".into(), randn(rng, n, 1) * 0.5);
    blocks.insert("obs.log_r".into(), DMatrix::from_element(n, 1, g.r_var.ln()));
    let truth = Truth {
        mean_fn: Some(MeanFnSpec::Linear),
        obs: ObsSpec::Gaussian {
            read_dim: None,
            r_init: g.r_var,
        },
        blocks,
    };
    let (s, z) = simulate_in_family(rng, &truth, l, n, g.t_len, g.n_seq, |_| true)?;
    Ok((truth, s, z))
}

fn gen_pendulum(rng: &mut ChaCha8Rng, g: &PendulumGen) -> Result<(Truth, Vec<Sequence>, Vec<DMatrix<f64>>)> {
    let n = g.obs_dim;
    let mut blocks = BTreeMap::new();
    blocks.insert("dyn.log_kappa".into(), col(&[g.g_over_l.ln()]));
    blocks.insert("dyn.log_q".into(), DMatrix::from_element(2, 1, g.process_var.ln()));
    blocks.insert("init.mean".into(), col(&[g.init_angle, 0.0]));
    blocks.insert("init.log_var".into(), col(&[g.init_angle_var.ln(), g.init_velocity_var.ln()]));
    // angular velocity runs about √(g/ℓ) times larger than the angle
    let scale = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0 / g.g_over_l.sqrt()]));
    let c = randn(rng, n, 2) * scale / 2f64.sqrt();
    let obs = match g.readout {
        Readout::Gaussian => {
            blocks.insert("obs.bias".into(), randn(rng, n, 1) * 0.5);
            blocks.insert("obs.log_r".into(), DMatrix::from_element(n, 1, g.obs_var.ln()));
            ObsSpec::Gaussian {
                read_dim: None,
                r_init: g.obs_var,
            }
        }
        Readout::Poisson => {
            blocks.insert("obs.bias".into(), DMatrix::from_element(n, 1, g.base_log_rate));
            ObsSpec::Poisson { read_dim: None }
        }
    };
    blocks.insert("obs.c".into(), c);
    let truth = Truth {
        mean_fn: Some(MeanFnSpec::Pendulum { dt: g.dt }),
        obs,
        blocks,
    };
    let kappa = g.g_over_l;
    let limit = g.max_energy_fraction.map_or(f64::INFINITY, |f| f * 2.0 * kappa);
    let energy = move |z: &DVector<f64>| 0.5 * z[1] * z[1] + kappa * (1.0 - z[0].cos());
    let (s, z) = simulate_in_family(rng, &truth, 2, n, g.t_len, g.n_seq, |z| energy(z) < limit)?;
    Ok((truth, s, z))
}

/// One observation bin of the Van der Pol flow by sub-stepped Euler.
pub fn vanderpol_step(x: f64, v: f64, mu: f64, dt: f64, substeps: usize) -> (f64, f64) {
    let h = dt / substeps as f64;
    let (mut x, mut v) = (x, v);
    for _ in 0..substeps {
        let a = mu * (1.0 - x * x) * v - x;
        x += h * v;
        v += h * a;
    }
    (x, v)
}

fn gen_vanderpol(rng: &mut ChaCha8Rng, g: &VanDerPolGen) -> Result<(Truth, Vec<Sequence>, Vec<DMatrix<f64>>)> {
    let n = g.obs_dim;
    let mut blocks = BTreeMap::new();
    // latent amplitude is about 2 on the limit cycle
    blocks.insert("obs.c".into(), randn(rng, n, 2) * (g.gain / 2.0));
    blocks.insert("obs.bias".into(), DMatrix::from_element(n, 1, g.base_log_rate));
    blocks.insert("vdp.mu".into(), col(&[g.mu]));
    let truth = Truth {
        mean_fn: None,
        obs: ObsSpec::Poisson { read_dim: None },
        blocks,
    };
    let sd = g.process_var.sqrt();
    let mut seqs = Vec::with_capacity(g.n_seq);
    let mut lats = Vec::with_capacity(g.n_seq);
    for _ in 0..g.n_seq {
        let mut x = rng.random_range(-2.0..2.0);
        let mut v = rng.random_range(-2.0..2.0);
        let mut z = DMatrix::zeros(2, g.t_len);
        for t in 0..g.burn_in + g.t_len {
            let e: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
            (x, v) = vanderpol_step(x, v, g.mu, g.dt, g.substeps);
            x += sd * e[0];
            v += sd * e[1];
            if !(x.is_finite() && v.is_finite()) {
                return Err(Error::NonFinite { what: "van der pol state" });
            }
            if t >= g.burn_in {
                z[(0, t - g.burn_in)] = x;
                z[(1, t - g.burn_in)] = v;
            }
        }
        let y = observe(rng, &truth.obs, &truth.blocks, &z)?;
        seqs.push(Sequence::fully_observed(y));
        lats.push(z);
    }
    Ok((truth, seqs, lats))
}

pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<SequenceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (truth, sequences, latents) = match spec {
        GeneratorSpec::Lgssm(g) => gen_lgssm(&mut rng, g)?,
        GeneratorSpec::Pendulum(g) => gen_pendulum(&mut rng, g)?,
        GeneratorSpec::VanderpolPoisson(g) => gen_vanderpol(&mut rng, g)?,
    };
    let counts = matches!(truth.obs, ObsSpec::Poisson { .. });
    Ok(SequenceDataset {
        sequences,
        latents: Some(latents),
        truth: Some(truth),
        generator: Some(spec.clone()),
        seed: Some(seed),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = GeneratorSpec::Lgssm(LgssmGen {
            n_seq: 3,
            t_len: 20,
            ..LgssmGen::default()
        });
        assert_eq!(generate(&spec, 5).unwrap(), generate(&spec, 5).unwrap());
        assert_ne!(generate(&spec, 5).unwrap(), generate(&spec, 6).unwrap());
    }

    #[test]
    fn stable_matrix_has_requested_radius() {
        let a = random_stable(&mut ChaCha8Rng::seed_from_u64(1), 6, 0.95);
        let rho = a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max);
        assert!((rho - 0.95).abs() < 1e-10);
    }

    #[test]
    fn pendulum_rests_at_the_inverted_equilibrium_without_noise() {
        let spec = ModelSpec {
            mean_fn: MeanFnSpec::Pendulum { dt: 0.1 },
            ..ModelSpec::new(2, 1)
        };
        let model = Model::new(spec).unwrap();
        let mut p = model.init_params(0);
        p.set_matrix(p.layout.find("dyn.log_kappa").unwrap(), &col(&[4f64.ln()])).unwrap();
        p.set_matrix(p.layout.find("init.mean").unwrap(), &col(&[std::f64::consts::PI, 0.0])).unwrap();
        let z = model.dynamics.simulate(&p, &DVector::zeros(2), &DMatrix::zeros(2, 49)).unwrap();
        for t in 0..50 {
            assert!((z[(0, t)] - std::f64::consts::PI).abs() < 1e-9 && z[(1, t)].abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_sequences_swing_below_the_separatrix() {
        let g = PendulumGen {
            n_seq: 60,
            t_len: 100,
            ..PendulumGen::default()
        };
        let ds = generate(&GeneratorSpec::Pendulum(g.clone()), 3).unwrap();
        for z in ds.latents.as_ref().unwrap() {
            let e0 = 0.5 * z[(1, 0)].powi(2) + g.g_over_l * (1.0 - z[(0, 0)].cos());
            assert!(e0 < 0.8 * 2.0 * g.g_over_l);
            assert!(z.row(0).amax() < std::f64::consts::PI);
        }
        let bad = GeneratorSpec::Pendulum(PendulumGen {
            init_angle: std::f64::consts::PI,
            init_angle_var: 1e-6,
            ..g
        });
        assert!(generate(&bad, 0).is_err());
    }

    #[test]
    fn vanderpol_settles_on_its_limit_cycle() {
        let (mut x, mut v) = (0.1, 0.0);
        let mut peak: f64 = 0.0;
        for t in 0..2000 {
            (x, v) = vanderpol_step(x, v, 1.5, 0.1, 10);
            if t > 1000 {
                peak = peak.max(x.abs());
            }
        }
        assert!((peak - 2.0).abs() < 0.1, "{peak}");
    }

    #[test]
    fn poisson_generators_emit_counts() {
        let spec = GeneratorSpec::VanderpolPoisson(VanDerPolGen {
            n_seq: 2,
            t_len: 30,
            ..VanDerPolGen::default()
        });
        let ds = generate(&spec, 1).unwrap();
        assert!(ds.counts);
        ds.validate().unwrap();
        assert!(ds.sequences.iter().any(|s| s.y.sum() > 0.0));
    }

    #[test]
    fn lgssm_latents_reach_the_stationary_covariance() {
        let g = LgssmGen {
            latent_dim: 2,
            obs_dim: 3,
            t_len: 300,
            n_seq: 60,
            spectral_radius: 0.8,
            ..LgssmGen::default()
        };
        let ds = generate(&GeneratorSpec::Lgssm(g.clone()), 4).unwrap();
        let truth = ds.truth.as_ref().unwrap();
        let a = &truth.blocks["dyn.a"];
        let q = DMatrix::from_diagonal_element(2, 2, g.q_var);
        let want = lrssm_oracle::lyapunov_stationary(a, &q, 500);
        let mut got = DMatrix::zeros(2, 2);
        let mut n = 0.0;
        for z in ds.latents.as_ref().unwrap() {
            for t in 50..z.ncols() {
                let c = z.column(t);
                got += c * c.transpose();
                n += 1.0;
            }
        }
        got /= n;
        assert!((&got - &want).norm() < 0.05 * want.norm(), "{got} vs {want}");
    }
}
