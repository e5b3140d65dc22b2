//! A complete model: dynamics, encoders and observation model sharing one
//! parameter vector, plus checkpoint files.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Array, Container};
use crate::dynamics::{Dynamics, DynamicsSpec, MeanFnSpec};
use crate::encoders::{EncoderSpec, Encoders};
use crate::error::{Error, Result};
use crate::likelihoods::{ObsModel, ObsSpec};
use crate::params::{Layout, Params};
use crate::sequence::Sequence;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LRSSMCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub obs_dim: usize,
    #[serde(default)]
    pub mean_fn: MeanFnSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub obs: ObsSpec,
    #[serde(default = "default_q_init")]
    pub q_init: f64,
    #[serde(default = "default_init_var")]
    pub init_var: f64,
}

fn default_q_init() -> f64 {
    0.1
}

fn default_init_var() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(latent_dim: usize, obs_dim: usize) -> Self {
        ModelSpec {
            latent_dim,
            obs_dim,
            mean_fn: MeanFnSpec::default(),
            encoder: EncoderSpec::default(),
            obs: ObsSpec::default(),
            q_init: default_q_init(),
            init_var: default_init_var(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub dynamics: Dynamics,
    pub encoders: Encoders,
    pub obs: ObsModel,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.obs_dim == 0 {
            return Err(Error::Invalid("observation dimension must be positive".into()));
        }
        let mut layout = Layout::new();
        let mut dspec = DynamicsSpec::new(spec.latent_dim, spec.mean_fn.clone());
        dspec.q_init = spec.q_init;
        dspec.init_var = spec.init_var;
        let dynamics = Dynamics::new(&mut layout, dspec)?;
        let encoders = Encoders::new(&mut layout, spec.encoder.clone(), spec.latent_dim, spec.obs_dim)?;
        let obs = ObsModel::new(&mut layout, spec.obs.clone(), spec.latent_dim, spec.obs_dim)?;
        Ok(Model {
            spec,
            layout,
            dynamics,
            encoders,
            obs,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// Fresh parameters from a seed.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(self.layout.clone());
        self.dynamics.init(&mut p, &mut rng);
        self.encoders.init(&mut p, &mut rng);
        self.obs.init(&mut p, &mut rng);
        p
    }

    /// Initialization that also centers the observation bias on `data`.
    pub fn init_params_for(&self, seed: u64, data: &[Sequence]) -> Params {
        let mut p = self.init_params(seed);
        self.obs.init_bias_from_data(&mut p, data);
        p
    }

    pub fn check_params(&self, p: &Params) -> Result<()> {
        if p.layout != self.layout {
            return Err(Error::Format("parameter layout does not match the model".into()));
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(n: usize) -> Self {
        OptimState {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Params,
    pub optim: Option<OptimState>,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    layout: Layout,
    epoch: usize,
    optim_step: Option<u64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            layout: self.params.layout.clone(),
            epoch: self.epoch,
            optim_step: self.optim.as_ref().map(|o| o.step),
        };
        let mut c = Container::new(serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?);
        let n = self.params.values.len();
        c.push(Array::f64("params", vec![n], self.params.values.clone()));
        if let Some(o) = &self.optim {
            c.push(Array::f64("adam_m", vec![n], o.m.clone()));
            c.push(Array::f64("adam_v", vec![n], o.v.clone()));
        }
        c.encode(CHECKPOINT_MAGIC)
    }

    /// Decodes and checks that the stored layout is the one the spec builds.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(CHECKPOINT_MAGIC, bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let model = Model::new(meta.spec.clone()).map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        if model.layout != meta.layout {
            return Err(Error::Format("checkpoint layout is incompatible with its model spec".into()));
        }
        let values = c.get("params")?.as_f64()?.to_vec();
        let params = Params::from_values(meta.layout, values).map_err(|e| Error::Format(e.to_string()))?;
        let optim = match meta.optim_step {
            Some(step) => {
                let m = c.get("adam_m")?.as_f64()?.to_vec();
                let v = c.get("adam_v")?.as_f64()?.to_vec();
                if m.len() != params.values.len() || v.len() != params.values.len() {
                    return Err(Error::Format("optimizer state length mismatch".into()));
                }
                Some(OptimState { step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            spec: meta.spec,
            params,
            optim,
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut spec = ModelSpec::new(3, 4);
        spec.encoder.gru_hidden = 4;
        spec.encoder.local_hidden = vec![5];
        let model = Model::new(spec.clone()).unwrap();
        let params = model.init_params(11);
        let mut optim = OptimState::new(params.values.len());
        optim.step = 7;
        optim.m[0] = 0.25;
        let ck = Checkpoint {
            spec,
            params,
            optim: Some(optim),
            epoch: 3,
        };
        let bytes = ck.encode().unwrap();
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn default_ranks_follow_latent_dim() {
        let m = Model::new(ModelSpec::new(40, 3)).unwrap();
        assert_eq!(m.encoders.rank_local, 16);
        let m = Model::new(ModelSpec::new(3, 3)).unwrap();
        assert_eq!(m.encoders.rank_backward, 3);
    }
}
