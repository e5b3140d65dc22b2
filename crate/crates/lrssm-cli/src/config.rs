//! Experiment configuration: one TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use lrssm::dynamics::MeanFnSpec;
use lrssm::encoders::EncoderSpec;
use lrssm::likelihoods::ObsSpec;
use lrssm::model::ModelSpec;
use lrssm::trainer::TrainConfig;
use lrssm::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::generate::GeneratorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub benchmark: BenchConfig,
    pub infer: InferConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            resume: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            benchmark: BenchConfig::default(),
            infer: InferConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset file; takes precedence over `generator`.
    pub path: Option<PathBuf>,
    pub generator: Option<GeneratorSpec>,
    /// Leading fraction of sequences used for training; the rest is held out.
    pub train_fraction: f64,
    /// Observation dims hidden from the encoder and scored by co-smoothing.
    pub heldout_dims: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            generator: None,
            train_fraction: 0.8,
            heldout_dims: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub mean_fn: MeanFnSpec,
    pub encoder: EncoderSpec,
    pub obs: ObsSpec,
    pub q_init: f64,
    pub init_var: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::new(2, 1);
        ModelConfig {
            latent_dim: 2,
            mean_fn: s.mean_fn,
            encoder: s.encoder,
            obs: s.obs,
            q_init: s.q_init,
            init_var: s.init_var,
        }
    }
}

impl ModelConfig {
    /// Full spec for data with `obs_dim` outputs; held-out dims are hidden
    /// from the encoder.
    pub fn spec(&self, obs_dim: usize, heldout: &[usize]) -> ModelSpec {
        let mut encoder = self.encoder.clone();
        for d in heldout {
            if !encoder.blind_dims.contains(d) {
                encoder.blind_dims.push(*d);
            }
        }
        ModelSpec {
            latent_dim: self.latent_dim,
            obs_dim,
            mean_fn: self.mean_fn.clone(),
            encoder,
            obs: self.obs.clone(),
            q_init: self.q_init,
            init_var: self.init_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub horizon: usize,
    /// Steps of context before the first forecast origin.
    pub min_context: usize,
    pub origin_stride: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 32,
            horizon: 20,
            min_context: 50,
            origin_stride: 40,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub latent_dims: Vec<usize>,
    pub samples: usize,
    pub rank: usize,
    pub t_len: usize,
    /// Hidden width of the residual mean function.
    pub hidden: usize,
    pub repeats: usize,
    /// Wall-clock budget per size for the dense baseline; it runs at least
    /// one step and at most `t_len`.
    pub dense_budget_secs: f64,
    pub dense: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            latent_dims: vec![64, 256, 1024, 4096],
            samples: 8,
            rank: 8,
            t_len: 100,
            hidden: 16,
            repeats: 3,
            dense_budget_secs: 2.0,
            dense: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    #[default]
    Smooth,
    Filter,
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Defaults to `output_dir/checkpoint.lrssm`.
    pub checkpoint: Option<PathBuf>,
    pub mode: InferMode,
    pub samples: usize,
    /// Forecast mode: steps of context (default: the whole sequence).
    pub context: Option<usize>,
    pub horizon: usize,
    /// Only the first `max_sequences` sequences are processed.
    pub max_sequences: Option<usize>,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            checkpoint: None,
            mode: InferMode::Smooth,
            samples: 32,
            context: None,
            horizon: 20,
            max_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key (`train.lr`) in a TOML table, creating tables on the way.
pub fn set_key(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Invalid(format!("bad config key `{key}`")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Invalid(format!("config key `{key}` passes through a non-table value"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Applies one `key=value` override.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("override `{spec}` is not key=value")))?;
    set_key(root, k.trim(), parse_value(v.trim()))
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Format(format!("config: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Format(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.infer
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.lrssm"))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Checks referenced files and dimension consistency.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                return Err(Error::Io(format!("dataset {} does not exist", p.display())));
            }
        } else if let Some(g) = &self.data.generator {
            g.validate()?;
            if let Some(d) = self.data.heldout_dims.iter().find(|d| **d >= g.obs_dim()) {
                return Err(Error::Invalid(format!("held-out dim {d} is outside the {} observed dims", g.obs_dim())));
            }
        } else {
            return Err(Error::Invalid("config names neither data.path nor data.generator".into()));
        }
        if let Some(p) = &self.resume {
            if !p.is_file() {
                return Err(Error::Io(format!("checkpoint {} does not exist", p.display())));
            }
        }
        if self.model.latent_dim == 0 {
            return Err(Error::Invalid("model.latent_dim must be positive".into()));
        }
        if matches!(self.model.mean_fn, MeanFnSpec::Pendulum { .. }) && self.model.latent_dim < 2 {
            return Err(Error::Invalid("pendulum dynamics need latent_dim >= 2".into()));
        }
        if let ObsSpec::Gaussian { read_dim: Some(r), .. } | ObsSpec::Poisson { read_dim: Some(r) } = self.model.obs {
            if r > self.model.latent_dim {
                return Err(Error::Invalid("readout dimension exceeds latent_dim".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(Error::Invalid("data.train_fraction must lie in [0, 1]".into()));
        }
        if self.eval.samples == 0 || self.infer.samples == 0 {
            return Err(Error::Invalid("eval.samples must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
output_dir = "runs/pendulum"

[data]
heldout_dims = [1]

[data.generator]
kind = "pendulum"
n_seq = 10

[model]
latent_dim = 2
mean_fn = { kind = "residual_mlp", hidden = [32] }

[train]
lr = 0.01
epochs = 5
"#;

    #[test]
    fn parses_and_overrides() {
        let cfg = ExperimentConfig::parse(SAMPLE, &["train.lr=0.5".into(), "data.generator.t_len=7".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.epochs, 5);
        match &cfg.data.generator {
            Some(GeneratorSpec::Pendulum(g)) => {
                assert_eq!(g.n_seq, 10);
                assert_eq!(g.t_len, 7);
            }
            other => panic!("{other:?}"),
        }
        cfg.validate().unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse("bogus = 1", &[]).is_err());
        assert!(ExperimentConfig::parse("[train]\nlearning_rate = 1", &[]).is_err());
        let cfg = ExperimentConfig::parse(SAMPLE, &["train.mask_rate=2.0".into()]).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::parse(SAMPLE, &["data.heldout_dims=[10]".into()]).unwrap();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::parse(SAMPLE, &["seed".into()]).is_err());
    }

    #[test]
    fn string_overrides_fall_back_to_strings() {
        let cfg = ExperimentConfig::parse("", &["output_dir=out/x".into()]).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn heldout_dims_become_blind_dims() {
        let spec = ModelConfig::default().spec(5, &[3, 4]);
        assert_eq!(spec.encoder.blind_dims, vec![3, 4]);
    }
}
