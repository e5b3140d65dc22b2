//! The command implementations behind the CLI verbs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lrssm::ad::Eager;
use lrssm::dynamics::MeanFnSpec;
use lrssm::encoders::StepMask;
use lrssm::likelihoods::ObsSpec;
use lrssm::model::{Checkpoint, Model, ModelSpec};
use lrssm::params::Params;
use lrssm::sequence::Sequence;
use lrssm::smoother::{
    forecast, realtime_filter, trajectory, variational_filter, Forecast, PassNoise, PassView, Propagation, Trajectory,
};
use lrssm::trainer::{evaluate, fit, gradcheck, noise_rng, EpochRecord, FitOutput, GradReport, TrainConfig, Variant};
use lrssm::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::bench::{loglog_slope, run_benchmark, write_csv, BenchRow};
use crate::config::{EvalConfig, ExperimentConfig, InferMode};
use crate::dataset::SequenceDataset;
use crate::generate::generate;
use crate::metrics::{alignment_r2, co_bps, forecast_mse, mean_rates, AlignmentReport};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// The configured dataset: read from `data.path` or generated from
/// `data.generator` with the top-level seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<SequenceDataset> {
    let ds = match (&cfg.data.path, &cfg.data.generator) {
        (Some(p), _) => SequenceDataset::load(p)?,
        (None, Some(g)) => generate(g, cfg.seed)?,
        (None, None) => return Err(Error::Invalid("config names neither data.path nor data.generator".into())),
    };
    if ds.is_empty() {
        return Err(Error::Invalid("dataset has no sequences".into()));
    }
    if let Some(d) = cfg.data.heldout_dims.iter().find(|d| **d >= ds.obs_dim()) {
        return Err(Error::Invalid(format!("held-out dim {d} is outside the {} observed dims", ds.obs_dim())));
    }
    Ok(ds)
}

/// Training and held-out parts by `data.train_fraction`; both are nonempty
/// when the dataset has at least two sequences.
pub fn split_data(cfg: &ExperimentConfig, ds: &SequenceDataset) -> (SequenceDataset, SequenceDataset) {
    let n = ds.len();
    let mut cut = (cfg.data.train_fraction * n as f64).round() as usize;
    if n >= 2 {
        cut = cut.clamp(1, n - 1);
    }
    ds.split(cut)
}

pub fn model_spec(cfg: &ExperimentConfig, obs_dim: usize) -> ModelSpec {
    cfg.model.spec(obs_dim, &cfg.data.heldout_dims)
}

pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<SequenceDataset> {
    let g = cfg
        .data
        .generator
        .as_ref()
        .ok_or_else(|| Error::Invalid("generate needs data.generator".into()))?;
    let ds = generate(g, cfg.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    ds.save(out)?;
    log::info!("wrote {} sequences to {}", ds.len(), out.display());
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub init: Params,
    pub params: Params,
    pub curve: Vec<EpochRecord>,
    pub train: SequenceDataset,
    pub heldout: SequenceDataset,
}

pub fn init_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("init.lrssm")
}

/// Trains per the config, writing `config.toml`, `init.lrssm`,
/// `checkpoint.lrssm` and `curve.csv` into `output_dir`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_data(cfg)?;
    let (train, heldout) = split_data(cfg, &ds);
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| io_err(&dir, e))?;
    let spec = model_spec(cfg, ds.obs_dim());
    let (model, init, optim, start) = match &cfg.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.spec != spec {
                return Err(Error::Format(format!(
                    "checkpoint {} was trained with a different model spec",
                    path.display()
                )));
            }
            let model = Model::new(spec)?;
            model.check_params(&ck.params)?;
            log::info!("resuming from {} at epoch {}", path.display(), ck.epoch);
            (model, ck.params, ck.optim, ck.epoch)
        }
        None => {
            let model = Model::new(spec)?;
            let p = model.init_params_for(cfg.seed, &train.sequences);
            (model, p, None, 0)
        }
    };
    if cfg.resume.is_none() {
        Checkpoint {
            spec: model.spec.clone(),
            params: init.clone(),
            optim: None,
            epoch: 0,
        }
        .save(&init_checkpoint_path(&dir))?;
    }
    let out = FitOutput { dir };
    let res = fit(&model, init.clone(), optim, &train.sequences, &cfg.train, Some(&out), start)?;
    Ok(TrainOutcome {
        model,
        init,
        params: res.params,
        curve: res.curve,
        train,
        heldout,
    })
}

/// Loads a checkpoint and checks it against data with `obs_dim` outputs.
pub fn load_model(path: &Path, obs_dim: usize) -> Result<(Model, Params)> {
    let ck = Checkpoint::load(path)?;
    if ck.spec.obs_dim != obs_dim {
        return Err(Error::Format(format!(
            "checkpoint expects {} observed dims, data has {obs_dim}",
            ck.spec.obs_dim
        )));
    }
    let model = Model::new(ck.spec)?;
    model.check_params(&ck.params)?;
    Ok((model, ck.params))
}

/// Inference output for one sequence.
#[derive(Debug, Clone)]
pub struct Inferred {
    pub trajectory: Trajectory,
    /// Posterior samples per step (`L×S`).
    pub samples: Vec<DMatrix<f64>>,
    pub forecast: Option<Forecast>,
}

fn pass_noise(model: &Model, t_len: usize, samples: usize, seed: u64, index: usize) -> PassNoise {
    PassNoise::for_model(&mut noise_rng(seed, 0, index), model, t_len, samples, Propagation::Sampled)
}

fn forecast_noise(rng: &mut impl Rng, l: usize, samples: usize, horizon: usize) -> Vec<DMatrix<f64>> {
    (0..horizon)
        .map(|_| DMatrix::from_fn(l, samples, |_, _| StandardNormal.sample(rng)))
        .collect()
}

fn collect<P: PassView<DMatrix<f64>>>(model: &Model, params: &Params, pass: &P, seq: &Sequence) -> Result<Inferred> {
    Ok(Inferred {
        trajectory: trajectory(model, params, pass, seq)?,
        samples: (0..pass.len()).map(|t| pass.samples(t).clone()).collect(),
        forecast: None,
    })
}

pub fn smooth(model: &Model, params: &Params, seq: &Sequence, noise: &PassNoise) -> Result<Inferred> {
    let bound = params.bind(&Eager);
    let enc = model.encoders.encode(&Eager, &bound, seq, &StepMask::none(seq.len()))?;
    let pass = variational_filter(&Eager, model, &bound, &enc.updates, noise, Propagation::Sampled)?;
    collect(model, params, &pass, seq)
}

/// Causal inference: the backward encoder is switched off, so each step
/// conditions only on observations up to that step.
pub fn filter(model: &Model, params: &Params, seq: &Sequence, noise: &PassNoise) -> Result<Inferred> {
    let bound = params.bind(&Eager);
    let enc = model.encoders.encode(&Eager, &bound, seq, &StepMask::none(seq.len()))?;
    let enc = enc.without_backward(&Eager)?;
    let pass = realtime_filter(&Eager, model, &bound, &enc, noise, Propagation::Sampled)?;
    collect(model, params, &pass, seq)
}

/// Smooths the first `context` steps, then rolls the final-step samples
/// forward `horizon` steps.
pub fn smooth_and_forecast(
    model: &Model,
    params: &Params,
    seq: &Sequence,
    context: usize,
    horizon: usize,
    noise: &PassNoise,
    rng: &mut impl Rng,
) -> Result<Inferred> {
    if context == 0 || context > seq.len() {
        return Err(Error::Invalid(format!("context {context} outside 1..={}", seq.len())));
    }
    let window = seq.window(0, context);
    let mut out = smooth(model, params, &window, noise)?;
    let start = out.samples.last().expect("context >= 1");
    let eps = forecast_noise(rng, model.latent_dim(), start.ncols(), horizon);
    out.forecast = Some(forecast(model, params, start, &eps)?);
    Ok(out)
}

fn header(w: &mut impl Write, lead: &str, groups: &[(&str, usize)], tail: &str) -> Result<()> {
    let mut cols = vec![lead.to_string()];
    for (name, n) in groups {
        cols.extend((0..*n).map(|i| format!("{name}_{i}")));
    }
    if !tail.is_empty() {
        cols.push(tail.to_string());
    }
    writeln!(w, "{}", cols.join(","))?;
    Ok(())
}

fn row(w: &mut impl Write, lead: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut line = lead.to_string();
    for v in values {
        line.push(',');
        line.push_str(&v.to_string());
    }
    writeln!(w, "{line}")?;
    Ok(())
}

/// Files written by [`run_infer`].
#[derive(Debug, Clone, Serialize)]
pub struct InferFiles {
    pub trajectory: PathBuf,
    pub samples: PathBuf,
    pub forecast: Option<PathBuf>,
}

/// Runs inference over the configured dataset with the configured
/// checkpoint and writes CSV files into `output_dir`:
/// `trajectory.csv` (per-step means, variances, log-likelihood and KL),
/// `samples.csv` and, in forecast mode, `forecast.csv`.
pub fn run_infer(cfg: &ExperimentConfig) -> Result<(InferFiles, Vec<Inferred>)> {
    let ds = load_data(cfg)?;
    let (model, params) = load_model(&cfg.checkpoint_path(), ds.obs_dim())?;
    let ic = &cfg.infer;
    let count = ic.max_sequences.unwrap_or(ds.len()).min(ds.len());
    let mut results = Vec::with_capacity(count);
    for (i, seq) in ds.sequences.iter().take(count).enumerate() {
        let r = match ic.mode {
            InferMode::Smooth => smooth(&model, &params, seq, &pass_noise(&model, seq.len(), ic.samples, cfg.seed, i)),
            InferMode::Filter => filter(&model, &params, seq, &pass_noise(&model, seq.len(), ic.samples, cfg.seed, i)),
            InferMode::Forecast => {
                let context = ic.context.unwrap_or(seq.len()).min(seq.len());
                let noise = pass_noise(&model, context, ic.samples, cfg.seed, i);
                let mut rng = noise_rng(cfg.seed, 1, i);
                smooth_and_forecast(&model, &params, seq, context, ic.horizon, &noise, &mut rng)
            }
        }
        .map_err(|e| Error::Invalid(format!("sequence {i}: {e}")))?;
        results.push(r);
    }
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let l = model.latent_dim();
    let files = InferFiles {
        trajectory: dir.join("trajectory.csv"),
        samples: dir.join("samples.csv"),
        forecast: (ic.mode == InferMode::Forecast).then(|| dir.join("forecast.csv")),
    };
    let mut w = create(&files.trajectory)?;
    header(&mut w, "seq,t", &[("mean", l), ("var", l)], "loglik,kl")?;
    for (i, r) in results.iter().enumerate() {
        let tr = &r.trajectory;
        for t in 0..tr.means.len() {
            let vals = tr.means[t]
                .iter()
                .chain(&tr.variances[t])
                .copied()
                .chain([tr.loglik[t], tr.kl[t]]);
            row(&mut w, &format!("{i},{t}"), vals)?;
        }
    }
    w.flush()?;
    let mut w = create(&files.samples)?;
    header(&mut w, "seq,t,sample", &[("z", l)], "")?;
    for (i, r) in results.iter().enumerate() {
        for (t, z) in r.samples.iter().enumerate() {
            for (s, c) in z.column_iter().enumerate() {
                row(&mut w, &format!("{i},{t},{s}"), c.iter().copied())?;
            }
        }
    }
    w.flush()?;
    if let Some(path) = &files.forecast {
        let n = ds.obs_dim();
        let mut w = create(path)?;
        header(&mut w, "seq,t,h", &[("mean", l), ("sd", l), ("y", n)], "")?;
        for (i, r) in results.iter().enumerate() {
            let f = r.forecast.as_ref().expect("forecast mode");
            let origin = r.trajectory.means.len() - 1;
            for h in 0..f.samples.len() {
                let y = model.obs.predictive_mean(&params, &f.samples[h]);
                let vals = f.means[h].iter().chain(f.spread[h].iter()).chain(y.iter()).copied();
                row(&mut w, &format!("{i},{},{h}", origin + h), vals)?;
            }
        }
        w.flush()?;
    }
    Ok((files, results))
}

/// Forecast error per horizon `1..=H`, pooled over sequences and origins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastReport {
    pub origins: usize,
    pub mse: Vec<f64>,
    pub r2: Vec<f64>,
}

impl ForecastReport {
    pub fn at(&self, horizon: usize) -> f64 {
        self.mse[horizon - 1]
    }
}

/// Observation-space forecasts from origins `min_context, +stride, ...`:
/// smooth `y[..origin]`, roll forward, and compare the predictive mean of `y`
/// with the observed values.
pub fn forecast_eval(model: &Model, params: &Params, seqs: &[Sequence], ec: &EvalConfig) -> Result<ForecastReport> {
    let hmax = ec.horizon;
    if hmax == 0 || ec.origin_stride == 0 || ec.min_context == 0 {
        return Err(Error::Invalid("forecast evaluation needs horizon, stride and context > 0".into()));
    }
    let mut pred: Vec<Vec<DVector<f64>>> = vec![vec![]; hmax];
    let mut actual: Vec<Vec<DVector<f64>>> = vec![vec![]; hmax];
    let mut origins = 0;
    for (i, seq) in seqs.iter().enumerate() {
        let mut origin = ec.min_context;
        let mut k = 0;
        while origin + hmax <= seq.len() {
            let noise = pass_noise(model, origin, ec.samples, ec.seed, i);
            let mut rng = noise_rng(ec.seed, 1 + k, i);
            let r = smooth_and_forecast(model, params, seq, origin, hmax, &noise, &mut rng)?;
            let f = r.forecast.expect("forecast");
            for h in 1..=hmax {
                let t = origin - 1 + h;
                let y = model.obs.predictive_mean(params, &f.samples[h]);
                let keep: Vec<usize> = (0..seq.obs_dim()).filter(|&n| seq.observed[(n, t)]).collect();
                pred[h - 1].push(DVector::from_iterator(keep.len(), keep.iter().map(|&n| y[(n, 0)])));
                actual[h - 1].push(DVector::from_iterator(keep.len(), keep.iter().map(|&n| seq.y[(n, t)])));
            }
            origins += 1;
            origin += ec.origin_stride;
            k += 1;
        }
    }
    if origins == 0 {
        return Err(Error::Invalid("no sequence is long enough for a forecast origin".into()));
    }
    let mse = forecast_mse(&pred, &actual);
    let r2 = actual
        .iter()
        .zip(&mse)
        .map(|(a, m)| {
            let n: usize = a.iter().map(|v| v.len()).sum();
            let mean = a.iter().map(|v| v.sum()).sum::<f64>() / n as f64;
            let var = a.iter().flat_map(|v| v.iter()).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            1.0 - m / var
        })
        .collect();
    Ok(ForecastReport { origins, mse, r2 })
}

/// Co-smoothing on `heldout` dims of `test`: the encoder never sees those
/// dims, rates are the sample-mean `exp(η)` of the smoothing posterior, and
/// the null predicts each dim's mean count over `train`.
pub fn cobps_eval(
    model: &Model,
    params: &Params,
    train: &[Sequence],
    test: &[Sequence],
    heldout: &[usize],
    ec: &EvalConfig,
) -> Result<Option<f64>> {
    if !model.obs.is_poisson() {
        return Err(Error::Invalid("co-smoothing needs a Poisson observation model".into()));
    }
    for d in heldout {
        if !model.spec.encoder.blind_dims.contains(d) {
            return Err(Error::Invalid(format!("held-out dim {d} is visible to the encoder")));
        }
    }
    let rows = |m: &DMatrix<f64>| DMatrix::from_fn(heldout.len(), m.ncols(), |h, t| m[(heldout[h], t)]);
    let null = mean_rates(&train.iter().map(|s| rows(&s.y)).collect::<Vec<_>>());
    let mut rates = Vec::with_capacity(test.len());
    let mut counts = Vec::with_capacity(test.len());
    for (i, seq) in test.iter().enumerate() {
        let r = smooth(model, params, seq, &pass_noise(model, seq.len(), ec.samples, ec.seed, i))?;
        let mut rate = DMatrix::zeros(seq.obs_dim(), seq.len());
        for (t, z) in r.samples.iter().enumerate() {
            rate.set_column(t, &model.obs.predictive_mean(params, z).column(0));
        }
        rates.push(rows(&rate));
        counts.push(rows(&seq.y));
    }
    co_bps(&rates, &counts, &null)
}

/// Smoothed means against ground-truth latents.
pub fn latent_alignment(
    model: &Model,
    params: &Params,
    seqs: &[Sequence],
    latents: &[DMatrix<f64>],
    ec: &EvalConfig,
) -> Result<AlignmentReport> {
    let mut inferred = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let r = smooth(model, params, seq, &pass_noise(model, seq.len(), ec.samples, ec.seed, i))?;
        let means = &r.trajectory.means;
        inferred.push(DMatrix::from_fn(model.latent_dim(), means.len(), |d, t| means[t][d]));
    }
    alignment_r2(&inferred, latents)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub heldout_sequences: usize,
    /// Per-step ELBO on the held-out sequences.
    pub elbo_per_step: f64,
    pub latent_r2: Option<f64>,
    pub forecast: Option<ForecastReport>,
    pub co_bps: Option<f64>,
    /// Why `co_bps` is absent, if it is.
    pub co_bps_status: String,
}

/// Scores the configured checkpoint on the held-out split and writes
/// `metrics.json` into `output_dir`.
pub fn run_metrics(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let ds = load_data(cfg)?;
    let (train, test) = split_data(cfg, &ds);
    let test = if test.is_empty() { ds.clone() } else { test };
    let (model, params) = load_model(&cfg.checkpoint_path(), ds.obs_dim())?;
    let ec = &cfg.eval;
    let tc = TrainConfig {
        samples: ec.samples,
        ..cfg.train.clone()
    };
    let elbo_per_step = evaluate(&model, &params, &test.sequences, &tc, ec.seed)?;
    let latent_r2 = match &test.latents {
        Some(l) => Some(latent_alignment(&model, &params, &test.sequences, l, ec)?.r2),
        None => None,
    };
    let forecast = match forecast_eval(&model, &params, &test.sequences, ec) {
        Ok(f) => Some(f),
        Err(Error::Invalid(msg)) => {
            log::warn!("forecast metrics skipped: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let (co, status) = if cfg.data.heldout_dims.is_empty() {
        (None, "no held-out dims configured".to_string())
    } else if !model.obs.is_poisson() {
        (None, "observation model is not Poisson".to_string())
    } else {
        match cobps_eval(&model, &params, &train.sequences, &test.sequences, &cfg.data.heldout_dims, ec)? {
            Some(v) => (Some(v), "ok".to_string()),
            None => (None, "undefined: held-out dims contain no events".to_string()),
        }
    };
    let report = MetricsReport {
        heldout_sequences: test.len(),
        elbo_per_step,
        latent_r2,
        forecast,
        co_bps: co,
        co_bps_status: status,
    };
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("metrics.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub structured_slope: Option<f64>,
    pub dense_slope: Option<f64>,
}

/// Writes `benchmark.csv` and `benchmark.json` into `output_dir`.
pub fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let rows = run_benchmark(&cfg.benchmark, cfg.seed)?;
    ensure_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join("benchmark.csv"), &rows)?;
    let report = BenchReport {
        structured_slope: loglog_slope(&rows, "structured"),
        dense_slope: loglog_slope(&rows, "dense"),
        rows,
    };
    let path = cfg.output_dir.join("benchmark.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(report)
}

/// The smallest instance exercising every parameter group: two latents, two
/// outputs, three steps, two samples, rank-one encoders. Parameters are
/// jittered off their structured initial values.
pub fn tiny_instance(seed: u64, variant: Variant) -> Result<(Model, Params, Sequence, PassNoise, TrainConfig)> {
    let mut spec = ModelSpec::new(2, 2);
    spec.mean_fn = MeanFnSpec::ResidualMlp { hidden: vec![4] };
    spec.obs = ObsSpec::Gaussian {
        read_dim: None,
        r_init: 0.5,
    };
    spec.encoder.local_hidden = vec![4];
    spec.encoder.gru_hidden = 3;
    spec.encoder.rank_local = Some(1);
    spec.encoder.rank_backward = Some(1);
    spec.encoder.head_gain = 0.5;
    let model = Model::new(spec)?;
    let mut params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for v in &mut params.values {
        *v += rng.random_range(-0.15..0.15);
    }
    let seq = Sequence::fully_observed(DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)));
    let cfg = TrainConfig {
        samples: 2,
        variant,
        ..TrainConfig::default()
    };
    let noise = PassNoise::for_model(&mut rng, &model, 3, cfg.samples, cfg.propagation);
    Ok((model, params, seq, noise, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub variant: Variant,
    pub max_rel_err: f64,
    pub passed: bool,
    pub report: GradReport,
}

/// Finite-difference check on the tiny instance for both variants.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradcheckOutcome>> {
    let gc = &cfg.gradcheck;
    [Variant::Smoothing, Variant::Realtime]
        .into_iter()
        .map(|variant| {
            let (model, params, seq, noise, tc) = tiny_instance(cfg.seed, variant)?;
            let report = gradcheck(&model, &params, &seq, &StepMask::none(seq.len()), &noise, &tc, gc.step)?;
            let max_rel_err = report.max_rel_err();
            Ok(GradcheckOutcome {
                variant,
                max_rel_err,
                passed: max_rel_err < gc.tolerance,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{GeneratorSpec, LgssmGen};

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(
            r#"
seed = 2
[data.generator]
kind = "lgssm"
latent_dim = 2
obs_dim = 3
t_len = 12
n_seq = 4
[model]
latent_dim = 2
mean_fn = { kind = "linear" }
[train]
epochs = 2
batch_size = 2
samples = 4
"#,
            &[],
        )
        .unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let mut cfg = ExperimentConfig::default();
        let ds = generate(
            &GeneratorSpec::Lgssm(LgssmGen {
                n_seq: 3,
                t_len: 4,
                ..LgssmGen::default()
            }),
            0,
        )
        .unwrap();
        cfg.data.train_fraction = 1.0;
        let (a, b) = split_data(&cfg, &ds);
        assert_eq!((a.len(), b.len()), (2, 1));
        cfg.data.train_fraction = 0.0;
        let (a, b) = split_data(&cfg, &ds);
        assert_eq!((a.len(), b.len()), (1, 2));
    }

    #[test]
    fn train_infer_metrics_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let out = run_train(&cfg).unwrap();
        assert_eq!(out.curve.len(), 2);
        for f in ["config.toml", "init.lrssm", "checkpoint.lrssm", "curve.csv"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let saved = ExperimentConfig::load(Some(&dir.path().join("config.toml")), &[]).unwrap();
        assert_eq!(saved, cfg);

        let mut ic = cfg.clone();
        ic.infer.samples = 3;
        ic.infer.max_sequences = Some(2);
        let (files, res) = run_infer(&ic).unwrap();
        assert_eq!(res.len(), 2);
        let text = std::fs::read_to_string(&files.trajectory).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 12);
        assert!(text.starts_with("seq,t,mean_0,mean_1,var_0,var_1,loglik,kl"));
        let samples = std::fs::read_to_string(&files.samples).unwrap();
        assert_eq!(samples.lines().count(), 1 + 2 * 12 * 3);

        let mut mc = cfg.clone();
        mc.eval.min_context = 4;
        mc.eval.horizon = 3;
        mc.eval.origin_stride = 4;
        mc.eval.samples = 4;
        let rep = run_metrics(&mc).unwrap();
        let f = rep.forecast.unwrap();
        assert_eq!(f.mse.len(), 3);
        assert_eq!(f.origins, 2);
        assert!(rep.latent_r2.unwrap() > 0.0);
        assert_eq!(rep.co_bps, None);
        assert!(dir.path().join("metrics.json").is_file());
    }

    #[test]
    fn resume_continues_from_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(dir.path());
        let full = {
            let mut c = cfg.clone();
            c.train.epochs = 4;
            run_train(&c).unwrap()
        };
        let other = tempfile::tempdir().unwrap();
        let mut first = cfg.clone();
        first.output_dir = other.path().to_path_buf();
        run_train(&first).unwrap();
        let mut second = first.clone();
        second.resume = Some(other.path().join("checkpoint.lrssm"));
        let resumed = run_train(&second).unwrap();
        assert_eq!(resumed.params.values, full.params.values);

        let mut bad = second.clone();
        bad.model.latent_dim = 3;
        assert!(matches!(run_train(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn filter_mode_matches_realtime_filtered_marginals() {
        let (model, params, _, _, _) = tiny_instance(4, Variant::Realtime).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = Sequence::fully_observed(DMatrix::from_fn(2, 6, |_, _| rng.random_range(-1.0..1.0)));
        let noise = pass_noise(&model, 6, 5, 3, 0);
        let got = filter(&model, &params, &seq, &noise).unwrap();
        let bound = params.bind(&Eager);
        let enc = model.encoders.encode(&Eager, &bound, &seq, &StepMask::none(6)).unwrap();
        let pass = realtime_filter(&Eager, &model, &bound, &enc, &noise, Propagation::Sampled).unwrap();
        for t in 0..6 {
            let want = &pass.steps[t].filtered;
            for (a, b) in got.trajectory.means[t].iter().zip(want.mean.iter()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
            assert_eq!(got.samples[t], pass.steps[t].filtered_samples);
            let var = lrssm::lowrank::cov_diagonal(&Eager, want);
            for (a, b) in got.trajectory.variances[t].iter().zip(&var) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forecast_horizon_zero_reproduces_smoothing() {
        let (model, params, _, _, _) = tiny_instance(5, Variant::Smoothing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = Sequence::fully_observed(DMatrix::from_fn(2, 7, |_, _| rng.random_range(-1.0..1.0)));
        let noise = pass_noise(&model, 7, 4, 0, 0);
        let s = smooth(&model, &params, &seq, &noise).unwrap();
        let f = smooth_and_forecast(&model, &params, &seq, 7, 0, &noise, &mut rng).unwrap();
        let fc = f.forecast.unwrap();
        assert_eq!(fc.samples.len(), 1);
        assert_eq!(&fc.samples[0], s.samples.last().unwrap());
        assert_eq!(fc.means[0], s.samples.last().unwrap().column_mean());
    }

    #[test]
    fn gradcheck_passes_on_tiny_instance() {
        let out = run_gradcheck(&ExperimentConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert!(o.passed, "{:?}: {:.3e}", o.variant, o.max_rel_err);
        }
    }

    #[test]
    fn missing_inputs_are_reported() {
        let mut cfg = ExperimentConfig::default();
        assert!(load_data(&cfg).is_err());
        cfg.data.path = Some(PathBuf::from("/nonexistent/data.lrssm"));
        assert!(matches!(load_data(&cfg), Err(Error::Io(_))));
        assert!(matches!(load_model(Path::new("/nonexistent/ck"), 2), Err(Error::Io(_))));
    }
}
