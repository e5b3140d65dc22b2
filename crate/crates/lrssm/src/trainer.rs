//! End-to-end learning: reverse-mode gradients of the ELBO through the whole
//! pass, Adam updates, masking schedules and finite-difference checks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Backend, Eager};
use crate::encoders::{MaskStrategy, StepMask};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, OptimState};
use crate::params::{Bound, Params};
use crate::sequence::Sequence;
use crate::smoother::{elbo, realtime_filter, variational_filter, Elbo, LoglikMode, PassNoise, Propagation};

/// Which recursion the objective is built on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Smoothing,
    Realtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per step.
    pub samples: usize,
    pub mask_strategy: MaskStrategy,
    pub mask_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub variant: Variant,
    pub propagation: Propagation,
    pub loglik: LoglikMode,
    /// Parameter groups (`dyn`, `init`, `enc_local`, `enc_back`, `obs`)
    /// held fixed during training.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 16,
            samples: 8,
            mask_strategy: MaskStrategy::Local,
            mask_rate: 0.0,
            clip_norm: 10.0,
            seed: 0,
            variant: Variant::Smoothing,
            propagation: Propagation::Sampled,
            loglik: LoglikMode::MonteCarlo,
            frozen: vec![],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("train config: {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam moments must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.samples == 0 || (self.propagation == Propagation::Sampled && self.samples < 2) {
            return bad("sampled propagation needs at least 2 samples");
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask_rate must lie in [0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }

    fn trainable(&self, group: &str) -> bool {
        !self.frozen.iter().any(|g| g == group)
    }
}

/// Bernoulli(`rate`) step masks, one per sequence.
pub fn masked_step(seqs: &[Sequence], strategy: MaskStrategy, rate: f64, rng: &mut impl Rng) -> Vec<StepMask> {
    seqs.iter()
        .map(|s| {
            let pattern: Vec<bool> = (0..s.len()).map(|_| rate > 0.0 && rng.random::<f64>() < rate).collect();
            StepMask::from_pattern(s.len(), strategy, &pattern)
        })
        .collect()
}

/// ELBO of one sequence on any backend: encode, run the pass, assemble.
pub fn sequence_elbo<O: Backend>(
    o: &O,
    model: &Model,
    p: &Bound<O::M>,
    seq: &Sequence,
    mask: &StepMask,
    noise: &PassNoise,
    cfg: &TrainConfig,
) -> Result<Elbo<O::M>> {
    let enc = model.encoders.encode(o, p, seq, mask)?;
    match cfg.variant {
        Variant::Smoothing => {
            let pass = variational_filter(o, model, p, &enc.updates, noise, cfg.propagation)?;
            elbo(o, model, p, &pass, seq, cfg.loglik)
        }
        Variant::Realtime => {
            let pass = realtime_filter(o, model, p, &enc, noise, cfg.propagation)?;
            elbo(o, model, p, &pass, seq, cfg.loglik)
        }
    }
}

/// `−ELBO` and its gradient with respect to every parameter (zeros for frozen
/// groups).
pub fn loss_and_grad(
    model: &Model,
    params: &Params,
    seq: &Sequence,
    mask: &StepMask,
    noise: &PassNoise,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let tape = crate::ad::Tape::new();
    let bound = params.bind_with(&tape, |b| cfg.trainable(b.group()));
    let e = sequence_elbo(&tape, model, &bound, seq, mask, noise, cfg)?;
    let loss = tape.neg(&e.total);
    let value = tape.scalar(&loss);
    if !value.is_finite() {
        return Err(first_bad_step(model, params, seq, mask, noise, cfg));
    }
    let grads = tape.gradients(loss);
    let g = bound.flat_gradient(&params.layout, &grads);
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        let block = params.layout.blocks().iter().find(|b| b.offset <= i && i < b.offset + b.len());
        let name = block.map_or("?", |b| b.name.as_str());
        let inner = Error::Invalid(format!("non-finite gradient in parameter block {name}"));
        return Err(match first_bad_step(model, params, seq, mask, noise, cfg) {
            Error::AtStep { step, .. } => inner.at_step(step),
            _ => inner,
        });
    }
    Ok((value, g))
}

/// Locates the first step whose ELBO contribution is not finite.
fn first_bad_step(
    model: &Model,
    params: &Params,
    seq: &Sequence,
    mask: &StepMask,
    noise: &PassNoise,
    cfg: &TrainConfig,
) -> Error {
    let bound = params.bind(&Eager);
    let run = || -> Result<Vec<(f64, f64)>> {
        let enc = model.encoders.encode(&Eager, &bound, seq, mask)?;
        let (ll, kl) = match cfg.variant {
            Variant::Smoothing => {
                let pass = variational_filter(&Eager, model, &bound, &enc.updates, noise, cfg.propagation)?;
                crate::smoother::step_terms(model, params, &pass, seq)?
            }
            Variant::Realtime => {
                let pass = realtime_filter(&Eager, model, &bound, &enc, noise, cfg.propagation)?;
                crate::smoother::step_terms(model, params, &pass, seq)?
            }
        };
        Ok(ll.into_iter().zip(kl).collect())
    };
    match run() {
        Err(e) => e,
        Ok(terms) => match terms.iter().position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            Some(t) => Error::NonFinite { what: "ELBO term" }.at_step(t),
            None => Error::NonFinite { what: "gradient" },
        },
    }
}

/// Per-block comparison of reverse-mode and central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub loss: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.rel_err).fold(0.0, f64::max)
    }
}

/// Gradient norms below this are treated as zero when forming relative
/// errors.
pub const GRAD_ZERO: f64 = 1e-7;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < GRAD_ZERO {
        diff / GRAD_ZERO
    } else {
        diff / scale
    }
}

/// Central differences of `−ELBO` with step `h` against [`loss_and_grad`].
pub fn gradcheck(
    model: &Model,
    params: &Params,
    seq: &Sequence,
    mask: &StepMask,
    noise: &PassNoise,
    cfg: &TrainConfig,
    h: f64,
) -> Result<GradReport> {
    let (loss, g) = loss_and_grad(model, params, seq, mask, noise, cfg)?;
    let eval = |p: &Params| -> Result<f64> {
        let e = sequence_elbo(&Eager, model, &p.bind(&Eager), seq, mask, noise, cfg)?;
        Ok(-e.total[(0, 0)])
    };
    let mut blocks = Vec::new();
    for b in params.layout.blocks() {
        if !cfg.trainable(b.group()) {
            continue;
        }
        let mut numeric = Vec::with_capacity(b.len());
        for i in b.offset..b.offset + b.len() {
            let mut p = params.clone();
            p.values[i] = params.values[i] + h;
            let up = eval(&p)?;
            p.values[i] = params.values[i] - h;
            let down = eval(&p)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic = g[b.offset..b.offset + b.len()].to_vec();
        blocks.push(BlockCheck {
            name: b.name.clone(),
            rel_err: rel_err(&analytic, &numeric),
            analytic,
            numeric,
        });
    }
    Ok(GradReport { loss, blocks })
}

/// One Adam step with global gradient-norm clipping; returns the pre-clip
/// norm.
pub fn adam_step(params: &mut Params, grad: &[f64], state: &mut OptimState, cfg: &TrainConfig) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, x) in params.values.iter_mut().enumerate() {
        let g = grad[i] * scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    norm
}

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Deterministic per-(epoch, sequence) generator.
pub fn noise_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// One row of the training curve; ELBO values are per time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub loglik: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Params,
    pub optim: OptimState,
    pub curve: Vec<EpochRecord>,
}

/// Where [`fit`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub dir: PathBuf,
}

impl FitOutput {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.lrssm")
    }

    pub fn curve_path(&self) -> PathBuf {
        self.dir.join("curve.csv")
    }
}

fn write_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,elbo,loglik,kl,grad_norm,wall_time")?;
    for r in curve {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.elbo, r.loglik, r.kl, r.grad_norm, r.wall_time
        )?;
    }
    Ok(())
}

struct BatchResult {
    loss: f64,
    grad: Vec<f64>,
    loglik: f64,
    kl: f64,
}

fn batch_gradient(
    model: &Model,
    params: &Params,
    seqs: &[(usize, &Sequence)],
    masks: &[StepMask],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<BatchResult> {
    let parts: Vec<Result<(f64, Vec<f64>, f64, f64)>> = seqs
        .par_iter()
        .zip(masks.par_iter())
        .map(|((idx, seq), mask)| {
            let mut rng = noise_rng(cfg.seed, epoch, *idx);
            let noise = PassNoise::for_model(&mut rng, model, seq.len(), cfg.samples, cfg.propagation);
            let (loss, grad) = loss_and_grad(model, params, seq, mask, &noise, cfg)
                .map_err(|e| Error::Invalid(format!("sequence {idx}: {e}")))?;
            let e = sequence_elbo(&Eager, model, &params.bind(&Eager), seq, mask, &noise, cfg)?;
            Ok((loss, grad, e.loglik[(0, 0)], e.kl[(0, 0)]))
        })
        .collect();
    let steps: usize = seqs.iter().map(|(_, s)| s.len()).sum();
    let w = 1.0 / steps as f64;
    let mut out = BatchResult {
        loss: 0.0,
        grad: vec![0.0; params.values.len()],
        loglik: 0.0,
        kl: 0.0,
    };
    for part in parts {
        let (loss, grad, ll, kl) = part?;
        out.loss += loss * w;
        out.loglik += ll * w;
        out.kl += kl * w;
        for (acc, g) in out.grad.iter_mut().zip(grad) {
            *acc += g * w;
        }
    }
    Ok(out)
}

/// Trains on `data`. With `output` set, a checkpoint and the curve are
/// written after every epoch; on a numeric failure the last good state is
/// saved before the error is returned.
pub fn fit(
    model: &Model,
    init: Params,
    optim: Option<OptimState>,
    data: &[Sequence],
    cfg: &TrainConfig,
    output: Option<&FitOutput>,
    start_epoch: usize,
) -> Result<FitResult> {
    cfg.validate()?;
    model.check_params(&init)?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    for s in data {
        model.obs.validate(s)?;
    }
    let mut params = init;
    let mut optim = optim.unwrap_or_else(|| OptimState::new(params.values.len()));
    let mut curve = Vec::new();
    let t0 = Instant::now();
    let save = |params: &Params, optim: &OptimState, epoch: usize, curve: &[EpochRecord]| -> Result<()> {
        if let Some(out) = output {
            std::fs::create_dir_all(&out.dir)?;
            let ck = Checkpoint {
                spec: model.spec.clone(),
                params: params.clone(),
                optim: Some(optim.clone()),
                epoch,
            };
            ck.save(&out.checkpoint_path())?;
            write_curve(&out.curve_path(), curve)?;
        }
        Ok(())
    };
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = noise_rng(cfg.seed ^ SHUFFLE_SALT, epoch, usize::MAX >> 32);
        order.shuffle(&mut rng);
        let (mut elbo_sum, mut ll_sum, mut kl_sum, mut gn_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<(usize, &Sequence)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            let plain: Vec<Sequence> = seqs.iter().map(|(_, s)| (*s).clone()).collect();
            let masks = masked_step(&plain, cfg.mask_strategy, cfg.mask_rate, &mut rng);
            let res = match batch_gradient(model, &params, &seqs, &masks, epoch, cfg) {
                Ok(r) => r,
                Err(e) => {
                    save(&params, &optim, epoch, &curve)?;
                    return Err(Error::Invalid(format!("epoch {epoch}: {e}")));
                }
            };
            gn_sum += adam_step(&mut params, &res.grad, &mut optim, cfg);
            elbo_sum -= res.loss;
            ll_sum += res.loglik;
            kl_sum += res.kl;
            batches += 1;
        }
        let nb = batches as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            elbo: elbo_sum / nb,
            loglik: ll_sum / nb,
            kl: kl_sum / nb,
            grad_norm: gn_sum / nb,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} elbo/step {:.4} loglik {:.4} kl {:.4} |g| {:.3e}",
            rec.epoch,
            rec.elbo,
            rec.loglik,
            rec.kl,
            rec.grad_norm
        );
        curve.push(rec);
        save(&params, &optim, epoch + 1, &curve)?;
    }
    Ok(FitResult { params, optim, curve })
}

/// Mean per-step ELBO over `data` with fresh noise from `seed`.
pub fn evaluate(model: &Model, params: &Params, data: &[Sequence], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let bound = params.bind(&Eager);
    let parts: Vec<Result<f64>> = data
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = noise_rng(seed, 0, i);
            let noise = PassNoise::for_model(&mut rng, model, seq.len(), cfg.samples, cfg.propagation);
            let e = sequence_elbo(&Eager, model, &bound, seq, &StepMask::none(seq.len()), &noise, cfg)?;
            Ok(e.total[(0, 0)])
        })
        .collect();
    let steps: usize = data.iter().map(|s| s.len()).sum();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / steps as f64)
}
