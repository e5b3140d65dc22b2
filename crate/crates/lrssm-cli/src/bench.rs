//! Wall-time scaling of the structured pass against a dense O(L³) filter.

use std::time::Instant;

use lrssm::ad::Eager;
use lrssm::dynamics::MeanFnSpec;
use lrssm::lowrank::LowRankNatUpdate;
use lrssm::model::{Model, ModelSpec};
use lrssm::smoother::{variational_filter, PassNoise, Propagation};
use lrssm::{Error, Result};
use lrssm_oracle::dense_filter_step;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::BenchConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: &'static str,
    pub latent_dim: usize,
    pub steps: usize,
    pub seconds_per_step: f64,
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn bench_model(cfg: &BenchConfig, l: usize, seed: u64) -> Result<(Model, lrssm::params::Params)> {
    let mut spec = ModelSpec::new(l, 1);
    spec.mean_fn = MeanFnSpec::ResidualMlp {
        hidden: vec![cfg.hidden],
    };
    spec.encoder.local_hidden = vec![];
    spec.encoder.gru_hidden = 1;
    spec.encoder.rank_local = Some(1);
    spec.encoder.rank_backward = Some(1);
    let model = Model::new(spec)?;
    let mut p = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in p.layout.blocks().to_vec() {
        if b.name.starts_with("dyn.mlp") && b.name.ends_with(".w") {
            let id = p.layout.find(&b.name).expect("block");
            p.init_scaled_normal(id, 0.5, &mut rng);
        }
    }
    Ok((model, p))
}

fn updates(rng: &mut ChaCha8Rng, l: usize, r: usize, t_len: usize) -> Vec<LowRankNatUpdate<DMatrix<f64>>> {
    (0..t_len)
        .map(|_| LowRankNatUpdate::new(randn(rng, l, 1) * 0.1, randn(rng, l, r) * (0.3 / (l as f64).sqrt())))
        .collect()
}

/// Seconds per step of the structured pass (best of `repeats`).
pub fn time_structured(cfg: &BenchConfig, l: usize, seed: u64) -> Result<f64> {
    let (model, p) = bench_model(cfg, l, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let upd = updates(&mut rng, l, cfg.rank, cfg.t_len);
    let noise = PassNoise::draw(&mut rng, cfg.t_len, cfg.samples + l, cfg.rank, cfg.samples);
    let bound = p.bind(&Eager);
    let mut best = f64::INFINITY;
    for _ in 0..cfg.repeats.max(1) {
        let t0 = Instant::now();
        let pass = variational_filter(&Eager, &model, &bound, &upd, &noise, Propagation::Sampled)?;
        best = best.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(&pass);
    }
    Ok(best / cfg.t_len as f64)
}

/// Seconds per step of the dense filter, run until the time budget is spent.
pub fn time_dense(cfg: &BenchConfig, l: usize, seed: u64) -> Result<(usize, f64)> {
    let (model, p) = bench_model(cfg, l, seed)?;
    let bound = p.bind(&Eager);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let upd = updates(&mut rng, l, cfg.rank, cfg.t_len);
    let q = DVector::from_element(l, model.spec.q_init);
    let mut z = randn(&mut rng, l, cfg.samples);
    let t0 = Instant::now();
    let mut steps = 0;
    while steps < cfg.t_len {
        let pushed = model.dynamics.mean_fn(&Eager, &bound, &z);
        let u = &upd[steps];
        let k = DVector::from_column_slice(u.k.as_ref().expect("k").as_slice());
        let noise = randn(&mut rng, l, cfg.samples);
        let step = dense_filter_step(&pushed, &q, &k, u.factor.as_ref().expect("K"), &noise)
            .map_err(|e| Error::Invalid(format!("dense baseline: {e}")))?;
        z = step.samples;
        steps += 1;
        if t0.elapsed().as_secs_f64() > cfg.dense_budget_secs {
            break;
        }
    }
    Ok((steps, t0.elapsed().as_secs_f64() / steps as f64))
}

pub fn run_benchmark(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    if cfg.latent_dims.is_empty() || cfg.t_len == 0 || cfg.samples < 2 || cfg.rank == 0 {
        return Err(Error::Invalid("benchmark needs latent dims, t_len > 0, samples >= 2, rank > 0".into()));
    }
    let mut rows = Vec::new();
    for &l in &cfg.latent_dims {
        let s = time_structured(cfg, l, seed)?;
        log::info!("structured L={l}: {s:.3e} s/step");
        rows.push(BenchRow {
            method: "structured",
            latent_dim: l,
            steps: cfg.t_len,
            seconds_per_step: s,
        });
        if cfg.dense {
            let (steps, d) = time_dense(cfg, l, seed)?;
            log::info!("dense L={l}: {d:.3e} s/step over {steps} steps");
            rows.push(BenchRow {
                method: "dense",
                latent_dim: l,
                steps,
                seconds_per_step: d,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of log(time) against log(L) for one method.
pub fn loglog_slope(rows: &[BenchRow], method: &str) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.method == method)
        .map(|r| ((r.latent_dim as f64).ln(), r.seconds_per_step.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

pub fn write_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
