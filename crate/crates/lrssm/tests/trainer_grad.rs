use lrssm::dynamics::MeanFnSpec;
use lrssm::encoders::{MaskStrategy, StepMask};
use lrssm::likelihoods::ObsSpec;
use lrssm::model::{Model, ModelSpec, OptimState};
use lrssm::params::Params;
use lrssm::sequence::Sequence;
use lrssm::smoother::{LoglikMode, PassNoise, Propagation};
use lrssm::trainer::{
    adam_step, evaluate, fit, gradcheck, loss_and_grad, masked_step, noise_rng, TrainConfig, Variant,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model(mean_fn: MeanFnSpec, obs: ObsSpec) -> Model {
    let mut spec = ModelSpec::new(2, 2);
    spec.mean_fn = mean_fn;
    spec.obs = obs;
    spec.encoder.local_hidden = vec![4];
    spec.encoder.gru_hidden = 3;
    spec.encoder.rank_local = Some(1);
    spec.encoder.rank_backward = Some(1);
    spec.encoder.head_gain = 0.5;
    Model::new(spec).unwrap()
}

/// Initial parameters nudged off their structured starting values so no
/// block sits at an exactly stationary point.
fn jittered(model: &Model, seed: u64) -> Params {
    let mut p = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for v in &mut p.values {
        *v += rng.random_range(-0.15..0.15);
    }
    p
}

fn gaussian() -> ObsSpec {
    ObsSpec::Gaussian {
        read_dim: None,
        r_init: 0.5,
    }
}

fn tiny_seq(seed: u64, counts: bool) -> Sequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(2, 3, |_, _| {
        if counts {
            rng.random_range(0..4) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    Sequence::fully_observed(y)
}

fn cfg(variant: Variant) -> TrainConfig {
    TrainConfig {
        samples: 2,
        variant,
        ..TrainConfig::default()
    }
}

fn noise(model: &Model, t_len: usize, c: &TrainConfig, seed: u64) -> PassNoise {
    PassNoise::for_model(&mut ChaCha8Rng::seed_from_u64(seed), model, t_len, c.samples, c.propagation)
}

fn check(model: &Model, params: &Params, seq: &Sequence, c: &TrainConfig) {
    let nz = noise(model, seq.len(), c, 9);
    let report = gradcheck(model, params, seq, &StepMask::none(seq.len()), &nz, c, 1e-5).unwrap();
    let groups: std::collections::BTreeSet<_> = report.blocks.iter().map(|b| b.name.split('.').next().unwrap()).collect();
    for g in ["dyn", "init", "enc_local", "enc_back", "obs"] {
        assert!(groups.contains(g), "missing group {g}");
    }
    for b in &report.blocks {
        assert!(b.rel_err < 1e-5, "{:?} {}: rel err {:.3e}\n{:?}\n{:?}", c.variant, b.name, b.rel_err, b.analytic, b.numeric);
    }
    assert!(report.blocks.iter().any(|b| b.analytic.iter().any(|v| v.abs() > 1e-3)));
}

#[test]
fn gradients_match_central_differences() {
    for variant in [Variant::Smoothing, Variant::Realtime] {
        let c = cfg(variant);
        let m = tiny_model(MeanFnSpec::ResidualMlp { hidden: vec![3] }, gaussian());
        check(&m, &jittered(&m, 1), &tiny_seq(2, false), &c);
        let m = tiny_model(MeanFnSpec::Pendulum { dt: 0.1 }, ObsSpec::Poisson { read_dim: None });
        check(&m, &jittered(&m, 3), &tiny_seq(4, true), &c);
        let m = tiny_model(MeanFnSpec::Linear, gaussian());
        check(&m, &jittered(&m, 5), &tiny_seq(6, false), &c);
    }
}

#[test]
fn gradients_match_with_exact_propagation_and_closed_form() {
    let mut c = cfg(Variant::Smoothing);
    c.propagation = Propagation::ExactLinear;
    c.loglik = LoglikMode::ClosedForm;
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    check(&m, &jittered(&m, 7), &tiny_seq(8, false), &c);
}

#[test]
fn gradients_match_with_missing_and_masked_steps() {
    let c = cfg(Variant::Smoothing);
    let m = tiny_model(MeanFnSpec::ResidualMlp { hidden: vec![3] }, gaussian());
    let p = jittered(&m, 11);
    let base = tiny_seq(12, false);
    let mut observed = DMatrix::from_element(2, 3, true);
    observed[(1, 0)] = false;
    let mut seq = Sequence::new(base.y, observed).unwrap();
    seq.delete_step(2);
    let nz = noise(&m, 3, &c, 1);
    let mask = StepMask::from_pattern(3, MaskStrategy::Local, &[false, true, false]);
    let r = gradcheck(&m, &p, &seq, &mask, &nz, &c, 1e-5).unwrap();
    assert!(r.max_rel_err() < 1e-5, "{}", r.max_rel_err());
}

#[test]
fn encoder_gradients_vanish_at_stationary_point() {
    let m = tiny_model(MeanFnSpec::ResidualMlp { hidden: vec![3] }, gaussian());
    let mut p = jittered(&m, 13);
    for b in p.layout.blocks().to_vec() {
        if b.name.starts_with("enc_local.1.") || b.name.starts_with("enc_back.head") || b.name == "obs.c" {
            for v in &mut p.values[b.offset..b.offset + b.len()] {
                *v = 0.0;
            }
        }
    }
    for variant in [Variant::Smoothing, Variant::Realtime] {
        let c = cfg(variant);
        let seq = tiny_seq(14, false);
        let (_, g) = loss_and_grad(&m, &p, &seq, &StepMask::none(3), &noise(&m, 3, &c, 2), &c).unwrap();
        for b in p.layout.blocks() {
            if b.group().starts_with("enc") {
                let worst = g[b.offset..b.offset + b.len()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
                // the real-time KL reaches zero by cancellation between two
                // log-determinant paths, so only round-off is left there
                let tol = if variant == Variant::Smoothing { 0.0 } else { 1e-12 };
                assert!(worst <= tol, "{variant:?} {}: {worst:e}", b.name);
            }
        }
    }
}

#[test]
fn dynamics_receive_gradient_through_both_terms() {
    let m = tiny_model(MeanFnSpec::ResidualMlp { hidden: vec![3] }, gaussian());
    let p = jittered(&m, 15);
    let seq = tiny_seq(16, false);
    let mut c = cfg(Variant::Smoothing);
    c.frozen = vec!["enc_local".into(), "enc_back".into()];
    let nz = noise(&m, 3, &c, 3);
    let dyn_grad = |p: &Params, c: &TrainConfig| {
        let (_, g) = loss_and_grad(&m, p, &seq, &StepMask::none(3), &nz, c).unwrap();
        let b = p.layout.blocks().iter().find(|b| b.name.starts_with("dyn.mlp")).unwrap().clone();
        let enc = p.layout.blocks().iter().filter(|b| b.group().starts_with("enc"));
        assert!(enc.clone().all(|b| g[b.offset..b.offset + b.len()].iter().all(|v| *v == 0.0)));
        g[b.offset..b.offset + b.len()].iter().map(|v| v.abs()).sum::<f64>()
    };
    assert!(dyn_grad(&p, &c) > 0.0);
    // likelihood blind to z: only the KL path is left
    let mut kl_only = p.clone();
    let cid = kl_only.layout.find("obs.c").unwrap();
    kl_only.fill(cid, 0.0);
    assert!(dyn_grad(&kl_only, &c) > 0.0);
    // no pseudo observations: KL is identically zero, only the sampled
    // trajectory carries gradient
    let mut ll_only = p.clone();
    for b in ll_only.layout.blocks().to_vec() {
        if b.name.starts_with("enc_local.1.") || b.name.starts_with("enc_back.head") {
            ll_only.values[b.offset..b.offset + b.len()].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    assert!(dyn_grad(&ll_only, &c) > 0.0);
}

#[test]
fn kl_gradient_with_exact_propagation_ignores_sample_noise() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let mut p = jittered(&m, 17);
    let cid = p.layout.find("obs.c").unwrap();
    p.fill(cid, 0.0);
    let mut c = cfg(Variant::Smoothing);
    c.propagation = Propagation::ExactLinear;
    let seq = tiny_seq(18, false);
    let g = |seed: u64, s: usize| {
        let mut c = c.clone();
        c.samples = s;
        let nz = noise(&m, 3, &c, seed);
        loss_and_grad(&m, &p, &seq, &StepMask::none(3), &nz, &c).unwrap().1
    };
    let a = g(1, 2);
    let b = g(2, 4);
    // the readout's own gradient is taken at the samples
    let obs = p.layout.blocks().iter().find(|b| b.name == "obs.c").unwrap();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        if !(obs.offset..obs.offset + obs.len()).contains(&i) {
            let name = &p.layout.blocks().iter().find(|b| b.offset <= i && i < b.offset + b.len()).unwrap().name;
            assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{name} slot {i}: {x} vs {y}");
        }
    }
}

#[test]
fn masks_are_reproducible_and_rate_bounded() {
    let seqs: Vec<_> = (0..4).map(|i| tiny_seq(i, false)).collect();
    let a = masked_step(&seqs, MaskStrategy::Pseudo, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let b = masked_step(&seqs, MaskStrategy::Pseudo, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(a, b);
    let none = masked_step(&seqs, MaskStrategy::Local, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(none.iter().all(|m| *m == StepMask::none(3)));
    let all = masked_step(&seqs, MaskStrategy::Pseudo, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(all.iter().all(|m| m.pseudo.iter().all(|x| *x) && m.local.iter().all(|x| !*x)));
}

#[test]
fn full_pseudo_mask_trains_on_prior_rollout() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let p = jittered(&m, 19);
    let c = cfg(Variant::Smoothing);
    let seq = tiny_seq(20, false);
    let mask = StepMask::from_pattern(3, MaskStrategy::Pseudo, &[true; 3]);
    let (_, g) = loss_and_grad(&m, &p, &seq, &mask, &noise(&m, 3, &c, 4), &c).unwrap();
    for b in p.layout.blocks() {
        if b.group().starts_with("enc") {
            assert!(g[b.offset..b.offset + b.len()].iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let p = jittered(&m, 21);
    let data: Vec<_> = (0..5).map(|i| tiny_seq(30 + i, false)).collect();
    let c = TrainConfig {
        lr: 0.0,
        epochs: 2,
        batch_size: 2,
        ..cfg(Variant::Realtime)
    };
    let r = fit(&m, p.clone(), None, &data, &c, None, 0).unwrap();
    assert_eq!(r.params.values, p.values);
    assert_eq!(r.curve.len(), 2);
    assert_eq!(r.optim.step, 6);
}

#[test]
fn training_is_bit_reproducible_and_improves() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let p = jittered(&m, 23);
    let data: Vec<_> = (0..6).map(|i| tiny_seq(40 + i, false)).collect();
    let c = TrainConfig {
        lr: 1e-2,
        epochs: 30,
        batch_size: 3,
        samples: 4,
        mask_rate: 0.2,
        ..TrainConfig::default()
    };
    let a = fit(&m, p.clone(), None, &data, &c, None, 0).unwrap();
    let b = fit(&m, p.clone(), None, &data, &c, None, 0).unwrap();
    assert_eq!(a.params.values, b.params.values);
    let before = evaluate(&m, &p, &data, &c, 5).unwrap();
    let after = evaluate(&m, &a.params, &data, &c, 5).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn fit_writes_checkpoint_and_curve() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let p = jittered(&m, 25);
    let data: Vec<_> = (0..3).map(|i| tiny_seq(50 + i, false)).collect();
    let dir = std::env::temp_dir().join(format!("lrssm-fit-{}", std::process::id()));
    let out = lrssm::trainer::FitOutput { dir: dir.clone() };
    let c = TrainConfig {
        epochs: 2,
        ..cfg(Variant::Smoothing)
    };
    let r = fit(&m, p, None, &data, &c, Some(&out), 0).unwrap();
    let ck = lrssm::model::Checkpoint::load(&out.checkpoint_path()).unwrap();
    assert_eq!(ck.params, r.params);
    assert_eq!(ck.epoch, 2);
    let csv = std::fs::read_to_string(out.curve_path()).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,elbo,loglik,kl,grad_norm,wall_time"));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn adam_clips_global_norm() {
    let m = tiny_model(MeanFnSpec::Linear, gaussian());
    let mut p = m.init_params(0);
    let n = p.values.len();
    let before = p.values.clone();
    let mut st = OptimState::new(n);
    let c = TrainConfig {
        clip_norm: 1.0,
        lr: 0.1,
        ..TrainConfig::default()
    };
    let g = vec![100.0; n];
    let norm = adam_step(&mut p, &g, &mut st, &c);
    assert!((norm - 100.0 * (n as f64).sqrt()).abs() < 1e-9);
    // the first bias-corrected Adam step moves every coordinate by ~lr
    for (a, b) in p.values.iter().zip(&before) {
        assert!((b - a - 0.1).abs() < 1e-6);
    }
    let _ = noise_rng(0, 0, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        TrainConfig { mask_rate: 1.5, ..TrainConfig::default() },
        TrainConfig { samples: 1, ..TrainConfig::default() },
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
    ] {
        assert!(c.validate().is_err());
    }
}
