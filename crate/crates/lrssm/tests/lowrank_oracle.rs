use std::sync::Arc;

use lrssm::ad::{kernels, Backend, Eager};
use lrssm::lowrank::{
    densify, densify_pred, kl_post_pred, kl_terms_general, logdet_ratio, posterior_update, upsilon, Base,
    DiagCov, LowRankNatUpdate, PosteriorGaussian, PredictiveGaussian,
};
use lrssm_oracle as oracle;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    propagated: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    kmat: DMatrix<f64>,
}

fn random_case(seed: u64, l: usize, s: usize, r: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |scale: f64| rng.random_range(-1.0..1.0) * scale;
    Case {
        propagated: DMatrix::from_fn(l, s, |_, _| g(1.5)),
        q: DMatrix::from_fn(l, 1, |_, _| 0.05 + g(1.0).abs()),
        k: DMatrix::from_fn(l, 1, |_, _| g(2.0)),
        kmat: DMatrix::from_fn(l, r, |_, _| g(1.2)),
    }
}

fn build(c: &Case) -> (Arc<PredictiveGaussian<DMatrix<f64>>>, PosteriorGaussian<DMatrix<f64>>) {
    let o = Eager;
    let q = DiagCov::from_var(&o, &c.q).unwrap();
    let pred = Arc::new(PredictiveGaussian::from_samples(&o, &c.propagated, q).unwrap());
    let upd = LowRankNatUpdate::new(c.k.clone(), c.kmat.clone());
    let post = posterior_update(&o, Base::Predictive(pred.clone()), &upd).unwrap();
    (pred, post)
}

/// Dense predictive covariance straight from the samples.
fn dense_pred(c: &Case) -> (DVector<f64>, DMatrix<f64>) {
    let s = c.propagated.ncols() as f64;
    let m = c.propagated.column_mean();
    let mut p = DMatrix::from_diagonal(&c.q.column(0).into_owned());
    for col in c.propagated.column_iter() {
        let d = col - &m;
        p += &d * d.transpose() / s;
    }
    (m, p)
}

/// Dense information-form update.
fn dense_post(c: &Case) -> (DVector<f64>, DMatrix<f64>) {
    let (m, p) = dense_pred(c);
    let j = oracle::spd_inverse(&p).unwrap();
    let h = &j * &m + c.k.column(0);
    let cov = oracle::spd_inverse(&(j + &c.kmat * c.kmat.transpose())).unwrap();
    (&cov * h, cov)
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = 1.0 + b.abs().max();
    (a - b).abs().max() <= tol * scale
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..12, 2usize..7, 0usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn precision_mvm_inverts_covariance((seed, l, s, _r) in dims()) {
        let c = random_case(seed, l, s, 0);
        let (pred, _) = build(&c);
        let (_, p) = dense_pred(&c);
        let v = DMatrix::from_fn(l, 3, |i, j| (i as f64 * 0.7 - j as f64).sin());
        let got = pred.prec_mvm(&Eager, &v).unwrap();
        let want = oracle::spd_inverse(&p).unwrap() * &v;
        prop_assert!(close(&got, &want, 1e-9));
        prop_assert!(close(&densify_pred(&Eager, &pred), &p, 1e-12));
    }

    #[test]
    fn update_matches_information_form((seed, l, s, r) in dims()) {
        let c = random_case(seed, l, s, r);
        let (_, post) = build(&c);
        let (m, p) = dense_post(&c);
        prop_assert!(close(&post.mean, &DMatrix::from_column_slice(l, 1, m.as_slice()), 1e-8));
        prop_assert!(close(&densify(&Eager, &post), &p, 1e-9));
        let v = DMatrix::from_fn(l, 2, |i, j| (i + 2 * j) as f64 - 3.0);
        let back = post.cov_mvm(&Eager, &post.prec_mvm(&Eager, &v).unwrap()).unwrap();
        prop_assert!(close(&back, &v, 1e-9));
    }

    #[test]
    fn kl_matches_dense((seed, l, s, r) in dims()) {
        let c = random_case(seed, l, s, r);
        let (_, post) = build(&c);
        let (mbar, pbar) = dense_pred(&c);
        let (m, p) = dense_post(&c);
        let want = oracle::dense_kl(&m, &p, &mbar, &pbar).unwrap();
        let got = Eager.scalar(&kl_post_pred(&Eager, &post).unwrap());
        prop_assert!(got >= -1e-9);
        prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want.abs()), "{got} vs {want}");
        let ld = Eager.scalar(&logdet_ratio(&Eager, &post).unwrap());
        let ld_want = oracle::logdet(&pbar).unwrap() - oracle::logdet(&p).unwrap();
        prop_assert!((ld - ld_want).abs() <= 1e-8 * (1.0 + ld_want.abs()));
    }

    #[test]
    fn sampler_is_an_exact_square_root((seed, l, s, r) in dims()) {
        // The sampler is affine in (noise, w); its linear part T must satisfy T Tᵀ = P.
        let c = random_case(seed, l, s, r);
        let (_, post) = build(&c);
        let o = Eager;
        let n = s + l;
        let t_eps = kernels::add_col(
            &post.sample(&o, &DMatrix::identity(n, n), &DMatrix::zeros(r, n)).unwrap(),
            &(-&post.mean),
        );
        let t_w = kernels::add_col(
            &post.sample(&o, &DMatrix::zeros(n, r), &DMatrix::identity(r, r)).unwrap(),
            &(-&post.mean),
        );
        let t = kernels::hcat(&[&t_eps, &t_w]);
        let (_, p) = dense_post(&c);
        prop_assert!(close(&(&t * t.transpose()), &p, 1e-9));
    }

    #[test]
    fn explicit_upsilon_properties((seed, l, s, r) in (any::<u64>(), 1usize..10, 2usize..6, 1usize..5)) {
        let c = random_case(seed, l, s, r);
        let (pred, post) = build(&c);
        let chol = post.inner_chol().unwrap();
        let u = upsilon(chol).unwrap();
        for i in 0..r {
            prop_assert!(u[(i, i)] > 0.0);
            for j in i + 1..r {
                prop_assert_eq!(u[(i, j)], 0.0);
            }
        }
        let pk = pred.cov_mvm(&Eager, &c.kmat);
        let inner = DMatrix::identity(r, r) + c.kmat.transpose() * pk;
        let want = oracle::spd_inverse(&inner).unwrap();
        prop_assert!(close(&(&u * u.transpose()), &want, 1e-10));
        let ld = Eager.scalar(&logdet_ratio(&Eager, &post).unwrap());
        let from_u = -2.0 * u.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        prop_assert!((ld - from_u).abs() < 1e-9 * (1.0 + ld.abs()));
    }

    #[test]
    fn stacked_kl_to_unrelated_predictive((seed, l, s, r) in dims(), s2 in 2usize..6) {
        let o = Eager;
        let c = random_case(seed, l, s, r);
        let (_, filt) = build(&c);
        let second = random_case(seed.wrapping_add(1), l, s2, r);
        let upd = LowRankNatUpdate::new(second.k.clone(), second.kmat.clone());
        let smooth = posterior_update(&o, Base::Posterior(Arc::new(filt)), &upd).unwrap();
        let target_q = DiagCov::from_var(&o, &second.q).unwrap();
        let target = PredictiveGaussian::from_samples(&o, &second.propagated, target_q).unwrap();

        let p = densify(&o, &smooth);
        let (mt, pt) = dense_pred(&second);
        let m = DVector::from_column_slice(smooth.mean.as_slice());
        let want = oracle::dense_kl(&m, &p, &mt, &pt).unwrap();
        let got = o.scalar(&kl_terms_general(&o, &smooth, &target).unwrap().total(&o).unwrap());
        prop_assert!((got - want).abs() <= 1e-7 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn general_kl_agrees_with_direct_form((seed, l, s, r) in dims()) {
        let c = random_case(seed, l, s, r);
        let (pred, post) = build(&c);
        let a = Eager.scalar(&kl_post_pred(&Eager, &post).unwrap());
        let b = Eager.scalar(&kl_terms_general(&Eager, &post, &pred).unwrap().total(&Eager).unwrap());
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()));
    }
}

#[test]
fn diagonal_prior_update_matches_dense() {
    let o = Eager;
    let q = DMatrix::from_column_slice(3, 1, &[0.5, 2.0, 1.0]);
    let mean = DMatrix::from_column_slice(3, 1, &[0.1, -0.2, 0.3]);
    let pred = Arc::new(PredictiveGaussian::diagonal(&o, mean.clone(), DiagCov::from_var(&o, &q).unwrap()).unwrap());
    let kmat = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 0.0, 2.0]);
    let k = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, -1.0]);
    let post = posterior_update(&o, Base::Predictive(pred), &LowRankNatUpdate::new(k.clone(), kmat.clone())).unwrap();
    let p0 = DMatrix::from_diagonal(&q.column(0).into_owned());
    let j = oracle::spd_inverse(&p0).unwrap();
    let cov = oracle::spd_inverse(&(&j + &kmat * kmat.transpose())).unwrap();
    let m = &cov * (&j * &mean + &k);
    assert!(close(&post.mean, &m, 1e-12));
    assert!(close(&densify(&o, &post), &cov, 1e-12));
    let want = oracle::dense_kl(
        &DVector::from_column_slice(m.as_slice()),
        &cov,
        &DVector::from_column_slice(mean.as_slice()),
        &p0,
    )
    .unwrap();
    let got = o.scalar(&kl_post_pred(&o, &post).unwrap());
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn matches_dense_filter_step() {
    let c = random_case(7, 6, 4, 2);
    let (_, post) = build(&c);
    let noise = DMatrix::from_fn(6, 5, |i, j| ((i * 5 + j) as f64).cos());
    let step = oracle::dense_filter_step(
        &c.propagated,
        &DVector::from_column_slice(c.q.as_slice()),
        &DVector::from_column_slice(c.k.as_slice()),
        &c.kmat,
        &noise,
    )
    .unwrap();
    assert!(close(&post.mean, &DMatrix::from_column_slice(6, 1, step.mean.as_slice()), 1e-10));
    let kl = Eager.scalar(&kl_post_pred(&Eager, &post).unwrap());
    assert!((kl - step.kl).abs() < 1e-9);
}
