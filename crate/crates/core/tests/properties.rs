//! Randomized invariants across modules.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scrb_core::estimators::{tyler, FixedPoint};
use scrb_core::fisher::{compute_bounds, crb_schur, score_analytic};
use scrb_core::hilbert::{
    cov0, inner, project_span, residual, FunctionSample, GramPolicy, SpanBasis,
};
use scrb_core::model::{Constraint, DensityGenerator, Interest, ParamPartition, ResModel};
use scrb_core::numeric::{min_eigenvalue, rel_frobenius, select, spd_inverse};
use scrb_core::sampling::{sample_res, SampleBatch};
use scrb_core::semiparam::{scrb_on_batch, BasisFamily, SieveOptions};

fn normals(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn generator(kind: u8, n: usize) -> DensityGenerator {
    match kind % 3 {
        0 => DensityGenerator::gaussian(n).unwrap(),
        1 => DensityGenerator::student_t(4.0, n).unwrap(),
        _ => DensityGenerator::generalized_gaussian(0.5, n).unwrap(),
    }
}

fn random_model(seed: u64, n: usize, kind: u8, constraint: Constraint) -> ResModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = normals(&mut rng, n, n);
    let sigma = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
    let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    ResModel::normalized(mu, sigma, generator(kind, n), constraint).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_invariants(seed in any::<u64>(), q in 1usize..4, k in 1usize..6, m in 100usize..1500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v_all = normals(&mut rng, k + 2, m);
        let v = FunctionSample::new(v_all.rows(0, k).into_owned(), 1).unwrap();
        let c = normals(&mut rng, q, k);
        let h = FunctionSample::new(&c * v.values() + normals(&mut rng, q, m), 1).unwrap();
        let span = SpanBasis::new(v.clone(), GramPolicy::default()).unwrap();
        let big = SpanBasis::new(FunctionSample::new(v_all, 1).unwrap(), GramPolicy::default()).unwrap();

        let p = project_span(&h, &span).unwrap();
        let pp = project_span(&p, &span).unwrap();
        prop_assert!((pp.values() - p.values()).norm() <= 1e-10 * p.values().norm());

        let r = residual(&h, &span).unwrap();
        for _ in 0..10 {
            let cv = v.transform(&normals(&mut rng, q, k)).unwrap();
            prop_assert!(inner(&r, &cv).unwrap().abs() <= 1e-8 * h.norm() * cv.norm());
        }
        prop_assert!(p.norm() <= h.norm());
        prop_assert!((h.norm_sq() - p.norm_sq() - r.norm_sq()).abs() <= 1e-8 * h.norm_sq());
        prop_assert!(residual(&h, &big).unwrap().norm() <= r.norm() + 1e-10);

        let g = span.gram();
        prop_assert!((g - g.transpose()).amax() == 0.0);
        prop_assert!(min_eigenvalue(g) >= -1e-10);
        prop_assert!((g - v.values() * v.values().transpose() / m as f64).amax() <= 1e-12);
    }

    #[test]
    fn schur_matches_full_inverse(seed in any::<u64>(), d in 2usize..8, q_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = normals(&mut rng, d, d);
        let fim = &a * a.transpose() + DMatrix::identity(d, d) * 0.1;
        let q = 1 + ((d - 1) as f64 * q_frac) as usize;
        let mut idx: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let interest: Vec<usize> = idx[..q].to_vec();
        let p = ParamPartition::new(interest.clone(), d).unwrap();
        let crb = crb_schur(&fim, &p).unwrap();
        let oracle = select(&fim.clone().try_inverse().unwrap(), &interest, &interest);
        prop_assert!(rel_frobenius(&crb, &oracle) <= 1e-10);
        // the nuisance can only increase the bound
        let known = spd_inverse(&select(&fim, &interest, &interest)).unwrap();
        prop_assert!(min_eigenvalue(&(&crb - known)) >= -1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn routes_agree_on_random_models(seed in any::<u64>(), n in 1usize..4, kind in 0u8..3, det in any::<bool>(), mu_interest in any::<bool>()) {
        let constraint = if det { Constraint::Det1 } else { Constraint::TraceN };
        let m = random_model(seed, n, kind, constraint);
        let batch = sample_res(&m, 5000, seed).unwrap();
        let interest = if mu_interest || n == 1 { Interest::Mu } else { Interest::Shape };
        let p = ParamPartition::for_interest(interest, n).unwrap();
        let b = compute_bounds(&m, &batch, &p).unwrap();
        prop_assert!(b.agreement <= 1e-8, "agreement {}", b.agreement);
        prop_assert!((&b.fim - b.fim.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn sieve_is_monotone_for_random_models(seed in any::<u64>(), kind in 0u8..3, spline in any::<bool>()) {
        let m = random_model(seed, 2, kind, Constraint::TraceN);
        let batch = sample_res(&m, 8000, seed).unwrap();
        let p = ParamPartition::for_interest(Interest::MuShape, 2).unwrap();
        let family = if spline { BasisFamily::BSplineQuantile } else { BasisFamily::PolyLogT };
        let tr = scrb_on_batch(&m, &batch, &p, &[0, 1, 2, 4, 8], family, SieveOptions::default()).unwrap();
        for w in tr.scrb_k.windows(2) {
            prop_assert!(min_eigenvalue(&(&w[1] - &w[0])) >= -1e-9);
        }
        prop_assert!(rel_frobenius(&tr.scrb_k[0], &tr.parametric_crb) <= 1e-10);
    }

    #[test]
    fn tyler_equivariance(seed in any::<u64>(), n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_model(seed, n, 1, Constraint::TraceN);
        let batch = sample_res(&m, 400, seed).unwrap();
        let a = normals(&mut rng, n, n) + DMatrix::identity(n, n) * 2.0;
        prop_assume!(a.determinant().abs() > 0.1);
        let moved = SampleBatch::from_points(&a * batch.points(), 0, 0).unwrap();
        let fp = FixedPoint { tol: 1e-13, max_iter: 5000 };
        let s1 = tyler(&batch, Some(m.mu()), Constraint::TraceN, fp).unwrap();
        let s2 = tyler(&moved, Some(&(&a * m.mu())), Constraint::TraceN, fp).unwrap();
        let mapped = Constraint::TraceN.normalize(&(&a * &s1.sigma * a.transpose()));
        prop_assert!(rel_frobenius(&s2.sigma, &mapped) <= 1e-6);
    }
}

#[test]
fn scores_have_zero_mean() {
    for kind in 0..3 {
        let m = random_model(5, 3, kind, Constraint::TraceN);
        let batch = sample_res(&m, 20_000, 6).unwrap();
        let p = ParamPartition::for_interest(Interest::MuShape, 3).unwrap();
        let s = score_analytic(&m, &batch, &p).unwrap();
        let z = s.mean_zscores();
        // beyond 6 sigma is an error, 4 to 6 only worth a look
        assert!(z.amax() < 6.0, "z-scores {z}");
        assert!(cov0(s.full())
            .diagonal()
            .iter()
            .all(|v| v.is_finite() && *v > 0.0));
    }
}

#[test]
fn batches_do_not_depend_on_thread_count() {
    let m = random_model(9, 3, 1, Constraint::Det1);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let batch = sample_res(&m, 5000, 3).unwrap();
                let p = ParamPartition::for_interest(Interest::MuShape, 3).unwrap();
                let b = compute_bounds(&m, &batch, &p).unwrap();
                (batch.points().clone(), b.fim, b.crb_projection)
            })
    };
    assert_eq!(run(1), run(6));
}
