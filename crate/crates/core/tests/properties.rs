use approx::assert_relative_eq;
use distspec::distributed::{diagnostic_split, fit_distributed, partition};
use distspec::estimator::{fit_spectral, SolverPath};
use distspec::experiments::{gen_data, hk_error, hk_error_quadrature};
use distspec::filters::FilterSpec;
use distspec::kernels::Kernel;
use distspec::rng;
use distspec::smoothness::TargetFunction;
use proptest::prelude::*;

fn any_filter() -> impl Strategy<Value = FilterSpec> {
    prop_oneof![
        Just(FilterSpec::tikhonov()),
        Just(FilterSpec::landweber()),
        Just(FilterSpec::spectral_cutoff()),
        (0.5f64..3.0).prop_map(|nu| FilterSpec::nu_method(nu).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_bounds_hold(filter in any_filter(), log_l in -6.0f64..0.0, t in 1e-9f64..=1.0) {
        let p = filter.param(10f64.powf(log_l)).unwrap();
        let g = filter.g(&p, t).unwrap();
        let r = filter.residual(&p, t).unwrap();
        let (tg_max, r_min) = match filter.kind {
            distspec::FilterKind::NuMethod { .. } => (2.0, -1.0),
            _ => (1.0, 0.0),
        };
        prop_assert!((0.0..=tg_max + 1e-12).contains(&(t * g)));
        prop_assert!((r_min - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn averaging_is_permutation_invariant(seed in 0u64..1000, m in 1usize..9) {
        let (x, y) = gen_data(&TargetFunction::quadratic_bump(), 96, 0.01, seed).unwrap();
        let f = FilterSpec::tikhonov();
        let p = f.param(1e-2).unwrap();
        let k = Kernel::sobolev_min();
        let a = fit_distributed(&k, &f, &p, &x, &y, &partition(96, m, Some(seed)).unwrap(), SolverPath::Spectral).unwrap();
        let mut locals = a.locals().to_vec();
        locals.rotate_left(m / 2);
        let b = distspec::AveragedEstimator::from_locals(locals).unwrap();
        for q in [0.1, 0.37, 0.5, 0.93] {
            prop_assert!((a.predict(q) - b.predict(q)).abs() < 1e-12);
        }
    }
}

#[test]
fn hk_quadrature_matches_exact() {
    let k = Kernel::sobolev_min();
    let target = TargetFunction::quadratic_bump();
    for (i, filter) in [FilterSpec::tikhonov(), FilterSpec::nu_method(1.0).unwrap()].iter().enumerate() {
        for s in 0..10u64 {
            let (x, y) = gen_data(&target, 200, 0.005, rng::derive_seed(3, &[i as u64, s])).unwrap();
            let e = fit_spectral(&k, filter, &filter.param(10f64.powi(-(s as i32 % 5) - 1)).unwrap(), &x, &y).unwrap();
            let exact = hk_error(&e, &target).unwrap();
            let quad = hk_error_quadrature(&e, &target).unwrap();
            assert_relative_eq!(exact, quad, max_relative = 1e-6);
        }
    }
}

/// Averaging over blocks lowers the spread of the estimate at small λ, where
/// each local fit is dominated by noise.
#[test]
fn averaging_reduces_variance() {
    let k = Kernel::sobolev_min();
    let f = FilterSpec::tikhonov();
    let p = f.param(1e-5).unwrap();
    let target = TargetFunction::quadratic_bump();
    let q = 0.3;
    let mut single = Vec::new();
    let mut avg = Vec::new();
    for s in 0..30u64 {
        let (x, y) = gen_data(&target, 256, 0.05, rng::derive_seed(11, &[s])).unwrap();
        let one = fit_distributed(&k, &f, &p, &x, &y, &partition(256, 1, None).unwrap(), SolverPath::Spectral).unwrap();
        let eight = fit_distributed(&k, &f, &p, &x, &y, &partition(256, 8, None).unwrap(), SolverPath::Spectral).unwrap();
        single.push(one.predict(q));
        avg.push(eight.predict(q));
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&avg) < var(&single), "{} vs {}", var(&avg), var(&single));
}

#[test]
fn diagnostic_split_is_consistent() {
    let k = Kernel::sobolev_min();
    let f = FilterSpec::tikhonov();
    let target = TargetFunction::quadratic_bump();
    let (x, y) = gen_data(&target, 256, 0.005, 5).unwrap();
    let part = partition(256, 4, None).unwrap();
    let mut sample = Vec::new();
    for lam in [1e-1, 1e-2, 1e-3, 1e-4] {
        let d = diagnostic_split(&k, &f, &f.param(lam).unwrap(), &x, &y, &part, &target, SolverPath::Spectral).unwrap();
        assert!(d.total_norm <= d.approximation_norm + d.sample_norm + 1e-12);
        sample.push(d.sample_norm);
    }
    // Less regularization lets more noise through.
    assert!(sample.windows(2).all(|w| w[1] >= w[0]), "{sample:?}");
}
