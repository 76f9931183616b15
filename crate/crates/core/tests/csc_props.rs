use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weenie::csc::{
    csc_objective, encode, encode_warm, reconstruct, reconstruct_spatial, soft_threshold, update_filters,
    FeatureMapSet, FilterBank, SolverConfig,
};
use weenie::quality::psnr_slice;

fn planted(rng: &mut impl Rng, k: usize, rows: usize, cols: usize, density: f64) -> FeatureMapSet {
    let data = (0..k * rows * cols)
        .map(|_| if rng.random_bool(density) { rng.random_range(-1.0..1.0) } else { 0.0 })
        .collect();
    FeatureMapSet::new(k, rows, cols, data).unwrap()
}

#[test]
fn planted_codes_are_reconstructed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fb = FilterBank::random(4, 5, &mut rng).unwrap();
    let maps = planted(&mut rng, 4, 32, 32, 0.01);
    let s = reconstruct(&fb, &maps).unwrap();
    let cfg = SolverConfig { lambda: 0.01, max_iters: 300, tol: 1e-6, ..SolverConfig::default() };
    let enc = encode(&s, &fb, &cfg).unwrap();
    let r = reconstruct(&fb, &enc.maps).unwrap();
    let peak = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(psnr_slice(&r, &s, peak).unwrap() > 30.0);
}

#[test]
fn spectral_and_spatial_reconstruction_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fb = FilterBank::random(3, 5, &mut rng).unwrap();
    let maps = planted(&mut rng, 3, 13, 17, 0.2);
    let a = reconstruct(&fb, &maps).unwrap();
    let b = reconstruct_spatial(&fb, &maps).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn encoding_never_exceeds_the_zero_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fb = FilterBank::random(6, 5, &mut rng).unwrap();
    let s = weenie::Slice::from_fn(20, 20, |_, _| rng.random_range(0.0..1.0));
    let cfg = SolverConfig::default();
    let enc = encode(&s, &fb, &cfg).unwrap();
    let zero = csc_objective(&s, &fb, &FeatureMapSet::zeros(6, 20, 20), cfg.lambda).unwrap();
    assert!(enc.objective <= zero);
    let again = encode_warm(&s, &fb, &cfg, Some(&enc.maps)).unwrap();
    assert!(again.objective <= enc.objective + 1e-12);
}

#[test]
fn large_lambda_gives_zero_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let fb = FilterBank::random(2, 3, &mut rng).unwrap();
    let s = weenie::Slice::from_fn(10, 10, |_, _| rng.random_range(0.0..1.0));
    // any nonzero code costs more in l1 than it can save in the quadratic term
    let cfg = SolverConfig { lambda: 1e3, ..SolverConfig::default() };
    assert!(encode(&s, &fb, &cfg).unwrap().maps.is_zero());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_threshold_is_the_l1_prox(v in proptest::collection::vec(-5.0f64..5.0, 1..20), t in 0.0f64..2.0) {
        let out = soft_threshold(&v, t).unwrap();
        for (x, y) in v.iter().zip(&out) {
            prop_assert!(y.abs() <= x.abs());
            prop_assert!((x - y).abs() <= t + 1e-15);
            if x.abs() <= t { prop_assert_eq!(*y, 0.0); } else { prop_assert_eq!(y.signum(), x.signum()); }
            // prox optimality: y minimizes 1/2 (u - x)^2 + t |u| against nearby points
            let f = |u: f64| 0.5 * (u - x) * (u - x) + t * u.abs();
            for du in [-1e-3, 1e-3] {
                prop_assert!(f(*y) <= f(y + du) + 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn filter_update_keeps_unit_ball_and_descends(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fb = FilterBank::random(3, 5, &mut rng).unwrap();
        let slices: Vec<_> = (0..2)
            .map(|_| weenie::Slice::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        let maps: Vec<_> = slices.iter().map(|s| encode(s, &fb, &SolverConfig::default()).unwrap().maps).collect();
        let before: f64 = slices.iter().zip(&maps).map(|(s, m)| csc_objective(s, &fb, m, 0.0).unwrap()).sum();
        let next = update_filters(&slices, &maps, &fb).unwrap();
        let after: f64 = slices.iter().zip(&maps).map(|(s, m)| csc_objective(s, &next, m, 0.0).unwrap()).sum();
        prop_assert!(next.max_norm() <= 1.0 + 1e-9);
        prop_assert!(after <= before + 1e-9 * before);
    }
}
