use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weenie::align::{align_sets, build_kernel_matrix, kernel_value};
use weenie::features::{extract_hf_hr, extract_hf_lr};
use weenie::resample::{generate_phantoms, Modality, PhantomSpec};
use weenie::Volume;

fn shuffled(modality: Modality, seed: u64) -> (Vec<Volume>, Vec<Volume>, Vec<usize>) {
    let spec = PhantomSpec { count: 10, seed, modality, ..PhantomSpec::default() };
    let set = generate_phantoms(&spec).unwrap();
    let mut perm: Vec<usize> = (0..10).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xa5));
    let sources = set.pairs.iter().map(|p| p.source.clone()).collect();
    // target slot q holds the subject perm[q]
    let targets = perm.iter().map(|&s| set.pairs[s].target.clone()).collect();
    (sources, targets, perm)
}

#[test]
fn permutation_is_recovered_for_every_modality() {
    for modality in [Modality::SigmoidRemap, Modality::Gamma, Modality::Inverse] {
        let (sources, targets, perm) = shuffled(modality, 17);
        let pairs = align_sets(&sources, &targets, &[], 1.0).unwrap();
        for (p, pair) in pairs.iter().enumerate() {
            let q = perm.iter().position(|&s| s == p).unwrap();
            assert_eq!(pair.target, targets[q], "{modality} source {p}");
            assert!(!pair.registered && pair.kernel.is_some());
        }
    }
}

#[test]
fn registered_pairs_bypass_alignment() {
    let (sources, targets, _) = shuffled(Modality::SigmoidRemap, 3);
    let pairs = align_sets(&sources, &targets, &[(0, 9)], 1.0).unwrap();
    assert!(pairs[0].registered && pairs[0].kernel.is_none());
    assert_eq!(pairs[0].target, targets[9]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernel_matrix_entries_are_bounded_and_consistent(seed in 0u64..1000, sigma in 0.2f64..3.0) {
        let set = generate_phantoms(&PhantomSpec { count: 3, seed, ..PhantomSpec::default() }).unwrap();
        let xs: Vec<_> = set.pairs.iter().map(|p| extract_hf_lr(&p.source).unwrap()).collect();
        let ys: Vec<_> = set.pairs.iter().map(|p| extract_hf_hr(&p.target).unwrap()).collect();
        let km = build_kernel_matrix(&xs, &ys, sigma).unwrap();
        let cap = (2.0 * std::f64::consts::PI).powf(-1.5) / sigma.powi(3);
        for (p, x) in xs.iter().enumerate() {
            for (q, y) in ys.iter().enumerate() {
                let v = km.get(p, q);
                prop_assert!(v > 0.0 && v <= cap * (1.0 + 1e-12));
                prop_assert_eq!(v, kernel_value(x, y, sigma).unwrap());
            }
        }
    }
}
