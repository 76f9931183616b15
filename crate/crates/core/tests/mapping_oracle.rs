use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weenie::csc::FeatureMapSet;
use weenie::joint::{build_mmd_weights, mapping_objective, mmd_weights_from_flags, update_mapping, MappingMatrix};

fn random_maps(rng: &mut impl Rng, k: usize, rows: usize, cols: usize) -> FeatureMapSet {
    let data = (0..k * rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMapSet::new(k, rows, cols, data).unwrap()
}

/// Columns are positions, rows are channels.
fn as_matrix(maps: &[FeatureMapSet]) -> DMatrix<f64> {
    let k = maps[0].k();
    let n: usize = maps.iter().map(|m| m.rows() * m.cols()).sum();
    let mut out = DMatrix::zeros(k, n);
    let mut col = 0;
    for m in maps {
        let p = m.rows() * m.cols();
        for c in 0..k {
            for (t, v) in m.map(c).iter().enumerate() {
                out[(c, col + t)] = *v;
            }
        }
        col += p;
    }
    out
}

/// Stationarity of the vectorized objective, solved by LU on the Kronecker system.
fn kronecker_oracle(zx: &[FeatureMapSet], zy: &[FeatureMapSet], weights: &[f64], beta: f64, gamma: f64) -> DMatrix<f64> {
    let x = as_matrix(zx);
    let y = as_matrix(zy);
    let k = x.nrows();
    let mut d = Vec::new();
    for (m, w) in zx.iter().zip(weights) {
        d.extend(std::iter::repeat_n(1.0 - w / 2.0, m.rows() * m.cols()));
    }
    let yd = &y * DMatrix::from_diagonal(&DVector::from_vec(d));
    let rhs = &yd * x.transpose();
    let xxt = &x * x.transpose();
    let eye = DMatrix::<f64>::identity(k, k);
    let lhs = xxt.transpose().kronecker(&eye) + DMatrix::<f64>::identity(k * k, k * k) * (gamma / beta);
    // column-major vec(W)
    let vec_w = lhs.lu().solve(&DVector::from_column_slice(rhs.as_slice())).unwrap();
    DMatrix::from_column_slice(k, k, vec_w.as_slice())
}

fn max_diff(w: &MappingMatrix, oracle: &DMatrix<f64>) -> f64 {
    let k = w.dim();
    (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| (w.get(i, j) - oracle[(i, j)]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn closed_form_matches_kronecker_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let k = rng.random_range(1..=8);
        let samples = rng.random_range(1..=4);
        let flags: Vec<bool> = (0..samples).map(|i| i == 0 || rng.random_bool(0.5)).collect();
        let weights = mmd_weights_from_flags(&flags).unwrap().values();
        let (rows, cols) = (rng.random_range(3..8), rng.random_range(3..8));
        let zx: Vec<_> = (0..samples).map(|_| random_maps(&mut rng, k, rows, cols)).collect();
        let zy: Vec<_> = (0..samples).map(|_| random_maps(&mut rng, k, rows, cols)).collect();
        let (beta, gamma) = (rng.random_range(0.05..2.0), rng.random_range(0.0..1.0));
        let w = update_mapping(&zx, &zy, &weights, beta, gamma).unwrap();
        let oracle = kronecker_oracle(&zx, &zy, &weights, beta, gamma);
        assert!(max_diff(&w, &oracle) < 1e-6, "{}", max_diff(&w, &oracle));
    }
}

#[test]
fn mmd_weights_are_exact_rationals() {
    for p in [1i64, 2, 3, 10] {
        // P counts every pair; the first is registered, the rest virtual
        let flags: Vec<bool> = (0..p).map(|i| i == 0).collect();
        let w = mmd_weights_from_flags(&flags).unwrap();
        assert_eq!(w.len(), p as usize);
        for (i, r) in w.ratios().iter().enumerate() {
            let expect = if i == 0 { Ratio::new(1, p) } else { Ratio::new(-1, p * p) };
            assert_eq!(*r, expect);
        }
    }
    assert!(mmd_weights_from_flags(&[false, false]).is_err());
    assert!(build_mmd_weights(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn update_is_a_minimizer(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = mmd_weights_from_flags(&[true, false, true]).unwrap().values();
        let zx: Vec<_> = (0..3).map(|_| random_maps(&mut rng, k, 4, 5)).collect();
        let zy: Vec<_> = (0..3).map(|_| random_maps(&mut rng, k, 4, 5)).collect();
        let (beta, gamma) = (0.5, 0.15);
        let w = update_mapping(&zx, &zy, &weights, beta, gamma).unwrap();
        let base = mapping_objective(&zx, &zy, &weights, &w, beta, gamma).unwrap();
        for _ in 0..20 {
            let e = w.entries().iter().map(|v| v + 1e-3 * rng.random_range(-1.0..1.0)).collect();
            let wp = MappingMatrix::new(k, e).unwrap();
            let f = mapping_objective(&zx, &zy, &weights, &wp, beta, gamma).unwrap();
            prop_assert!(f >= base - 1e-12 * base.abs().max(1.0));
        }
    }
}
