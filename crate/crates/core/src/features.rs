//! High-frequency features for hetero-domain alignment.
//!
//! LR source volumes yield four gradient channels; HR target volumes yield a
//! single mean-removed channel. [`reconcile`] turns either kind into a
//! standardized gradient-energy map on a common in-plane grid so the two can
//! be compared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{conv_spatial, Slice, Volume};
use crate::par;
use crate::resample::resize_volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureOrigin {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HfFeatures {
    channels: Vec<Volume>,
    origin: FeatureOrigin,
}

impl HfFeatures {
    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn origin(&self) -> FeatureOrigin {
        self.origin
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.channels[0].dims()
    }
}

/// First- and second-kernel gradient filters as `(rows, cols, taps)`:
/// horizontal `[-1, 0, 1]`, its transpose, horizontal `[-2, -1, 0, 1, 2]`, its transpose.
pub fn gradient_kernels() -> [Slice; 4] {
    let g1 = vec![-1.0, 0.0, 1.0];
    let g2 = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
    [
        Slice::new(1, 3, g1.clone()).expect("static kernel"),
        Slice::new(3, 1, g1).expect("static kernel"),
        Slice::new(1, 5, g2.clone()).expect("static kernel"),
        Slice::new(5, 1, g2).expect("static kernel"),
    ]
}

/// Gradient features of an LR source volume.
///
/// Each channel is the centred response `sum_t g[t] * x(j + t - c)` of one
/// kernel, taken per slice with circular boundaries.
pub fn extract_hf_lr(v: &Volume) -> Result<HfFeatures> {
    if v.rows() < 5 || v.cols() < 5 {
        return Err(Error::FilterTooLarge {
            support: 5,
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    let kernels = gradient_kernels();
    let channels = par::map_slice(&kernels, |g| -> Result<Volume> {
        // correlation with g is convolution with the flipped kernel
        let k = g.flipped();
        let slices = v
            .slices()
            .iter()
            .map(|s| conv_spatial(s, &k))
            .collect::<Result<Vec<_>>>()?;
        Volume::new(slices)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(HfFeatures {
        channels,
        origin: FeatureOrigin::Source,
    })
}

/// Mean-removed intensities of an HR target volume (global scalar mean).
pub fn extract_hf_hr(v: &Volume) -> Result<HfFeatures> {
    let mean = v.mean();
    let mut out = v.map(|x| x - mean);
    // second pass absorbs the rounding residue of the first
    let residue = out.mean();
    if residue != 0.0 {
        out = out.map(|x| x - residue);
    }
    Ok(HfFeatures {
        channels: vec![out],
        origin: FeatureOrigin::Target,
    })
}

/// Collapses features into one gradient-energy channel.
///
/// Source features sum their squared gradient channels. Target features
/// first pass their mean-removed channel through the same gradient kernels,
/// so both kinds measure edge strength.
pub fn collapse(f: &HfFeatures) -> Result<Volume> {
    let grads = match f.origin {
        FeatureOrigin::Source => f.clone(),
        FeatureOrigin::Target => extract_hf_lr(&f.channels[0])?,
    };
    let (rows, cols, depth) = grads.dims();
    Ok(Volume::from_fn(rows, cols, depth, |i, j, z| {
        grads
            .channels
            .iter()
            .map(|c| {
                let v = c.slice(z).get(i, j);
                v * v
            })
            .sum()
    }))
}

/// Scales a volume to zero mean and unit variance; constant volumes map to zeros.
pub fn standardize(v: &Volume) -> Volume {
    let mean = v.mean();
    let var = v.voxels().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.voxel_count() as f64;
    if var <= 0.0 {
        return v.map(|_| 0.0);
    }
    let sd = var.sqrt();
    v.map(|x| (x - mean) / sd)
}

/// Collapses, resizes to a `rows x cols` in-plane grid and standardizes.
pub fn reconcile(f: &HfFeatures, rows: usize, cols: usize) -> Result<Volume> {
    let c = collapse(f)?;
    let c = if c.rows() == rows && c.cols() == cols {
        c
    } else {
        resize_volume(&c, rows, cols)?
    };
    Ok(standardize(&c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, rows: usize, cols: usize, depth: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols * depth).map(|_| rng.random()).collect();
        Volume::from_fn(rows, cols, depth, |i, j, z| data[(z * rows + i) * cols + j])
    }

    #[test]
    fn constant_volume_has_no_gradient() {
        let f = extract_hf_lr(&Volume::filled(8, 8, 2, 0.4)).unwrap();
        assert_eq!(f.channels().len(), 4);
        assert!(f.channels().iter().all(|c| c.voxels().all(|v| v.abs() < 1e-15)));
    }

    #[test]
    fn horizontal_ramp_response() {
        let v = Volume::from_fn(8, 10, 1, |_, j, _| j as f64);
        let f = extract_hf_lr(&v).unwrap();
        for i in 0..8 {
            for j in 1..9 {
                assert_eq!(f.channels()[0].slice(0).get(i, j), 2.0);
                assert_eq!(f.channels()[1].slice(0).get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn channels_match_direct_correlation() {
        let v = random_volume(1, 9, 7, 2);
        let f = extract_hf_lr(&v).unwrap();
        for (c, g) in f.channels().iter().zip(gradient_kernels()) {
            let (ca, cb) = (g.rows() as i64 / 2, g.cols() as i64 / 2);
            for z in 0..2 {
                let s = v.slice(z);
                for i in 0..9i64 {
                    for j in 0..7i64 {
                        let mut acc = 0.0;
                        for a in 0..g.rows() as i64 {
                            for b in 0..g.cols() as i64 {
                                let si = (i + a - ca).rem_euclid(9) as usize;
                                let sj = (j + b - cb).rem_euclid(7) as usize;
                                acc += g.get(a as usize, b as usize) * s.get(si, sj);
                            }
                        }
                        assert!((c.slice(z).get(i as usize, j as usize) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn lr_extraction_is_linear() {
        let a = random_volume(2, 6, 6, 1);
        let b = random_volume(3, 6, 6, 1);
        let mix = Volume::from_fn(6, 6, 1, |i, j, z| {
            2.0 * a.slice(z).get(i, j) - 0.5 * b.slice(z).get(i, j)
        });
        let (fa, fb, fm) = (
            extract_hf_lr(&a).unwrap(),
            extract_hf_lr(&b).unwrap(),
            extract_hf_lr(&mix).unwrap(),
        );
        for ch in 0..4 {
            for ((x, y), m) in fa.channels()[ch]
                .voxels()
                .zip(fb.channels()[ch].voxels())
                .zip(fm.channels()[ch].voxels())
            {
                assert!((2.0 * x - 0.5 * y - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_volumes_are_rejected() {
        assert!(extract_hf_lr(&Volume::zeros(4, 8, 1)).is_err());
    }

    #[test]
    fn mean_removal() {
        let c = extract_hf_hr(&Volume::filled(3, 3, 2, 0.8)).unwrap();
        assert!(c.channels()[0].voxels().all(|v| v == 0.0));
        let half = Volume::from_fn(2, 2, 1, |i, _, _| i as f64);
        let h = extract_hf_hr(&half).unwrap();
        let vals: Vec<f64> = h.channels()[0].voxels().collect();
        assert_eq!(vals, vec![-0.5, -0.5, 0.5, 0.5]);
        let r = random_volume(4, 11, 13, 3);
        let h = extract_hf_hr(&r).unwrap();
        assert!(h.channels()[0].mean().abs() < 1e-12);
        let twice = extract_hf_hr(&h.channels()[0]).unwrap();
        for (a, b) in twice.channels()[0].voxels().zip(h.channels()[0].voxels()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reconcile_brings_lr_to_hr_grid() {
        let lr = extract_hf_lr(&random_volume(5, 8, 8, 2)).unwrap();
        let r = reconcile(&lr, 16, 16).unwrap();
        assert_eq!(r.dims(), (16, 16, 2));
        assert!(r.mean().abs() < 1e-12);
        let var = r.voxels().map(|x| x * x).sum::<f64>() / r.voxel_count() as f64;
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_collapse_is_gradient_energy_of_mean_removed_volume() {
        let v = random_volume(6, 9, 10, 2);
        let hr = extract_hf_hr(&v).unwrap();
        let c = collapse(&hr).unwrap();
        let g = extract_hf_lr(&hr.channels()[0]).unwrap();
        for z in 0..2 {
            for i in 0..9 {
                for j in 0..10 {
                    let e: f64 = g.channels().iter().map(|ch| ch.slice(z).get(i, j).powi(2)).sum();
                    assert_eq!(c.slice(z).get(i, j), e);
                }
            }
        }
        // a constant offset leaves the target energy unchanged
        let shifted = extract_hf_hr(&v.map(|x| x + 3.0)).unwrap();
        let cs = collapse(&shifted).unwrap();
        assert!(c.voxels().zip(cs.voxels()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn standardize_constant_is_zero() {
        assert!(standardize(&Volume::filled(3, 3, 1, 2.5)).voxels().all(|x| x == 0.0));
    }
}
