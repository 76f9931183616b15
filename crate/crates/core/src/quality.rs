//! PSNR and SSIM, computed per slice and averaged.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{Slice, Volume};
use crate::par;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Volume, b: &Volume) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_peak(peak: f64) -> Result<()> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be > 0, got {peak}")));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10 log10(peak^2 / MSE)` over all voxels; infinite when the volumes are identical.
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    check_peak(peak)?;
    let se: f64 = a.voxels().zip(b.voxels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(se / a.voxel_count() as f64, peak))
}

pub fn psnr_slice(a: &Slice, b: &Slice, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("slices differ in size".into()));
    }
    check_peak(peak)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(psnr_from_mse(se / a.len() as f64, peak))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM of one slice pair over the fully overlapping windows.
pub fn ssim_slice(a: &Slice, b: &Slice, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch("slices differ in size".into()));
    }
    check_peak(peak)?;
    if a.rows() < SSIM_WINDOW || a.cols() < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let out_r = a.rows() - SSIM_WINDOW + 1;
    let out_c = a.cols() - SSIM_WINDOW + 1;
    let mut total = 0.0;
    for i in 0..out_r {
        for j in 0..out_c {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, gu) in g.iter().enumerate() {
                for (v, gv) in g.iter().enumerate() {
                    let wgt = gu * gv;
                    let x = a.get(i + u, j + v);
                    let y = b.get(i + u, j + v);
                    ma += wgt * x;
                    mb += wgt * y;
                    saa += wgt * x * x;
                    sbb += wgt * y * y;
                    sab += wgt * (x * y);
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (out_r * out_c) as f64)
}

/// Mean of the per-slice SSIM values.
pub fn ssim(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    check_dims(a, b)?;
    let per = ssim_per_slice(a, b, peak)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn ssim_per_slice(a: &Volume, b: &Volume, peak: f64) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..a.depth()).collect();
    par::map_slice(&idx, |&z| ssim_slice(a.slice(z), b.slice(z), peak))
        .into_iter()
        .collect()
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceMetrics {
    pub index: usize,
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Volume-level PSNR and SSIM with a per-slice breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub slices: Vec<SliceMetrics>,
}

pub fn evaluate(pred: &Volume, reference: &Volume, peak: f64) -> Result<MetricReport> {
    check_dims(pred, reference)?;
    let per_ssim = ssim_per_slice(pred, reference, peak)?;
    let slices = per_ssim
        .iter()
        .enumerate()
        .map(|(z, &s)| {
            Ok(SliceMetrics {
                index: z,
                psnr_db: psnr_slice(pred.slice(z), reference.slice(z), peak)?,
                ssim: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        psnr_db: psnr(pred, reference, peak)?,
        ssim: per_ssim.iter().sum::<f64>() / per_ssim.len() as f64,
        slices,
    })
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
    fn psnr_examples() {
        let a = random_volume(1, 12, 12, 2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Volume::zeros(12, 12, 1), 1.0).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let a = random_volume(2, 9, 13, 3);
        let b = random_volume(3, 9, 13, 3);
        let xs: Vec<f64> = a.voxels().collect();
        let ys: Vec<f64> = b.voxels().collect();
        let diffs: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - y).collect();
        let mut mse = 0.0;
        for d in &diffs {
            mse += d * d / diffs.len() as f64;
        }
        let expect = -10.0 * mse.log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_case() {
        let a = random_volume(4, 16, 14, 2);
        let b = random_volume(5, 16, 14, 2);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        let (c, d) = (0.4, 0.1);
        let x = Volume::filled(12, 12, 1, c);
        let y = Volume::filled(12, 12, 1, c + d);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let expect = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        assert!((ssim(&x, &y, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(&Volume::zeros(10, 12, 1), &Volume::zeros(10, 12, 1), 1.0).is_err());
    }

    #[test]
    fn report_serializes_infinity_as_string() {
        let a = random_volume(6, 12, 12, 2);
        let r = evaluate(&a, &a, 1.0).unwrap();
        let j = serde_json::to_value(&r).unwrap();
        assert_eq!(j["psnr_db"], "inf");
        assert_eq!(j["slices"].as_array().unwrap().len(), 2);
        assert_eq!(r.ssim, 1.0);
    }
}
