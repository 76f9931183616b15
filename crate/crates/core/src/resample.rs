//! Keys bicubic resampling, the LR degradation protocol and the phantom generator.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Slice, Volume};
use crate::par;

/// Keys cubic convolution parameter used throughout.
pub const KEYS_A: f64 = -0.5;

/// The Keys cubic convolution kernel with parameter `a`.
#[inline]
pub fn keys_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Precomputed 4-tap weights for resampling one axis from `len_in` to `len_out`.
struct AxisTaps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

impl AxisTaps {
    fn new(len_in: usize, len_out: usize, a: f64) -> Self {
        let ratio = len_in as f64 / len_out as f64;
        let last = len_in as i64 - 1;
        let mut index = Vec::with_capacity(len_out);
        let mut weight = Vec::with_capacity(len_out);
        for o in 0..len_out {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor() as i64;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for t in 0..4 {
                let tap = base - 1 + t as i64;
                idx[t] = tap.clamp(0, last) as usize;
                w[t] = keys_kernel(src - tap as f64, a);
            }
            index.push(idx);
            weight.push(w);
        }
        Self { index, weight }
    }
}

/// Resizes one slice to `rows x cols` with separable bicubic interpolation and
/// clamp-to-edge boundaries. No anti-alias prefilter is applied.
pub fn resize_slice(s: &Slice, rows: usize, cols: usize, a: f64) -> Result<Slice> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(format!(
            "resize target {rows}x{cols} must be positive"
        )));
    }
    if rows == s.rows() && cols == s.cols() {
        return Ok(s.clone());
    }
    let h = AxisTaps::new(s.cols(), cols, a);
    let v = AxisTaps::new(s.rows(), rows, a);
    let mut tmp = vec![0.0; s.rows() * cols];
    for i in 0..s.rows() {
        let src = &s.data()[i * s.cols()..(i + 1) * s.cols()];
        for j in 0..cols {
            let (idx, w) = (&h.index[j], &h.weight[j]);
            tmp[i * cols + j] = (0..4).map(|t| w[t] * src[idx[t]]).sum();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let (idx, w) = (&v.index[i], &v.weight[i]);
        for j in 0..cols {
            out[i * cols + j] = (0..4).map(|t| w[t] * tmp[idx[t] * cols + j]).sum();
        }
    }
    Slice::new(rows, cols, out)
}

/// Resizes every slice of `v` to `rows x cols`; the z-axis is untouched.
pub fn resize_volume(v: &Volume, rows: usize, cols: usize) -> Result<Volume> {
    let slices = par::map_slice(v.slices(), |s| resize_slice(s, rows, cols, KEYS_A));
    Volume::new(slices.into_iter().collect::<Result<Vec<_>>>()?)
}

fn scaled_dim(dim: usize, scale: f64) -> Result<usize> {
    let out = (dim as f64 * scale).round();
    if out < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "scale {scale} collapses dimension {dim}"
        )));
    }
    Ok(out as usize)
}

/// Bicubic in-plane rescale by `scale`; each dimension becomes `round(dim * scale)`.
pub fn bicubic_resize(v: &Volume, scale: f64) -> Result<Volume> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let rows = scaled_dim(v.rows(), scale)?;
    let cols = scaled_dim(v.cols(), scale)?;
    resize_volume(v, rows, cols)
}

/// Downsampling protocol used to produce LR inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    scale: f64,
}

impl DegradationSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "degradation scale must lie in (0, 1), got {scale}"
            )));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { scale: 0.5 }
    }
}

pub fn degrade(v: &Volume, spec: &DegradationSpec) -> Result<Volume> {
    bicubic_resize(v, spec.scale)
}

/// Pointwise intensity map standing in for the target modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "sigmoid-remap")]
    SigmoidRemap,
    #[serde(rename = "inverse")]
    Inverse,
    #[serde(rename = "gamma")]
    Gamma,
}

impl Modality {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Modality::SigmoidRemap => 1.0 / (1.0 + (-8.0 * (x - 0.5)).exp()),
            Modality::Inverse => 1.0 - x,
            Modality::Gamma => x.max(0.0).sqrt(),
        }
    }

    pub fn is_increasing(&self) -> bool {
        !matches!(self, Modality::Inverse)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::SigmoidRemap => "sigmoid-remap",
            Modality::Inverse => "inverse",
            Modality::Gamma => "gamma",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid-remap" => Ok(Modality::SigmoidRemap),
            "inverse" => Ok(Modality::Inverse),
            "gamma" => Ok(Modality::Gamma),
            other => Err(Error::InvalidParameter(format!(
                "unknown modality '{other}' (expected sigmoid-remap, inverse or gamma)"
            ))),
        }
    }
}

/// Parameters of a synthetic paired data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    pub depth: usize,
    pub count: usize,
    pub seed: u64,
    pub modality: Modality,
    pub ellipses: usize,
    pub ridges: usize,
    pub registered_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            depth: 4,
            count: 8,
            seed: 0,
            modality: Modality::SigmoidRemap,
            ellipses: 3,
            ridges: 2,
            registered_fraction: 1.0,
        }
    }
}

/// One generated subject pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    /// Degraded source-modality volume.
    pub source: Volume,
    /// HR target-modality volume; for unregistered pairs this belongs to another subject.
    pub target: Volume,
    /// HR source-modality volume of the same subject as `source`.
    pub source_hr: Volume,
    pub registered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSet {
    pub pairs: Vec<PhantomPair>,
    /// `partner[i]` is the index of the pair whose target shares a subject with source `i`.
    pub partner: Vec<usize>,
}

impl PhantomSet {
    /// HR target-modality ground truth for source `i`.
    pub fn ground_truth(&self, i: usize) -> &Volume {
        &self.pairs[self.partner[i]].target
    }

    pub fn registered_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.registered).count()
    }
}

/// Threshold separating background from structures in identity-modality phantoms.
pub const STRUCTURE_THRESHOLD: f64 = 0.4;

fn subject_volume(spec: &PhantomSpec, subject: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(subject as u64 + 1);
    let (m, n, t) = (spec.rows as f64, spec.cols as f64, spec.depth as f64);

    let bg_level = rng.random_range(0.18..0.26);
    let bg_amp = rng.random_range(0.03..0.07);
    let (fu, fv) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (pu, pv) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));

    struct Ellipse {
        ci: f64,
        cj: f64,
        cz: f64,
        ri: f64,
        rj: f64,
        rz: f64,
        cos: f64,
        sin: f64,
        level: f64,
    }
    let ellipses: Vec<Ellipse> = (0..spec.ellipses)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                ci: rng.random_range(0.25..0.75) * m,
                cj: rng.random_range(0.25..0.75) * n,
                cz: (t - 1.0) / 2.0 + rng.random_range(-0.5..0.5),
                ri: rng.random_range(0.1..0.3) * m,
                rj: rng.random_range(0.1..0.3) * n,
                rz: t * rng.random_range(0.9..1.6),
                cos: theta.cos(),
                sin: theta.sin(),
                level: rng.random_range(0.5..0.95),
            }
        })
        .collect();

    struct Ridge {
        pi: f64,
        pj: f64,
        ni: f64,
        nj: f64,
        level: f64,
    }
    let ridges: Vec<Ridge> = (0..spec.ridges)
        .map(|_| {
            let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ridge {
                pi: rng.random_range(0.2..0.8) * m,
                pj: rng.random_range(0.2..0.8) * n,
                ni: phi.cos(),
                nj: phi.sin(),
                level: rng.random_range(0.55..0.9),
            }
        })
        .collect();

    Volume::from_fn(spec.rows, spec.cols, spec.depth, |i, j, z| {
        let (x, y, zf) = (i as f64, j as f64, z as f64);
        let tau = std::f64::consts::TAU;
        let mut v = bg_level
            + bg_amp * (tau * (fu * x / m + pu)).sin() * (tau * (fv * y / n + pv)).cos();
        for e in &ellipses {
            let dz = (zf - e.cz) / e.rz;
            let shrink = (1.0 - dz * dz).max(0.0).sqrt();
            if shrink <= 0.0 {
                continue;
            }
            let (di, dj) = (x - e.ci, y - e.cj);
            let u = (e.cos * di + e.sin * dj) / (e.ri * shrink);
            let w = (-e.sin * di + e.cos * dj) / (e.rj * shrink);
            let r = (u * u + w * w).sqrt();
            // soft edge roughly one pixel wide
            let inside = 1.0 / (1.0 + ((r - 1.0) * e.ri.min(e.rj) * shrink * 3.0).exp());
            v = v * (1.0 - inside) + e.level * inside;
        }
        for r in &ridges {
            let d = (x - r.pi) * r.ni + (y - r.pj) * r.nj;
            v = v.max(r.level * (-d * d / (2.0 * 0.8 * 0.8)).exp());
        }
        v.clamp(0.0, 1.0)
    })
}

/// Generates paired LR source / HR target phantoms.
///
/// The first `round(registered_fraction * count)` pairs are registered. The
/// targets of the remaining pairs are shuffled among themselves, so those pairs
/// carry no usable correspondence; `partner` records the truth.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<PhantomSet> {
    if spec.count == 0 {
        return Err(Error::InvalidParameter("phantom count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.registered_fraction) {
        return Err(Error::InvalidParameter(format!(
            "registered fraction must lie in [0, 1], got {}",
            spec.registered_fraction
        )));
    }
    if spec.rows < 2 || spec.cols < 2 || spec.depth == 0 {
        return Err(Error::InvalidParameter(format!(
            "phantom size {}x{}x{} is too small",
            spec.rows, spec.cols, spec.depth
        )));
    }
    let degradation = DegradationSpec::default();
    let subjects = par::map_range(spec.count, |s| -> Result<(Volume, Volume, Volume)> {
        let hr = subject_volume(spec, s);
        let target = hr.map(|x| spec.modality.apply(x));
        let source = degrade(&hr, &degradation)?;
        Ok((source, target, hr))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let n_reg = ((spec.registered_fraction * spec.count as f64).round() as usize).min(spec.count);
    let mut target_of: Vec<usize> = (0..spec.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    target_of[n_reg..].shuffle(&mut rng);

    // pair i holds source of subject i and target of subject target_of[i]
    let mut partner = vec![0; spec.count];
    for (i, &subj) in target_of.iter().enumerate() {
        partner[subj] = i;
    }
    let pairs = (0..spec.count)
        .map(|i| PhantomPair {
            source: subjects[i].0.clone(),
            target: subjects[target_of[i]].1.clone(),
            source_hr: subjects[i].2.clone(),
            registered: i < n_reg,
        })
        .collect();
    Ok(PhantomSet { pairs, partner })
}
