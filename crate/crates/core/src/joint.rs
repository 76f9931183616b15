//! Joint training of source and target filter banks and the mapping between
//! their feature maps.
//!
//! Each outer iteration runs three steps: coupled map inference for every
//! sample, filter learning for both banks, and the closed-form mapping update.
//! Slices are coded with their mean removed; a linear [`IntensityMap`] fitted
//! on the slice means restores the target intensity level at synthesis time.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{alignment_residual, TrainingPair};
use crate::csc::{
    encode_coupled, reconstruct_spatial, update_filters_with, CouplingParams, FeatureMapSet,
    FilterBank, FilterUpdateConfig, SolverConfig,
};
use crate::error::{Error, Result};
use crate::grid::{pad_periodic, Slice, Volume};
use crate::linalg;
use crate::par;
use crate::resample::resize_volume;

/// `K x K` channel-mixing matrix applied at every spatial position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl MappingMatrix {
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("mapping dimension must be >= 1".into()));
        }
        if entries.len() != k * k {
            return Err(Error::DimensionMismatch(format!(
                "{k}x{k} mapping needs {} entries, got {}",
                k * k,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mapping matrix"));
        }
        Ok(Self { k, entries })
    }

    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        (0..k).for_each(|i| entries[i * k + i] = 1.0);
        Self { k, entries }
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            entries: vec![0.0; k * k],
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    /// `W^T W`.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.k;
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] = (0..k).map(|r| self.entries[r * k + i] * self.entries[r * k + j]).sum();
            }
        }
        g
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }
}

/// Per-pair weights: `1/P` for registered pairs, `-1/P^2` for virtual ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmdWeights {
    weights: Vec<Ratio<i64>>,
}

impl MmdWeights {
    pub fn ratios(&self) -> &[Ratio<i64>] {
        &self.weights
    }

    pub fn values(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|r| *r.numer() as f64 / *r.denom() as f64)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn build_mmd_weights(pairs: &[TrainingPair]) -> Result<MmdWeights> {
    let flags: Vec<bool> = pairs.iter().map(|p| p.registered).collect();
    mmd_weights_from_flags(&flags)
}

/// [`build_mmd_weights`] from registration flags alone.
pub fn mmd_weights_from_flags(registered: &[bool]) -> Result<MmdWeights> {
    if registered.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    if !registered.iter().any(|&r| r) {
        return Err(Error::InvalidParameter(
            "at least one registered pair is required".into(),
        ));
    }
    let p = i64::try_from(registered.len())
        .map_err(|_| Error::InvalidParameter("too many pairs".into()))?;
    let weights = registered
        .iter()
        .map(|&r| {
            if r {
                Ratio::new(1, p)
            } else {
                Ratio::new(-1, p * p)
            }
        })
        .collect();
    Ok(MmdWeights { weights })
}

fn check_stacks(zx: &[FeatureMapSet], zy: &[FeatureMapSet], weights: &[f64]) -> Result<usize> {
    let first = zx.first().ok_or(Error::Empty("feature maps"))?;
    let k = first.k();
    if zx.len() != zy.len() || zx.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source map sets, {} target map sets, {} weights",
            zx.len(),
            zy.len(),
            weights.len()
        )));
    }
    for (a, b) in zx.iter().zip(zy) {
        if a.k() != k || b.k() != k || a.data().len() != b.data().len() {
            return Err(Error::DimensionMismatch(
                "source and target maps must share filter count and size".into(),
            ));
        }
    }
    Ok(k)
}

/// `sum_s c_s A_s B_s^T` for channel stacks, as a `K x K` matrix.
fn cross_gram(a: &[FeatureMapSet], b: &[FeatureMapSet], coef: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    par::for_each_chunk(&mut out, k, |i, row| {
        for ((sa, sb), &c) in a.iter().zip(b).zip(coef) {
            if c == 0.0 {
                continue;
            }
            let ai = sa.map(i);
            for (j, r) in row.iter_mut().enumerate() {
                let dot: f64 = ai.iter().zip(sb.map(j)).map(|(x, y)| x * y).sum();
                *r += c * dot;
            }
        }
    });
    out
}

/// Closed-form mapping update
/// `W = (Zy Zx^T - 1/2 Zy D Zx^T)(Zx Zx^T + gamma/beta I)^-1`,
/// where `D` broadcasts each sample's MMD weight over its positions.
pub fn update_mapping(
    zx: &[FeatureMapSet],
    zy: &[FeatureMapSet],
    weights: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<MappingMatrix> {
    let k = check_stacks(zx, zy, weights)?;
    if !(beta > 0.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "mapping update needs beta > 0 and gamma >= 0, got beta={beta}, gamma={gamma}"
        )));
    }
    let ones = vec![1.0; zx.len()];
    let mut gram = cross_gram(zx, zx, &ones, k);
    (0..k).for_each(|i| gram[i * k + i] += gamma / beta);
    let coef: Vec<f64> = weights.iter().map(|m| 1.0 - 0.5 * m).collect();
    // rows of B = sum (1 - m/2) Zy Zx^T
    let b = cross_gram(zy, zx, &coef, k);
    linalg::cholesky(&mut gram, k)?;
    // W M = B with M symmetric: solve M w_i = b_i for each row
    let mut entries = b;
    for row in entries.chunks_mut(k) {
        linalg::cholesky_solve(&gram, k, row);
    }
    MappingMatrix::new(k, entries)
}

/// The part of the joint objective that depends on `W`:
/// `beta sum ||Zy - W Zx||^2 + gamma ||W||^2 + beta sum_s m_s <Zy, W Zx>`.
pub fn mapping_objective(
    zx: &[FeatureMapSet],
    zy: &[FeatureMapSet],
    weights: &[f64],
    w: &MappingMatrix,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    check_stacks(zx, zy, weights)?;
    let mut total = gamma * w.frobenius_sq();
    for ((a, b), m) in zx.iter().zip(zy).zip(weights) {
        let wa = a.mixed(w)?;
        let (c, t) = coupling_terms(b, &wa);
        total += beta * c + beta * m * t;
    }
    Ok(total)
}

/// `(||zy - wzx||^2, <zy, wzx>)`.
fn coupling_terms(zy: &FeatureMapSet, wzx: &FeatureMapSet) -> (f64, f64) {
    zy.data()
        .iter()
        .zip(wzx.data())
        .fold((0.0, 0.0), |(c, t), (a, b)| (c + (a - b) * (a - b), t + a * b))
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Kernel width used when pairs are aligned.
    pub sigma: f64,
    pub k: usize,
    pub d: usize,
    pub outer_iters: usize,
    /// ADMM penalty for map inference.
    pub rho: f64,
    /// ADMM iterations per map-inference sweep.
    pub inner_iters: usize,
    pub tol: f64,
    /// Coupled source/target sweeps per sample and outer iteration.
    pub coupled_passes: usize,
    pub seed: u64,
    /// Periodic padding added to every slice before coding.
    pub pad: usize,
    /// Central slices used per volume (0 = all).
    pub slices_per_volume: usize,
    pub slice_stride: usize,
    pub filter: FilterUpdateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            beta: 0.1,
            gamma: 0.15,
            sigma: 1.0,
            k: 64,
            d: 11,
            outer_iters: 10,
            rho: 1.0,
            inner_iters: 60,
            tol: 1e-4,
            coupled_passes: 1,
            seed: 0,
            pad: 8,
            slices_per_volume: 2,
            slice_stride: 1,
            filter: FilterUpdateConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
            ("rho", self.rho),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        if self.d.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("d must be odd, got {}", self.d)));
        }
        if self.inner_iters == 0 || self.coupled_passes == 0 || self.slice_stride == 0 {
            return Err(Error::InvalidParameter(
                "inner_iters, coupled_passes and slice_stride must be >= 1".into(),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            lambda: self.lambda,
            rho: self.rho,
            max_iters: self.inner_iters,
            tol: self.tol,
            seed: self.seed,
        }
    }
}

/// Indices of the central slices selected for training.
pub fn select_slices(depth: usize, count: usize, stride: usize) -> Vec<usize> {
    let all: Vec<usize> = (0..depth).step_by(stride.max(1)).collect();
    if count == 0 || count >= all.len() {
        return all;
    }
    let span = (count - 1) * stride;
    let start = (depth - 1 - span) / 2;
    (0..count).map(|i| start + i * stride).collect()
}

/// One padded, mean-removed 2D training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// Source slice upscaled to the target grid and padded.
    pub x: Slice,
    /// Padded target slice.
    pub y: Slice,
    /// Mean of the source slice before removal.
    pub x_mean: f64,
    /// Mean of the target slice before removal.
    pub y_mean: f64,
    pub weight: f64,
    pub pair: usize,
}

/// Upscales sources to their target grid and cuts both volumes into padded samples.
pub fn prepare_samples(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<Vec<TrainingSample>> {
    let weights = build_mmd_weights(pairs)?.values();
    let mut out = Vec::new();
    for (p, pair) in pairs.iter().enumerate() {
        let src = match_grid(&pair.source, &pair.target)?;
        for z in select_slices(pair.target.depth(), cfg.slices_per_volume, cfg.slice_stride) {
            let (x, x_mean) = remove_mean(src.slice(z));
            let (y, y_mean) = remove_mean(pair.target.slice(z));
            out.push(TrainingSample {
                x: pad_periodic(&x, cfg.pad),
                y: pad_periodic(&y, cfg.pad),
                x_mean,
                y_mean,
                weight: weights[p],
                pair: p,
            });
        }
    }
    let (rows, cols) = (out[0].y.rows(), out[0].y.cols());
    if out.iter().any(|s| s.y.rows() != rows || s.y.cols() != cols) {
        return Err(Error::DimensionMismatch(
            "all target volumes must share one in-plane size".into(),
        ));
    }
    Ok(out)
}

/// Returns the slice minus its mean, and the mean.
pub fn remove_mean(s: &Slice) -> (Slice, f64) {
    let m = s.data().iter().sum::<f64>() / s.len() as f64;
    (s.map(|v| v - m), m)
}

/// Linear prediction of a target slice mean from a source slice mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub gain: f64,
}

impl Default for IntensityMap {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

impl IntensityMap {
    /// Least-squares fit of `target ~ gain * source`; all-zero sources keep gain 1.
    pub fn fit(source: &[f64], target: &[f64]) -> Result<Self> {
        if source.is_empty() || source.len() != target.len() {
            return Err(Error::DimensionMismatch(
                "intensity fit needs equal, non-empty mean lists".into(),
            ));
        }
        let sxx: f64 = source.iter().map(|s| s * s).sum();
        let sxy: f64 = source.iter().zip(target).map(|(s, t)| s * t).sum();
        Ok(Self {
            gain: if sxx > 0.0 { sxy / sxx } else { 1.0 },
        })
    }

    pub fn apply(&self, source_mean: f64) -> f64 {
        self.gain * source_mean
    }
}

/// Resizes `source` to the in-plane grid of `target`; depths must agree.
fn match_grid(source: &Volume, target: &Volume) -> Result<Volume> {
    if source.depth() != target.depth() {
        return Err(Error::DimensionMismatch(format!(
            "source depth {} differs from target depth {}",
            source.depth(),
            target.depth()
        )));
    }
    if source.rows() == target.rows() && source.cols() == target.cols() {
        return Ok(source.clone());
    }
    resize_volume(source, target.rows(), target.cols())
}

/// Joint objective split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub index: usize,
    pub total: f64,
    pub recon_x: f64,
    pub recon_y: f64,
    pub coupling: f64,
    pub l1: f64,
    pub w_reg: f64,
    pub mmd: f64,
    pub align_const: f64,
}

/// Evaluates every term of the joint objective in the spatial domain.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective(
    samples: &[TrainingSample],
    fbx: &FilterBank,
    fby: &FilterBank,
    zx: &[FeatureMapSet],
    zy: &[FeatureMapSet],
    w: &MappingMatrix,
    cfg: &TrainConfig,
    align_const: f64,
) -> Result<ObjectiveBreakdown> {
    if samples.len() != zx.len() || samples.len() != zy.len() {
        return Err(Error::DimensionMismatch("one map set per sample is required".into()));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts = par::map_slice(&idx, |&i| -> Result<[f64; 5]> {
        let s = &samples[i];
        let rx = reconstruct_spatial(fbx, &zx[i])?;
        let ry = reconstruct_spatial(fby, &zy[i])?;
        if !rx.same_shape(&s.x) || !ry.same_shape(&s.y) {
            return Err(Error::DimensionMismatch("maps and samples differ in size".into()));
        }
        let ex: f64 = s.x.data().iter().zip(rx.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ey: f64 = s.y.data().iter().zip(ry.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let (c, t) = coupling_terms(&zy[i], &zx[i].mixed(w)?);
        Ok([0.5 * ex, 0.5 * ey, c, zx[i].l1() + zy[i].l1(), s.weight * t])
    });
    let mut sums = [0.0; 5];
    for p in parts {
        let p = p?;
        sums.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let [recon_x, recon_y, coupling, l1, mmd] = sums;
    let coupling = cfg.beta * coupling;
    let l1 = cfg.lambda * l1;
    let w_reg = cfg.gamma * w.frobenius_sq();
    let mmd = cfg.beta * mmd;
    Ok(ObjectiveBreakdown {
        index: 0,
        total: recon_x + recon_y + coupling + l1 + w_reg + mmd + align_const,
        recon_x,
        recon_y,
        coupling,
        l1,
        w_reg,
        mmd,
        align_const,
    })
}

/// Learned filter banks and mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub fbx: FilterBank,
    pub fby: FilterBank,
    pub w: MappingMatrix,
    pub config: TrainConfig,
    /// SHA-256 of the training data.
    pub provenance: String,
    /// Target slice mean as a function of source slice mean.
    pub intensity: IntensityMap,
}

impl TrainedModel {
    pub fn new(
        fbx: FilterBank,
        fby: FilterBank,
        w: MappingMatrix,
        config: TrainConfig,
        provenance: String,
    ) -> Result<Self> {
        if fbx.k() != fby.k() || fbx.d() != fby.d() || w.dim() != fbx.k() {
            return Err(Error::DimensionMismatch(format!(
                "banks {}x{} and {}x{} with a {}x{} mapping",
                fbx.k(),
                fbx.d(),
                fby.k(),
                fby.d(),
                w.dim(),
                w.dim()
            )));
        }
        Ok(Self {
            fbx,
            fby,
            w,
            config,
            provenance,
            intensity: IntensityMap::default(),
        })
    }

    pub fn with_intensity(mut self, intensity: IntensityMap) -> Self {
        self.intensity = intensity;
        self
    }

    pub fn k(&self) -> usize {
        self.fbx.k()
    }

    pub fn d(&self) -> usize {
        self.fbx.d()
    }
}

/// Training result.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    /// Objective before training followed by one entry per outer iteration.
    pub trace: Vec<ObjectiveBreakdown>,
    /// Inner sweeps that stopped at the iteration limit.
    pub unconverged_sweeps: usize,
}

/// Digest of the pair list: flags and raw volume values in order.
pub fn training_digest(pairs: &[TrainingPair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update([u8::from(p.registered)]);
        for v in [&p.source, &p.target] {
            let (r, c, d) = v.dims();
            for n in [r, c, d] {
                h.update((n as u64).to_le_bytes());
            }
            for x in v.voxels() {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds to the nearest `f32`, shrinking filters that rounding pushed past unit norm.
fn quantize_bank(fb: &FilterBank) -> Result<FilterBank> {
    let dd = fb.d() * fb.d();
    let mut coeffs: Vec<f64> = fb.coeffs().iter().map(|&v| v as f32 as f64).collect();
    for f in coeffs.chunks_mut(dd) {
        while f.iter().map(|v| v * v).sum::<f64>().sqrt() > 1.0 {
            for v in f.iter_mut() {
                *v = (*v * (1.0 - 1e-7)) as f32 as f64;
            }
        }
    }
    FilterBank::new(fb.k(), fb.d(), coeffs)
}

fn quantize_mapping(w: &MappingMatrix) -> Result<MappingMatrix> {
    MappingMatrix::new(w.dim(), w.entries().iter().map(|&v| v as f32 as f64).collect())
}

/// Runs the alternating optimization and returns an `f32`-representable model.
pub fn train(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = prepare_samples(pairs, cfg)?;
    let align_const = alignment_residual(pairs)?;
    let (rows, cols) = (samples[0].x.rows(), samples[0].x.cols());
    if cfg.d > rows || cfg.d > cols {
        return Err(Error::FilterTooLarge {
            support: cfg.d,
            rows,
            cols,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fbx = FilterBank::random(cfg.k, cfg.d, &mut rng)?;
    let mut fby = fbx.clone();
    let mut w = MappingMatrix::identity(cfg.k);
    let noise = |rng: &mut ChaCha8Rng| -> Result<FeatureMapSet> {
        let data = (0..cfg.k * rows * cols)
            .map(|_| MAP_INIT_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureMapSet::new(cfg.k, rows, cols, data)
    };
    let mut zx = Vec::with_capacity(samples.len());
    let mut zy = Vec::with_capacity(samples.len());
    for _ in &samples {
        zx.push(noise(&mut rng)?);
        zy.push(noise(&mut rng)?);
    }

    let mut trace = vec![joint_objective(&samples, &fbx, &fby, &zx, &zy, &w, cfg, align_const)?];
    let solver = cfg.solver();
    let weights: Vec<f64> = samples.iter().map(|s| s.weight).collect();
    let xs: Vec<Slice> = samples.iter().map(|s| s.x.clone()).collect();
    let ys: Vec<Slice> = samples.iter().map(|s| s.y.clone()).collect();
    let mut unconverged = 0;
    let intensity = IntensityMap::fit(
        &samples.iter().map(|s| s.x_mean).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.y_mean).collect::<Vec<_>>(),
    )?;

    for it in 1..=cfg.outer_iters {
        let idx: Vec<usize> = (0..samples.len()).collect();
        let encoded = par::map_slice(&idx, |&i| {
            let s = &samples[i];
            encode_coupled(
                &s.x,
                &s.y,
                &fbx,
                &fby,
                &w,
                CouplingParams {
                    beta: cfg.beta,
                    mmd_weight: s.weight,
                },
                &solver,
                Some((&zx[i], &zy[i])),
                cfg.coupled_passes,
            )
        });
        for (i, e) in encoded.into_iter().enumerate() {
            let e = e?;
            unconverged += usize::from(!e.zx.converged) + usize::from(!e.zy.converged);
            zx[i] = e.zx.maps;
            zy[i] = e.zy.maps;
        }
        fbx = update_filters_with(&xs, &zx, &fbx, &cfg.filter)?;
        fby = update_filters_with(&ys, &zy, &fby, &cfg.filter)?;
        w = update_mapping(&zx, &zy, &weights, cfg.beta, cfg.gamma)?;
        let mut b = joint_objective(&samples, &fbx, &fby, &zx, &zy, &w, cfg, align_const)?;
        b.index = it;
        trace.push(b);
    }

    let model = TrainedModel::new(
        quantize_bank(&fbx)?,
        quantize_bank(&fby)?,
        quantize_mapping(&w)?,
        cfg.clone(),
        training_digest(pairs),
    )?
    .with_intensity(intensity);
    Ok(TrainOutput {
        model,
        trace,
        unconverged_sweeps: unconverged,
    })
}

/// Standard deviation of the Gaussian map initialization.
const MAP_INIT_SCALE: f64 = 1e-2;
