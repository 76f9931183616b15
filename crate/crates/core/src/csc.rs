//! Convolutional sparse coding.
//!
//! Feature maps are inferred with ADMM in the Fourier domain: the smooth part
//! is solved per frequency, the l1 part by soft thresholding on the split
//! variable. Filters are learned with a second ADMM whose split variable lives
//! on the `d x d` support inside the unit ball.
//!
//! Both solvers work on padded slices; maps share the padded slice size.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{conv_spatial, embed_kernel, extract_kernel, Fft2, Slice};
use crate::joint::MappingMatrix;
use crate::linalg;
use crate::par;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Slack allowed on the unit-norm filter constraint.
pub const NORM_SLACK: f64 = 1e-9;

/// `K` filters of support `d x d`, each with Euclidean norm at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    k: usize,
    d: usize,
    coeffs: Vec<f64>,
}

impl FilterBank {
    pub fn new(k: usize, d: usize, coeffs: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "filter bank needs k >= 1 and d >= 1, got k={k}, d={d}"
            )));
        }
        if coeffs.len() != k * d * d {
            return Err(Error::DimensionMismatch(format!(
                "{k} filters of {d}x{d} need {} coefficients, got {}",
                k * d * d,
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("filter coefficients"));
        }
        let bank = Self { k, d, coeffs };
        if bank.max_norm() > 1.0 + NORM_SLACK {
            return Err(Error::InvalidParameter(format!(
                "filter norm {} exceeds 1",
                bank.max_norm()
            )));
        }
        Ok(bank)
    }

    pub fn from_filters(filters: &[Slice]) -> Result<Self> {
        let first = filters.first().ok_or(Error::Empty("filters"))?;
        let d = first.rows();
        if filters.iter().any(|f| f.rows() != d || f.cols() != d) {
            return Err(Error::DimensionMismatch("filters must all be square d x d".into()));
        }
        let coeffs = filters.iter().flat_map(|f| f.data().iter().copied()).collect();
        Self::new(filters.len(), d, coeffs)
    }

    /// Gaussian random filters scaled to unit norm.
    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<Self> {
        let mut coeffs: Vec<f64> = (0..k * d * d).map(|_| rng.sample(StandardNormal)).collect();
        for f in coeffs.chunks_mut(d * d) {
            project_unit_ball(f, 1.0);
        }
        Self::new(k, d, coeffs)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn filter_coeffs(&self, k: usize) -> &[f64] {
        let n = self.d * self.d;
        &self.coeffs[k * n..(k + 1) * n]
    }

    pub fn filter(&self, k: usize) -> Slice {
        Slice::from_raw(self.d, self.d, self.filter_coeffs(k).to_vec())
    }

    pub fn norms(&self) -> Vec<f64> {
        self.coeffs
            .chunks(self.d * self.d)
            .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    /// Spectra of the filters embedded in a `rows x cols` grid, one per filter.
    pub fn spectra(&self, plan: &Fft2) -> Result<Vec<Vec<Complex64>>> {
        (0..self.k)
            .map(|k| {
                let e = embed_kernel(&self.filter(k), plan.rows(), plan.cols())?;
                Ok(plan.forward_real(e.data()))
            })
            .collect()
    }
}

/// Rescales `f` onto the ball of radius `radius` if it lies outside.
fn project_unit_ball(f: &mut [f64], radius: f64) {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > radius {
        let s = radius / n;
        f.iter_mut().for_each(|v| *v *= s);
    }
}

/// `K` coefficient maps of one padded slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSet {
    k: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMapSet {
    pub fn zeros(k: usize, rows: usize, cols: usize) -> Self {
        Self {
            k,
            rows,
            cols,
            data: vec![0.0; k * rows * cols],
        }
    }

    pub fn new(k: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{k} maps of {rows}x{cols} need {} values, got {}",
                k * rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature maps"));
        }
        Ok(Self { k, rows, cols, data })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn map_slice(&self, k: usize) -> Slice {
        Slice::from_raw(self.rows, self.cols, self.map(k).to_vec())
    }

    pub fn l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Channel mixing at every position: `out(:, pos) = W * self(:, pos)`.
    pub fn mixed(&self, w: &MappingMatrix) -> Result<FeatureMapSet> {
        if w.dim() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "mapping is {0}x{0} for {1} maps",
                w.dim(),
                self.k
            )));
        }
        Ok(Self {
            k: self.k,
            rows: self.rows,
            cols: self.cols,
            data: mix_channels(w.entries(), self.k, &self.data, false),
        })
    }
}

/// Applies `M` (or `M^T` when `transpose`) to a `K x N` channel stack.
fn mix_channels(m: &[f64], k: usize, data: &[f64], transpose: bool) -> Vec<f64> {
    let n = data.len() / k;
    let mut out = vec![0.0; k * n];
    par::for_each_chunk(&mut out, n, |row, dst| {
        for col in 0..k {
            let coef = if transpose { m[col * k + row] } else { m[row * k + col] };
            if coef == 0.0 {
                continue;
            }
            let src = &data[col * n..(col + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += coef * s;
            }
        }
    });
    out
}

/// ADMM parameters for map inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            rho: 1.0,
            max_iters: 60,
            tol: 1e-4,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Elementwise `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be >= 0, got {t}")));
    }
    Ok(v.iter().map(|&x| shrink(x, t)).collect())
}

#[inline]
fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Result of one map-inference run.
#[derive(Debug, Clone)]
pub struct Encoding {
    /// Lowest-objective iterate of the sparse split variable.
    pub maps: FeatureMapSet,
    /// Objective of `maps` (data term, l1 term and any coupling terms).
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the starting point followed by one entry per iteration.
    pub trace: Vec<f64>,
}

/// Per-position quadratic penalty `1/2 <z, Q z>` shared by all positions.
#[derive(Debug, Clone)]
enum Quad {
    Zero,
    Scalar(f64),
    Dense(Vec<f64>),
}

/// `(Q + rho I)^-1`, the frequency-independent part of the normal equations.
enum BaseInverse {
    Scalar(f64),
    Dense(Vec<f64>),
}

/// Smooth terms added to the plain sparse-coding objective:
/// `1/2 <z, Q z> - <c, z>` with `c` a `K x N` spatial stack.
struct Extra<'a> {
    quad: Quad,
    linear: Option<&'a [f64]>,
}

impl Extra<'_> {
    fn none() -> Self {
        Extra {
            quad: Quad::Zero,
            linear: None,
        }
    }

    fn value(&self, z: &[f64], k: usize) -> f64 {
        let n = z.len() / k;
        let q = match &self.quad {
            Quad::Zero => 0.0,
            Quad::Scalar(s) => 0.5 * s * z.iter().map(|v| v * v).sum::<f64>(),
            Quad::Dense(m) => {
                let qz = mix_channels(m, k, z, false);
                0.5 * z.iter().zip(&qz).map(|(a, b)| a * b).sum::<f64>()
            }
        };
        let _ = n;
        let l = self
            .linear
            .map_or(0.0, |c| c.iter().zip(z).map(|(a, b)| a * b).sum::<f64>());
        q - l
    }
}

/// One prepared map-inference problem for a fixed slice and filter bank.
struct MapProblem<'a> {
    plan: Fft2,
    k: usize,
    n: usize,
    s_hat: Vec<Complex64>,
    f_hat: Vec<Vec<Complex64>>,
    /// `conj(F) s_hat + c_hat`, per filter.
    const_rhs: Vec<Vec<Complex64>>,
    /// Sherman-Morrison vectors `B^-1 conj(F)` (frequency-major) and denominators.
    sm_w: Vec<Complex64>,
    sm_den: Vec<f64>,
    base: BaseInverse,
    extra: Extra<'a>,
    lambda: f64,
    rho: f64,
}

impl<'a> MapProblem<'a> {
    fn new(s: &Slice, fb: &FilterBank, cfg: &SolverConfig, extra: Extra<'a>) -> Result<Self> {
        cfg.validate()?;
        if s.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice"));
        }
        if fb.d() > s.rows() || fb.d() > s.cols() {
            return Err(Error::FilterTooLarge {
                support: fb.d(),
                rows: s.rows(),
                cols: s.cols(),
            });
        }
        let plan = Fft2::plan(s.rows(), s.cols());
        let (k, n) = (fb.k(), s.len());
        if let Some(c) = extra.linear {
            if c.len() != k * n {
                return Err(Error::DimensionMismatch("coupling term shape".into()));
            }
        }
        let s_hat = plan.forward_real(s.data());
        let f_hat = fb.spectra(&plan)?;
        let c_hat: Option<Vec<Vec<Complex64>>> = extra
            .linear
            .map(|c| par::map_range(k, |kk| plan.forward_real(&c[kk * n..(kk + 1) * n])));
        let const_rhs = par::map_range(k, |kk| {
            let mut r: Vec<Complex64> = f_hat[kk]
                .iter()
                .zip(&s_hat)
                .map(|(f, s)| f.conj() * s)
                .collect();
            if let Some(c) = &c_hat {
                r.iter_mut().zip(&c[kk]).for_each(|(a, b)| *a += b);
            }
            r
        });

        let base = match &extra.quad {
            Quad::Zero => BaseInverse::Scalar(1.0 / cfg.rho),
            Quad::Scalar(q) => BaseInverse::Scalar(1.0 / (q + cfg.rho)),
            Quad::Dense(q) => {
                let mut b = q.clone();
                (0..k).for_each(|i| b[i * k + i] += cfg.rho);
                BaseInverse::Dense(linalg::spd_inverse(&b, k)?)
            }
        };

        let mut sm_w = vec![ZERO; n * k];
        let mut sm_den = vec![0.0; n];
        {
            let f_hat = &f_hat;
            let base = &base;
            let chunk = 256;
            let mut joined: Vec<(&mut [Complex64], &mut [f64])> = sm_w
                .chunks_mut(chunk * k)
                .zip(sm_den.chunks_mut(chunk))
                .collect();
            par::for_each_indexed(&mut joined, |ci, (w, den)| {
                let mut v = vec![ZERO; k];
                for (local, d) in den.iter_mut().enumerate() {
                    let om = ci * chunk + local;
                    for kk in 0..k {
                        v[kk] = f_hat[kk][om].conj();
                    }
                    let wv = &mut w[local * k..(local + 1) * k];
                    apply_base(base, &v, wv, k);
                    let vhw: f64 = v.iter().zip(wv.iter()).map(|(a, b)| (a.conj() * b).re).sum();
                    *d = 1.0 + vhw;
                }
            });
        }

        Ok(Self {
            plan,
            k,
            n,
            s_hat,
            f_hat,
            const_rhs,
            sm_w,
            sm_den,
            base,
            extra,
            lambda: cfg.lambda,
            rho: cfg.rho,
        })
    }

    /// Solves the per-frequency systems for the given right-hand side
    /// (frequency-major `N x K`) and returns `K` spectra.
    fn solve_frequencies(&self, rhs: &mut [Complex64]) -> Vec<Vec<Complex64>> {
        let (k, n) = (self.k, self.n);
        let chunk = 256;
        par::for_each_chunk(rhs, chunk * k, |ci, block| {
            let mut y = vec![ZERO; k];
            for (local, r) in block.chunks_mut(k).enumerate() {
                let om = ci * chunk + local;
                apply_base(&self.base, r, &mut y, k);
                // v^H y with v = conj(F)
                let mut vy = ZERO;
                for kk in 0..k {
                    vy += self.f_hat[kk][om] * y[kk];
                }
                let scale = vy / self.sm_den[om];
                let w = &self.sm_w[om * k..(om + 1) * k];
                for kk in 0..k {
                    r[kk] = y[kk] - w[kk] * scale;
                }
            }
        });
        par::map_range(k, |kk| (0..n).map(|om| rhs[om * k + kk]).collect())
    }

    fn spectra(&self, z: &[f64]) -> Vec<Vec<Complex64>> {
        let n = self.n;
        par::map_range(self.k, |kk| self.plan.forward_real(&z[kk * n..(kk + 1) * n]))
    }

    fn data_term(&self, z_hat: &[Vec<Complex64>]) -> f64 {
        let mut acc = 0.0;
        for om in 0..self.n {
            let mut r = self.s_hat[om];
            for kk in 0..self.k {
                r -= self.f_hat[kk][om] * z_hat[kk][om];
            }
            acc += r.norm_sqr();
        }
        0.5 * acc / self.n as f64
    }

    fn objective(&self, u: &[f64], u_hat: &[Vec<Complex64>]) -> f64 {
        let l1: f64 = u.iter().map(|v| v.abs()).sum();
        self.data_term(u_hat) + self.lambda * l1 + self.extra.value(u, self.k)
    }

    fn run(&self, warm: Option<&FeatureMapSet>, max_iters: usize, tol: f64) -> Result<Encoding> {
        let (k, n) = (self.k, self.n);
        let (rows, cols) = (self.plan.rows(), self.plan.cols());
        let mut u = match warm {
            Some(m) => {
                if m.k != k || m.rows != rows || m.cols != cols {
                    return Err(Error::DimensionMismatch("warm-start maps".into()));
                }
                m.data.clone()
            }
            None => vec![0.0; k * n],
        };
        let mut eta = vec![0.0; k * n];
        let mut u_hat = self.spectra(&u);
        let mut eta_hat = vec![vec![ZERO; n]; k];

        let mut best = u.clone();
        let mut best_obj = self.objective(&u, &u_hat);
        let mut trace = vec![best_obj];
        let mut converged = false;
        let mut iterations = 0;
        let thresh = self.lambda / self.rho;
        let mut rhs = vec![ZERO; n * k];

        for _ in 0..max_iters {
            iterations += 1;
            par::for_each_chunk(&mut rhs, k, |om, r| {
                for kk in 0..k {
                    r[kk] = self.const_rhs[kk][om]
                        + (u_hat[kk][om] - eta_hat[kk][om]) * self.rho;
                }
            });
            let z_hat = self.solve_frequencies(&mut rhs);
            let z: Vec<f64> = par::map_range(k, |kk| self.plan.inverse_real(&z_hat[kk]))
                .into_iter()
                .flatten()
                .collect();

            let mut primal = 0.0;
            let mut dual = 0.0;
            let mut z_norm = 0.0;
            let mut u_norm = 0.0;
            let mut eta_norm = 0.0;
            for i in 0..k * n {
                let un = shrink(z[i] + eta[i], thresh);
                dual += (un - u[i]) * (un - u[i]);
                u[i] = un;
                eta[i] += z[i] - un;
                primal += (z[i] - un) * (z[i] - un);
                z_norm += z[i] * z[i];
                u_norm += un * un;
                eta_norm += eta[i] * eta[i];
            }
            u_hat = self.spectra(&u);
            for kk in 0..k {
                for om in 0..n {
                    eta_hat[kk][om] += z_hat[kk][om] - u_hat[kk][om];
                }
            }

            let obj = self.objective(&u, &u_hat);
            trace.push(obj);
            if obj < best_obj {
                best_obj = obj;
                best.copy_from_slice(&u);
            }

            let r_rel = primal.sqrt() / z_norm.sqrt().max(u_norm.sqrt()).max(1e-12);
            let d_rel = self.rho * dual.sqrt() / (self.rho * eta_norm.sqrt()).max(1e-12);
            if r_rel <= tol && d_rel <= tol {
                converged = true;
                break;
            }
        }

        Ok(Encoding {
            maps: FeatureMapSet {
                k,
                rows,
                cols,
                data: best,
            },
            objective: best_obj,
            iterations,
            converged,
            trace,
        })
    }
}

/// `out = base^-1 * v`.
#[inline]
fn apply_base(base: &BaseInverse, v: &[Complex64], out: &mut [Complex64], k: usize) {
    match base {
        BaseInverse::Scalar(s) => {
            for i in 0..k {
                out[i] = v[i] * *s;
            }
        }
        BaseInverse::Dense(m) => {
            for i in 0..k {
                let row = &m[i * k..(i + 1) * k];
                let mut acc = ZERO;
                for j in 0..k {
                    acc += v[j] * row[j];
                }
                out[i] = acc;
            }
        }
    }
}

/// Infers sparse maps for a padded slice:
/// `min 1/2 ||s - sum_k f_k * z_k||^2 + lambda sum_k ||z_k||_1`.
pub fn encode(s: &Slice, fb: &FilterBank, cfg: &SolverConfig) -> Result<Encoding> {
    encode_warm(s, fb, cfg, None)
}

/// [`encode`] starting from previous maps instead of zeros.
pub fn encode_warm(
    s: &Slice,
    fb: &FilterBank,
    cfg: &SolverConfig,
    warm: Option<&FeatureMapSet>,
) -> Result<Encoding> {
    MapProblem::new(s, fb, cfg, Extra::none())?.run(warm, cfg.max_iters, cfg.tol)
}

/// Weights of the coupling between source and target maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams {
    pub beta: f64,
    /// Per-pair MMD weight.
    pub mmd_weight: f64,
}

/// Maps of one coupled source/target sample.
#[derive(Debug, Clone)]
pub struct CoupledEncoding {
    pub zx: Encoding,
    pub zy: Encoding,
}

/// Alternating map inference for a source/target pair:
///
/// `1/2 ||x - Fx*Zx||^2 + 1/2 ||y - Fy*Zy||^2 + beta ||Zy - W Zx||^2
///  + lambda (||Zx||_1 + ||Zy||_1) + beta m <Zy, W Zx>`.
///
/// Each pass runs one ADMM sweep on `Zx` with `Zy` fixed, then one on `Zy`
/// with `Zx` fixed. A sweep never returns maps worse than its starting point.
#[allow(clippy::too_many_arguments)]
pub fn encode_coupled(
    sx: &Slice,
    sy: &Slice,
    fbx: &FilterBank,
    fby: &FilterBank,
    w: &MappingMatrix,
    params: CouplingParams,
    cfg: &SolverConfig,
    warm: Option<(&FeatureMapSet, &FeatureMapSet)>,
    passes: usize,
) -> Result<CoupledEncoding> {
    let k = fbx.k();
    if fby.k() != k || w.dim() != k {
        return Err(Error::DimensionMismatch(format!(
            "filter banks of {} and {} with a {}x{} mapping",
            fbx.k(),
            fby.k(),
            w.dim(),
            w.dim()
        )));
    }
    if !sx.same_shape(sy) {
        return Err(Error::DimensionMismatch("source and target slices differ in size".into()));
    }
    if passes == 0 {
        return Err(Error::InvalidParameter("coupled encoding needs at least one pass".into()));
    }
    let CouplingParams { beta, mmd_weight } = params;
    let lin_coef = beta * (2.0 - mmd_weight);

    let (mut zx, mut zy) = match warm {
        Some((a, b)) => (Some(a.clone()), Some(b.clone())),
        None => (None, None),
    };
    let mut out = None;
    for _ in 0..passes {
        // Zx step: Q = 2 beta W^T W, c = beta (2 - m) W^T Zy
        let linear_x = match (&zy, lin_coef != 0.0) {
            (Some(y), true) => Some(
                mix_channels(w.entries(), k, y.data(), true)
                    .into_iter()
                    .map(|v| v * lin_coef)
                    .collect::<Vec<_>>(),
            ),
            _ => None,
        };
        // without a target estimate the source maps start from plain coding
        let quad_x = if beta != 0.0 && zy.is_some() {
            Quad::Dense(w.gram().into_iter().map(|v| 2.0 * beta * v).collect())
        } else {
            Quad::Zero
        };
        let ex = MapProblem::new(
            sx,
            fbx,
            cfg,
            Extra {
                quad: quad_x,
                linear: linear_x.as_deref(),
            },
        )?
        .run(zx.as_ref(), cfg.max_iters, cfg.tol)?;

        // Zy step: Q = 2 beta I, c = beta (2 - m) W Zx
        let linear_y = (lin_coef != 0.0).then(|| {
            mix_channels(w.entries(), k, ex.maps.data(), false)
                .into_iter()
                .map(|v| v * lin_coef)
                .collect::<Vec<_>>()
        });
        let quad_y = if beta != 0.0 {
            Quad::Scalar(2.0 * beta)
        } else {
            Quad::Zero
        };
        let warm_y = match &zy {
            Some(y) => Some(y.clone()),
            None if beta != 0.0 => Some(ex.maps.mixed(w)?),
            None => None,
        };
        let ey = MapProblem::new(
            sy,
            fby,
            cfg,
            Extra {
                quad: quad_y,
                linear: linear_y.as_deref(),
            },
        )?
        .run(warm_y.as_ref(), cfg.max_iters, cfg.tol)?;
        zx = Some(ex.maps.clone());
        zy = Some(ey.maps.clone());
        out = Some(CoupledEncoding { zx: ex, zy: ey });
    }
    Ok(out.expect("at least one pass"))
}

/// Coupled objective of one sample evaluated in the spatial domain.
#[allow(clippy::too_many_arguments)]
pub fn coupled_objective(
    sx: &Slice,
    sy: &Slice,
    fbx: &FilterBank,
    fby: &FilterBank,
    zx: &FeatureMapSet,
    zy: &FeatureMapSet,
    w: &MappingMatrix,
    params: CouplingParams,
    lambda: f64,
) -> Result<f64> {
    let wzx = zx.mixed(w)?;
    let coupling: f64 = zy.data().iter().zip(wzx.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let inner: f64 = zy.data().iter().zip(wzx.data()).map(|(a, b)| a * b).sum();
    Ok(csc_objective(sx, fbx, zx, lambda)?
        + csc_objective(sy, fby, zy, lambda)?
        + params.beta * coupling
        + params.beta * params.mmd_weight * inner)
}

/// `sum_k f_k * z_k` by direct spatial convolution.
pub fn reconstruct_spatial(fb: &FilterBank, maps: &FeatureMapSet) -> Result<Slice> {
    check_maps(fb, maps)?;
    let mut acc = Slice::zeros(maps.rows, maps.cols);
    for k in 0..fb.k() {
        let c = conv_spatial(&maps.map_slice(k), &fb.filter(k))?;
        acc.data_mut().iter_mut().zip(c.data()).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

/// `sum_k f_k * z_k` through the FFT.
pub fn reconstruct(fb: &FilterBank, maps: &FeatureMapSet) -> Result<Slice> {
    check_maps(fb, maps)?;
    let plan = Fft2::plan(maps.rows, maps.cols);
    let f_hat = fb.spectra(&plan)?;
    let n = maps.rows * maps.cols;
    let mut acc = vec![ZERO; n];
    for (k, fk) in f_hat.iter().enumerate() {
        let z = plan.forward_real(maps.map(k));
        acc.iter_mut().zip(fk.iter().zip(&z)).for_each(|(a, (f, z))| *a += f * z);
    }
    Ok(Slice::from_raw(maps.rows, maps.cols, plan.inverse_real(&acc)))
}

fn check_maps(fb: &FilterBank, maps: &FeatureMapSet) -> Result<()> {
    if fb.k() != maps.k {
        return Err(Error::DimensionMismatch(format!(
            "{} filters for {} maps",
            fb.k(),
            maps.k
        )));
    }
    Ok(())
}

/// `1/2 ||s - sum_k f_k * z_k||^2 + lambda sum_k ||z_k||_1`, evaluated spatially.
pub fn csc_objective(s: &Slice, fb: &FilterBank, maps: &FeatureMapSet, lambda: f64) -> Result<f64> {
    let r = reconstruct_spatial(fb, maps)?;
    if !r.same_shape(s) {
        return Err(Error::DimensionMismatch("maps and slice differ in size".into()));
    }
    let err: f64 = s.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * err + lambda * maps.l1())
}

/// Settings of the filter-learning ADMM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterUpdateConfig {
    /// Penalty relative to the mean diagonal of the per-frequency Gram matrices.
    pub rho_scale: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// Ridge added to every per-frequency system.
    pub ridge: f64,
}

impl Default for FilterUpdateConfig {
    fn default() -> Self {
        Self {
            rho_scale: 1.0,
            max_iters: 50,
            tol: 1e-7,
            ridge: 1e-8,
        }
    }
}

/// Learns filters for fixed maps with the default [`FilterUpdateConfig`].
pub fn update_filters(
    slices: &[Slice],
    maps: &[FeatureMapSet],
    prev: &FilterBank,
) -> Result<FilterBank> {
    update_filters_with(slices, maps, prev, &FilterUpdateConfig::default())
}

/// Minimizes `sum_n 1/2 ||s_n - sum_k f_k * z_nk||^2` over filters with
/// `d x d` support and `||f_k|| <= 1`.
///
/// The ADMM result is blended with `prev` by an exact line search along the
/// segment between them, so the reconstruction term never increases.
pub fn update_filters_with(
    slices: &[Slice],
    maps: &[FeatureMapSet],
    prev: &FilterBank,
    cfg: &FilterUpdateConfig,
) -> Result<FilterBank> {
    if slices.is_empty() {
        return Err(Error::Empty("filter training samples"));
    }
    if slices.len() != maps.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} slices with {} map sets",
            slices.len(),
            maps.len()
        )));
    }
    let (rows, cols) = (slices[0].rows(), slices[0].cols());
    let (k, d) = (prev.k(), prev.d());
    for (s, m) in slices.iter().zip(maps) {
        if s.rows() != rows || s.cols() != cols || m.rows != rows || m.cols != cols || m.k != k {
            return Err(Error::DimensionMismatch(
                "filter samples must share one padded size and filter count".into(),
            ));
        }
    }
    if d > rows || d > cols {
        return Err(Error::FilterTooLarge {
            support: d,
            rows,
            cols,
        });
    }
    if maps.iter().all(FeatureMapSet::is_zero) {
        return Ok(prev.clone());
    }

    let plan = Fft2::plan(rows, cols);
    let n = rows * cols;
    let s_hat: Vec<Vec<Complex64>> = par::map_slice(slices, |s| plan.forward_real(s.data()));
    // frequency-major per sample: z_hat[sample][om * k + kk]
    let z_hat: Vec<Vec<Complex64>> = par::map_slice(maps, |m| {
        let per_k: Vec<Vec<Complex64>> = (0..k).map(|kk| plan.forward_real(m.map(kk))).collect();
        let mut out = vec![ZERO; n * k];
        for kk in 0..k {
            for om in 0..n {
                out[om * k + kk] = per_k[kk][om];
            }
        }
        out
    });

    // Gram matrices and right-hand sides per frequency
    let mut gram = vec![ZERO; n * k * k];
    let mut b = vec![ZERO; n * k];
    {
        let chunk = 64;
        let mut joined: Vec<(&mut [Complex64], &mut [Complex64])> = gram
            .chunks_mut(chunk * k * k)
            .zip(b.chunks_mut(chunk * k))
            .collect();
        par::for_each_indexed(&mut joined, |ci, (g, bb)| {
            for local in 0..bb.len() / k {
                let om = ci * chunk + local;
                let gm = &mut g[local * k * k..(local + 1) * k * k];
                let bv = &mut bb[local * k..(local + 1) * k];
                for (zs, ss) in z_hat.iter().zip(&s_hat) {
                    let zv = &zs[om * k..(om + 1) * k];
                    let sv = ss[om];
                    for i in 0..k {
                        let ci_ = zv[i].conj();
                        bv[i] += ci_ * sv;
                        for j in 0..=i {
                            gm[i * k + j] += ci_ * zv[j];
                        }
                    }
                }
            }
        });
    }
    let mean_diag: f64 = (0..n)
        .map(|om| (0..k).map(|i| gram[om * k * k + i * k + i].re).sum::<f64>())
        .sum::<f64>()
        / (n * k) as f64;
    if !(mean_diag > 0.0) {
        return Ok(prev.clone());
    }
    let rho = cfg.rho_scale * mean_diag;

    // factor G + (rho + ridge) I in place
    let mut factor_err = None;
    {
        let errs: Vec<Option<Error>> = {
            let mut blocks: Vec<&mut [Complex64]> = gram.chunks_mut(k * k).collect();
            let mut res: Vec<Option<Error>> = (0..blocks.len()).map(|_| None).collect();
            let mut pairs: Vec<(&mut &mut [Complex64], &mut Option<Error>)> =
                blocks.iter_mut().zip(res.iter_mut()).collect();
            par::for_each_indexed(&mut pairs, |_, (g, e)| {
                for i in 0..k {
                    g[i * k + i] += rho + cfg.ridge;
                }
                if let Err(err) = linalg::cholesky_complex(g, k) {
                    **e = Some(err);
                }
            });
            res
        };
        if let Some(e) = errs.into_iter().flatten().next() {
            factor_err = Some(e);
        }
    }
    if let Some(e) = factor_err {
        return Err(e);
    }

    let dd = d * d;
    let embed_all = |coeffs: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for kk in 0..k {
            let f = Slice::from_raw(d, d, coeffs[kk * dd..(kk + 1) * dd].to_vec());
            let e = embed_kernel(&f, rows, cols).expect("support checked above");
            out[kk * n..(kk + 1) * n].copy_from_slice(e.data());
        }
        out
    };

    let mut s_small = prev.coeffs().to_vec();
    let mut s_full = embed_all(&s_small);
    let mut h = vec![0.0; k * n];
    let mut rhs = vec![ZERO; n * k];
    for _ in 0..cfg.max_iters {
        let diff: Vec<f64> = s_full.iter().zip(&h).map(|(a, b)| a - b).collect();
        let diff_hat: Vec<Vec<Complex64>> =
            par::map_range(k, |kk| plan.forward_real(&diff[kk * n..(kk + 1) * n]));
        par::for_each_chunk(&mut rhs, k, |om, r| {
            let l = &gram[om * k * k..(om + 1) * k * k];
            for kk in 0..k {
                r[kk] = b[om * k + kk] + diff_hat[kk][om] * rho;
            }
            linalg::cholesky_solve_complex(l, k, r);
        });
        let f_full: Vec<f64> = par::map_range(k, |kk| {
            let spec: Vec<Complex64> = (0..n).map(|om| rhs[om * k + kk]).collect();
            plan.inverse_real(&spec)
        })
        .into_iter()
        .flatten()
        .collect();

        // S step: project F + H onto the support and the unit ball
        let fh: Vec<f64> = f_full.iter().zip(&h).map(|(a, b)| a + b).collect();
        let mut s_new = vec![0.0; k * dd];
        for kk in 0..k {
            let full = Slice::from_raw(rows, cols, fh[kk * n..(kk + 1) * n].to_vec());
            let ker = extract_kernel(&full, d, d);
            let dst = &mut s_new[kk * dd..(kk + 1) * dd];
            dst.copy_from_slice(ker.data());
            project_unit_ball(dst, 1.0);
        }
        let s_new_full = embed_all(&s_new);
        let mut primal = 0.0;
        let mut change = 0.0;
        let mut scale = 0.0;
        for i in 0..k * n {
            let r = f_full[i] - s_new_full[i];
            h[i] += r;
            primal += r * r;
            change += (s_new_full[i] - s_full[i]) * (s_new_full[i] - s_full[i]);
            scale += s_new_full[i] * s_new_full[i];
        }
        s_small = s_new;
        s_full = s_new_full;
        let scale = scale.sqrt().max(1e-12);
        if primal.sqrt() / scale <= cfg.tol && change.sqrt() / scale <= cfg.tol {
            break;
        }
    }

    // exact line search on the segment prev -> candidate
    let prev_hat = FilterBank::spectra_raw(prev.coeffs(), k, d, &plan)?;
    let cand_hat = FilterBank::spectra_raw(&s_small, k, d, &plan)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (zs, ss) in z_hat.iter().zip(&s_hat) {
        for om in 0..n {
            let zv = &zs[om * k..(om + 1) * k];
            let mut rec_prev = ZERO;
            let mut delta = ZERO;
            for kk in 0..k {
                rec_prev += prev_hat[kk][om] * zv[kk];
                delta += (cand_hat[kk][om] - prev_hat[kk][om]) * zv[kk];
            }
            let resid = ss[om] - rec_prev;
            num += (resid.conj() * delta).re;
            den += delta.norm_sqr();
        }
    }
    let t = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    let coeffs: Vec<f64> = prev
        .coeffs()
        .iter()
        .zip(&s_small)
        .map(|(p, c)| p + t * (c - p))
        .collect();
    FilterBank::new(k, d, coeffs)
}

impl FilterBank {
    fn spectra_raw(coeffs: &[f64], k: usize, d: usize, plan: &Fft2) -> Result<Vec<Vec<Complex64>>> {
        let dd = d * d;
        (0..k)
            .map(|kk| {
                let f = Slice::from_raw(d, d, coeffs[kk * dd..(kk + 1) * dd].to_vec());
                let e = embed_kernel(&f, plan.rows(), plan.cols())?;
                Ok(plan.forward_real(e.data()))
            })
            .collect()
    }
}
