//! 2D slices, volumes, periodic padding, the FFT pair and circular convolution.
//!
//! Convolution is circular everywhere. A kernel of shape `kr x kc` is anchored
//! at its centre `(kr / 2, kc / 2)`, so a centred delta is the identity, and
//! [`embed_kernel`] places that centre at the origin of a full-size grid before
//! transforming. The forward FFT is unnormalized; the inverse carries the
//! `1 / (rows * cols)` factor.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major 2D grid of real intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Slice {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "slice dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "slice {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "slice dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut s = Self::zeros(rows, cols);
        s.data.fill(value);
        s
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut s = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                s.data[i * cols + j] = f(i, j);
            }
        }
        s
    }

    /// Builds a slice without the finiteness scan. Callers guarantee the shape.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn same_shape(&self, other: &Slice) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Slice {
        Slice::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Reverses both axes; used to turn a correlation kernel into a convolution kernel.
    pub fn flipped(&self) -> Slice {
        Slice::from_fn(self.rows, self.cols, |i, j| {
            self.get(self.rows - 1 - i, self.cols - 1 - j)
        })
    }

    pub fn max_abs_diff(&self, other: &Slice) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A stack of equally sized slices along the z-axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    rows: usize,
    cols: usize,
    slices: Vec<Slice>,
}

impl Volume {
    pub fn new(slices: Vec<Slice>) -> Result<Self> {
        let first = slices.first().ok_or(Error::Empty("volume slices"))?;
        let (rows, cols) = (first.rows, first.cols);
        if let Some(bad) = slices.iter().find(|s| s.rows != rows || s.cols != cols) {
            return Err(Error::DimensionMismatch(format!(
                "volume slices must share {rows}x{cols}, found {}x{}",
                bad.rows, bad.cols
            )));
        }
        Ok(Self { rows, cols, slices })
    }

    pub fn zeros(rows: usize, cols: usize, depth: usize) -> Self {
        assert!(depth > 0, "volume depth must be positive");
        Self {
            rows,
            cols,
            slices: vec![Slice::zeros(rows, cols); depth],
        }
    }

    pub fn filled(rows: usize, cols: usize, depth: usize, value: f64) -> Self {
        assert!(depth > 0, "volume depth must be positive");
        Self {
            rows,
            cols,
            slices: vec![Slice::filled(rows, cols, value); depth],
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        depth: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(depth > 0, "volume depth must be positive");
        let slices = (0..depth)
            .map(|z| Slice::from_fn(rows, cols, |i, j| f(i, j, z)))
            .collect();
        Self { rows, cols, slices }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.depth())
    }

    pub fn voxel_count(&self) -> usize {
        self.rows * self.cols * self.depth()
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn slice(&self, z: usize) -> &Slice {
        &self.slices[z]
    }

    pub fn into_slices(self) -> Vec<Slice> {
        self.slices
    }

    pub fn voxels(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices.iter().flat_map(|s| s.data.iter().copied())
    }

    pub fn mean(&self) -> f64 {
        self.voxels().sum::<f64>() / self.voxel_count() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            rows: self.rows,
            cols: self.cols,
            slices: self.slices.iter().map(|s| s.map(&f)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims() == other.dims()
    }

    /// Min-max rescales intensities to `[0, 1]`; a constant volume maps to zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self
            .voxels()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        if span <= 0.0 {
            return self.map(|_| 0.0);
        }
        self.map(|v| (v - lo) / span)
    }
}

/// A row-major grid of complex coefficients, the frequency-domain counterpart of [`Slice`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.cols + j]
    }
}

/// A cached 2D FFT plan for one grid shape.
#[derive(Clone)]
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

type PlanCache = (FftPlanner<f64>, HashMap<(usize, usize), Fft2>);

thread_local! {
    static PLANS: RefCell<PlanCache> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

impl Fft2 {
    /// Returns the plan for a `rows x cols` grid, reusing a thread-local cache.
    pub fn plan(rows: usize, cols: usize) -> Fft2 {
        PLANS.with(|cell| {
            let (planner, cache) = &mut *cell.borrow_mut();
            cache
                .entry((rows, cols))
                .or_insert_with(|| Fft2 {
                    rows,
                    cols,
                    row_fwd: planner.plan_fft_forward(cols),
                    row_inv: planner.plan_fft_inverse(cols),
                    col_fwd: planner.plan_fft_forward(rows),
                    col_inv: planner.plan_fft_inverse(rows),
                })
                .clone()
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transform(&self, data: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.rows * self.cols, "buffer does not match plan");
        row.process(data);
        if self.rows > 1 {
            let mut t = vec![Complex64::new(0.0, 0.0); data.len()];
            transpose(data, &mut t, self.rows, self.cols);
            col.process(&mut t);
            transpose(&t, data, self.cols, self.rows);
        }
    }

    /// Unnormalized forward transform, in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform including the `1 / (rows * cols)` factor, in place.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = spectrum.to_vec();
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

pub fn fft2(s: &Slice) -> ComplexGrid {
    let plan = Fft2::plan(s.rows, s.cols);
    ComplexGrid {
        rows: s.rows,
        cols: s.cols,
        data: plan.forward_real(&s.data),
    }
}

/// Inverse FFT returning the real part.
pub fn ifft2(g: &ComplexGrid) -> Slice {
    let plan = Fft2::plan(g.rows, g.cols);
    Slice::from_raw(g.rows, g.cols, plan.inverse_real(&g.data))
}

/// Periodically extends `s` by `margin` on every side.
pub fn pad_periodic(s: &Slice, margin: usize) -> Slice {
    if margin == 0 {
        return s.clone();
    }
    let (m, n) = (s.rows, s.cols);
    let rows = m + 2 * margin;
    let cols = n + 2 * margin;
    Slice::from_fn(rows, cols, |i, j| {
        let si = (i + m * (margin / m + 1) - margin) % m;
        let sj = (j + n * (margin / n + 1) - margin) % n;
        s.get(si, sj)
    })
}

/// Removes `margin` from every side, the inverse of [`pad_periodic`].
pub fn crop(s: &Slice, margin: usize) -> Result<Slice> {
    if 2 * margin >= s.rows || 2 * margin >= s.cols {
        return Err(Error::InvalidParameter(format!(
            "cannot crop {margin} from a {}x{} slice",
            s.rows, s.cols
        )));
    }
    let rows = s.rows - 2 * margin;
    let cols = s.cols - 2 * margin;
    Ok(Slice::from_fn(rows, cols, |i, j| s.get(i + margin, j + margin)))
}

fn check_kernel(s_rows: usize, s_cols: usize, k: &Slice) -> Result<()> {
    if k.rows > s_rows || k.cols > s_cols {
        return Err(Error::FilterTooLarge {
            support: k.rows.max(k.cols),
            rows: s_rows,
            cols: s_cols,
        });
    }
    Ok(())
}

/// Places a centred kernel into a `rows x cols` grid with its anchor at the origin.
pub fn embed_kernel(k: &Slice, rows: usize, cols: usize) -> Result<Slice> {
    check_kernel(rows, cols, k)?;
    let (ca, cb) = (k.rows / 2, k.cols / 2);
    let mut out = Slice::zeros(rows, cols);
    for a in 0..k.rows {
        for b in 0..k.cols {
            let i = (a + rows - ca) % rows;
            let j = (b + cols - cb) % cols;
            out.data[i * cols + j] += k.get(a, b);
        }
    }
    Ok(out)
}

/// Reads the centred `kr x kc` window around the origin of a full-size grid;
/// the adjoint of [`embed_kernel`].
pub fn extract_kernel(full: &Slice, kr: usize, kc: usize) -> Slice {
    let (rows, cols) = (full.rows, full.cols);
    let (ca, cb) = (kr / 2, kc / 2);
    Slice::from_fn(kr, kc, |a, b| {
        full.get((a + rows - ca) % rows, (b + cols - cb) % cols)
    })
}

/// Circular 2D convolution by direct summation; output has the input's size.
pub fn conv_spatial(s: &Slice, f: &Slice) -> Result<Slice> {
    check_kernel(s.rows, s.cols, f)?;
    let (m, n) = (s.rows, s.cols);
    let (ca, cb) = (f.rows / 2, f.cols / 2);
    let mut out = vec![0.0; m * n];
    for a in 0..f.rows {
        for b in 0..f.cols {
            let w = f.get(a, b);
            if w == 0.0 {
                continue;
            }
            // out(i, j) += w * s(i - (a - ca), j - (b - cb))
            let di = (m + ca - a % m) % m;
            let dj = (n + cb - b % n) % n;
            for i in 0..m {
                let si = (i + di) % m;
                let src = &s.data[si * n..(si + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += w * src[(j + dj) % n];
                }
            }
        }
    }
    Ok(Slice::from_raw(m, n, out))
}

/// Frequency-domain convolution: the elementwise product of two spectra.
pub fn conv_fourier(s_hat: &ComplexGrid, f_hat: &ComplexGrid) -> Result<ComplexGrid> {
    if s_hat.rows != f_hat.rows || s_hat.cols != f_hat.cols {
        return Err(Error::DimensionMismatch(format!(
            "spectra {}x{} and {}x{}",
            s_hat.rows, s_hat.cols, f_hat.rows, f_hat.cols
        )));
    }
    Ok(ComplexGrid {
        rows: s_hat.rows,
        cols: s_hat.cols,
        data: s_hat
            .data
            .iter()
            .zip(&f_hat.data)
            .map(|(a, b)| a * b)
            .collect(),
    })
}

/// Circular convolution through the FFT; agrees with [`conv_spatial`].
pub fn conv_via_fft(s: &Slice, f: &Slice) -> Result<Slice> {
    let fk = embed_kernel(f, s.rows, s.cols)?;
    Ok(ifft2(&conv_fourier(&fft2(s), &fft2(&fk))?))
}
