//! Hetero-domain alignment: Gaussian-kernel similarity between HF features of
//! unpaired source and target volumes, binarized into a row-wise best match.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_hf_hr, extract_hf_lr, reconcile, HfFeatures};
use crate::grid::Volume;
use crate::par;

/// A source/target training pair. `source` is the LR source-modality volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub source: Volume,
    pub target: Volume,
    /// Originally registered (true) or created by alignment (false).
    pub registered: bool,
    /// Kernel similarity recorded for alignment-created pairs.
    pub kernel: Option<f64>,
}

/// Pairwise kernel values between `P` sources (rows) and `Q` targets (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    sigma: f64,
}

impl KernelMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>, sigma: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("kernel matrix"));
        }
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "kernel matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            entries,
            sigma,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.entries[p * self.cols + q]
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.entries[p * self.cols..(p + 1) * self.cols]
    }
}

/// Binary one-hot-per-row correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    cols: usize,
    matches: Vec<usize>,
    scores: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn rows(&self) -> usize {
        self.matches.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Matched target column for each source row.
    pub fn matches(&self) -> &[usize] {
        &self.matches
    }

    /// Kernel value of each row's match.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, p: usize, q: usize) -> u8 {
        u8::from(self.matches[p] == q)
    }

    /// Dense row-major `{0, 1}` view.
    pub fn entries(&self) -> Vec<u8> {
        (0..self.rows())
            .flat_map(|p| (0..self.cols).map(move |q| (p, q)))
            .map(|(p, q)| self.get(p, q))
            .collect()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().copied().enumerate().collect()
    }
}

/// Gaussian kernel `exp(-D / (2 sigma^2)) / (sqrt(2 pi) sigma)^3` of a distance `D`.
pub fn kernel_from_distance(distance: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let norm = ((2.0 * std::f64::consts::PI).sqrt() * sigma).powi(3);
    Ok((-distance / (2.0 * sigma * sigma)).exp() / norm)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "kernel width must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Mean squared voxel difference between two single-channel volumes.
pub fn mean_sq_distance(a: &Volume, b: &Volume) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let ss: f64 = a.voxels().zip(b.voxels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(ss / a.voxel_count() as f64)
}

fn common_grid(a: &HfFeatures, b: &HfFeatures) -> Result<(usize, usize)> {
    let (ra, ca, da) = a.dims();
    let (rb, cb, db) = b.dims();
    if da != db {
        return Err(Error::DimensionMismatch(format!(
            "feature depths {da} and {db} differ"
        )));
    }
    Ok((ra.max(rb), ca.max(cb)))
}

/// Kernel similarity of two feature sets after reconciling them to a common grid.
pub fn kernel_value(xf: &HfFeatures, yf: &HfFeatures, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let (rows, cols) = common_grid(xf, yf)?;
    let d = mean_sq_distance(&reconcile(xf, rows, cols)?, &reconcile(yf, rows, cols)?)?;
    kernel_from_distance(d, sigma)
}

/// Builds the `P x Q` kernel matrix between source and target features.
pub fn build_kernel_matrix(
    xs: &[HfFeatures],
    ys: &[HfFeatures],
    sigma: f64,
) -> Result<KernelMatrix> {
    check_sigma(sigma)?;
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Empty("alignment feature sets"));
    }
    let (mut rows, mut cols) = (0, 0);
    for x in xs {
        for y in ys {
            let (r, c) = common_grid(x, y)?;
            rows = rows.max(r);
            cols = cols.max(c);
        }
    }
    let rx = par::map_slice(xs, |x| reconcile(x, rows, cols))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ry = par::map_slice(ys, |y| reconcile(y, rows, cols))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let q = ys.len();
    let entries = par::map_range(xs.len() * q, |idx| {
        mean_sq_distance(&rx[idx / q], &ry[idx % q]).and_then(|d| kernel_from_distance(d, sigma))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    KernelMatrix::new(xs.len(), q, entries, sigma)
}

/// Keeps each row's maximum; ties go to the lowest column index.
pub fn binarize_alignment(km: &KernelMatrix) -> AlignmentMatrix {
    let mut matches = Vec::with_capacity(km.rows);
    let mut scores = Vec::with_capacity(km.rows);
    for p in 0..km.rows {
        let row = km.row(p);
        let mut best = 0;
        for (q, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = q;
            }
        }
        matches.push(best);
        scores.push(row[best]);
    }
    AlignmentMatrix {
        cols: km.cols,
        matches,
        scores,
    }
}

/// Turns an alignment into training pairs.
///
/// `registered` lists known `(source, target)` index pairs; those sources keep
/// their partner and bypass the alignment. Every other source is paired with
/// its aligned target and records the kernel value.
pub fn make_virtual_pairs(
    xs: &[Volume],
    ys: &[Volume],
    am: &AlignmentMatrix,
    registered: &[(usize, usize)],
) -> Result<Vec<TrainingPair>> {
    if am.rows() != xs.len() || am.cols() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "alignment is {}x{} for {} sources and {} targets",
            am.rows(),
            am.cols(),
            xs.len(),
            ys.len()
        )));
    }
    let mut known: Vec<Option<usize>> = vec![None; xs.len()];
    for &(p, q) in registered {
        if p >= xs.len() || q >= ys.len() {
            return Err(Error::InvalidParameter(format!(
                "registered pair ({p}, {q}) out of range"
            )));
        }
        known[p] = Some(q);
    }
    Ok(xs
        .iter()
        .enumerate()
        .map(|(p, x)| match known[p] {
            Some(q) => TrainingPair {
                source: x.clone(),
                target: ys[q].clone(),
                registered: true,
                kernel: None,
            },
            None => TrainingPair {
                source: x.clone(),
                target: ys[am.matches[p]].clone(),
                registered: false,
                kernel: Some(am.scores[p]),
            },
        })
        .collect())
}

/// Extracts features and aligns every source without a known partner.
///
/// Returns one pair per source, in source order.
pub fn align_sets(
    sources: &[Volume],
    targets: &[Volume],
    registered: &[(usize, usize)],
    sigma: f64,
) -> Result<Vec<TrainingPair>> {
    check_sigma(sigma)?;
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::Empty("alignment volumes"));
    }
    let xs = par::map_slice(sources, extract_hf_lr)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ys = par::map_slice(targets, extract_hf_hr)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let km = build_kernel_matrix(&xs, &ys, sigma)?;
    let am = binarize_alignment(&km);
    make_virtual_pairs(sources, targets, &am, registered)
}

/// Squared HF discrepancy summed over pairs; constant with respect to the
/// learned filters, maps and mapping.
pub fn alignment_residual(pairs: &[TrainingPair]) -> Result<f64> {
    let parts = par::map_slice(pairs, |p| -> Result<f64> {
        let xf = extract_hf_lr(&p.source)?;
        let yf = extract_hf_hr(&p.target)?;
        pair_residual(&xf, &yf)
    });
    parts.into_iter().sum()
}

/// Squared discrepancy between one pair of features on their common grid.
pub fn pair_residual(xf: &HfFeatures, yf: &HfFeatures) -> Result<f64> {
    let (rows, cols) = common_grid(xf, yf)?;
    let a = reconcile(xf, rows, cols)?;
    let b = reconcile(yf, rows, cols)?;
    Ok(a.voxels().zip(b.voxels()).map(|(x, y)| (x - y) * (x - y)).sum())
}
