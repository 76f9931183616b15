//! Synthesis of target-domain volumes from source-domain inputs.
//!
//! A slice is coded with the source filters, its maps are mixed by `W`, and
//! the result is decoded with the target filters. Slices are coded with their
//! mean removed and the model's intensity map sets the output mean.
//! Refinement passes continue the map inference from the previous maps.

use serde::{Deserialize, Serialize};

use crate::csc::{encode_warm, reconstruct, FeatureMapSet, SolverConfig};
use crate::error::{Error, Result};
use crate::grid::{crop, pad_periodic, Slice, Volume};
use crate::joint::{remove_mean, TrainedModel};
use crate::par;

/// RMS change between refinement outputs below which synthesis stops early.
pub const REFINE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    /// Maximum refinement passes.
    pub iters: usize,
    pub solver: SolverConfig,
    pub pad: usize,
    /// Skip the final clamp to `[0, 1]`.
    pub raw: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            iters: 3,
            solver: SolverConfig::default(),
            pad: 8,
            raw: false,
        }
    }
}

impl SynthesisConfig {
    /// Inference settings matching the model's training settings.
    pub fn for_model(model: &TrainedModel) -> Self {
        Self {
            iters: 3,
            solver: model.config.solver(),
            pad: model.config.pad,
            raw: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidParameter("iters must be >= 1".into()));
        }
        self.solver.validate()
    }
}

/// Synthesizes one slice already on the target grid (unpadded).
pub fn synthesize_slice(s: &Slice, model: &TrainedModel, cfg: &SynthesisConfig) -> Result<Slice> {
    cfg.validate()?;
    let (centred, mean) = remove_mean(s);
    let level = model.intensity.apply(mean);
    let padded = pad_periodic(&centred, cfg.pad);
    if model.d() > padded.rows() || model.d() > padded.cols() {
        return Err(Error::FilterTooLarge {
            support: model.d(),
            rows: padded.rows(),
            cols: padded.cols(),
        });
    }
    let mut maps: Option<FeatureMapSet> = None;
    let mut out: Option<Slice> = None;
    for _ in 0..cfg.iters {
        let enc = encode_warm(&padded, &model.fbx, &cfg.solver, maps.as_ref())?;
        let y = reconstruct(&model.fby, &enc.maps.mixed(&model.w)?)?;
        let y = crop(&y, cfg.pad)?;
        let done = out.as_ref().is_some_and(|prev| rms_diff(prev, &y) < REFINE_TOL);
        maps = Some(enc.maps);
        out = Some(y);
        if done {
            break;
        }
    }
    let y = out.expect("at least one pass").map(|v| v + level);
    Ok(if cfg.raw { y } else { y.map(|v| v.clamp(0.0, 1.0)) })
}

fn rms_diff(a: &Slice, b: &Slice) -> f64 {
    let ss: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Synthesizes every slice of a volume already on the target grid.
pub fn synthesize_volume(v: &Volume, model: &TrainedModel, cfg: &SynthesisConfig) -> Result<Volume> {
    let slices = par::map_slice(v.slices(), |s| synthesize_slice(s, model, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices)
}
