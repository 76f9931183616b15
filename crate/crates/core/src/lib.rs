//! Weakly-supervised joint convolutional sparse coding for simultaneous
//! super-resolution and cross-modality synthesis of volumes.
//!
//! The pipeline pairs unregistered source/target volumes by high-frequency
//! feature similarity ([`align`]), learns coupled source and target filter
//! banks with a linear mapping between their feature maps ([`joint`]), and
//! synthesizes target-domain volumes from new source volumes ([`synth`]).

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod align;
pub mod csc;
pub mod error;
pub mod features;
pub mod grid;
pub mod io;
pub mod joint;
mod linalg;
mod par;
pub mod quality;
pub mod resample;
pub mod synth;

pub use align::{align_sets, TrainingPair};
pub use csc::{encode, encode_coupled, update_filters, FeatureMapSet, FilterBank, SolverConfig};
pub use error::{Error, Result};
pub use grid::{Slice, Volume};
pub use joint::{train, MappingMatrix, TrainConfig, TrainedModel};
pub use quality::{psnr, ssim, MetricReport};
pub use synth::{synthesize_volume, SynthesisConfig};
