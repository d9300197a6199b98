//! Georeferencing of multi-epoch aerial image blocks: rough DSM-based
//! co-registration, inter-epoch precise matching with robust filtering, and
//! a combined bundle adjustment with self-calibration, plus evaluation
//! tools and a synthetic ground-truth scene generator.

// Validation uses `!(x > 0.0)` on purpose: unlike `x <= 0.0` it also
// rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod cameras;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod io;
pub mod matcher;
pub mod pipeline;
pub mod precise_match;
pub mod rasters;
pub mod rough_coreg;
pub mod synthetic;
pub mod transforms;

pub use nalgebra;

pub use bundle::{BaProblem, TiePoint};
pub use cameras::{EpochBlock, FraserCamera, Pose, Surface};
pub use error::{Error, Result};
pub use matcher::{PixelMatch, TileMatcher};
pub use pipeline::{Pipeline, PipelineConfig};
pub use rasters::{DsmRaster, GeoGrid, GrayImage};
pub use transforms::{Helmert3D, Similarity2D};
