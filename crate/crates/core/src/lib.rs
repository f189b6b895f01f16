//! Reconstruction of a 2D object from 1D parallel-beam projections taken at
//! unknown view angles with unknown detector shifts, heavy noise and outliers.

pub mod cluster;
pub mod denoise;
pub mod error;
pub mod hlcc;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod radon;
pub mod refine;
pub mod sparse;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{canonicalize_angle, Image, OutlierClass, Pose, Projection, ProjectionSet, RngSeed, TruthRecord};
