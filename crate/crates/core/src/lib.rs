//! Fitting implicit neural representations to sparse-view fan-beam CT data.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix it to double precision, which is what every solver
//! and experiment in this crate is tuned for.

// `!(a > b)` comparisons are deliberate: they reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod geometry;
pub mod inr;
pub mod io_formats;
pub mod optim;
pub mod phantom_sim;
pub mod projector;
pub mod recon;
pub mod scalar;
pub mod sino_filter;

pub use error::{Error, Result};
pub use geometry::{make_fan_geometry, make_grid_coords, FanGeometry, GridSpec};
pub use inr::{ArchKind, Architecture, HashConfig, ReluFourierConfig, SirenConfig};
pub use projector::{FanProjector, LinearOperator};
pub use scalar::Real;

pub type Image64 = projector::Image<f64>;
pub type Sinogram64 = projector::Sinogram<f64>;
pub type InrModel64 = inr::InrModel<f64>;
pub type Image32 = projector::Image<f32>;
pub type Sinogram32 = projector::Sinogram<f32>;
pub type InrModel32 = inr::InrModel<f32>;
