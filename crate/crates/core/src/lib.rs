//! Permutable hybrid CNN+MLP network for anisotropic volumetric segmentation.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mlpp;
pub mod model;
pub mod nn;
pub mod params;
pub mod volume;

pub use error::{PhnetError, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use volume::{Grid, LabelVolume, Volume};
