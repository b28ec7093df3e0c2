//! Multi-camera bird's-eye-view detection through a polar intermediate
//! representation that can be resampled to any Cartesian BEV resolution.

pub mod camgeom;
pub mod det_head;
pub mod error;
pub mod harness;
pub mod mbie;
pub mod metrics;
pub mod numcore;
pub mod polargrid;
pub mod sampler;
pub mod synthscene;
pub mod view_transformer;

pub use error::{Error, Result};
