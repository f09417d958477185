//! Uncertainty-aware domain adaptation for point clouds: multi-view depth
//! projection, a small prompt- and adapter-conditioned encoder stack,
//! entropy-guided view selection, prototype and optimal-transport alignment.

pub mod alignment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pointcloud;
pub mod projection;
pub mod rng;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
