//! Shared-basis anatomical manifold with diffeomorphic deformation, for
//! segmentation domain adaptation in both the source-accessible and the
//! source-free setting.
//!
//! An image is explained by a point `w` on the probability simplex that
//! blends a bank of learnable Gaussian anatomical bases into a canonical
//! template, a stack of stationary-velocity diffeomorphisms that bends the
//! template onto the image, and a style code that sets its appearance.
//!
//! Scale indices (`level`) are zero-based in the Rust API: level 0 is the
//! coarsest map. Configuration files use the one-based numbering.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod deformation;
mod error;
pub mod evaluation;
pub mod losses;
pub mod manifold;
pub mod networks;
pub mod selftest;
pub mod simplex;
pub mod training;

pub use anatomix_tensor as tensor;
pub use error::{Error, Result};
pub(crate) use error::io_err;

/// Element type used for training and inference.
pub type F = f32;
