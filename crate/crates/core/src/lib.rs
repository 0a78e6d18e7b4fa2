//! Volumetric fusion of multi-view 2D segmentation scores with a shallow
//! 3D convolutional network.

pub mod datapipe;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod protocol;
pub mod runtime;
pub mod tensor;
pub mod vfn;
pub mod volgrid;

pub use error::{Error, Result};
