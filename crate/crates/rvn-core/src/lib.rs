//! Voxel-based semantic instance detection and completion.
//!
//! From rendered RGB-D views of synthetic scenes, the pipeline fuses a TSDF
//! volume, back-projects learned 2D color features into the grid, runs a
//! unified detection + per-instance completion network, trains it end to end
//! and scores mAP@0.5 on complete per-voxel masks.
//!
//! The numeric core ([`tensor`], [`geom`]) is generic over the scalar type
//! via `num-traits`; the pipeline modules pin `f64` through the aliases
//! below, which is what the training tolerances are validated against.

pub mod completion;
pub mod detection;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod gradcheck;
pub mod network;
pub mod pipeline;
pub mod scalar;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense tensor at the training precision.
pub type Tensor = tensor::Tensor<f64>;
/// Differentiation tape at the training precision.
pub type Tape = tensor::tape::Tape<f64>;
/// Tape variable handle.
pub type Var = tensor::tape::Var;
/// Parameter set at the training precision.
pub type ParamSet = tensor::optim::ParamSet<f64>;
/// Axis-aligned box in voxel coordinates at the training precision.
pub type Box3 = geom::Box3<f64>;
