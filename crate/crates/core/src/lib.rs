//! Implicit spatiotemporal motion fields.
//!
//! A sinusoidal MLP takes a canonical point `x` together with a normalized
//! time `t` and predicts an affine map `y = A(x,t)·x + u(x,t)`. Constraining
//! `A` gives the translation, rigid and scaled-rigid variants; a per-frame
//! translation field and two non-sinusoidal models serve as baselines.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root fix the 64-bit instantiation used throughout the CLI.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod motion;
pub mod real;
pub mod siren;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type SirenParams = siren::SirenParams<f64>;
pub type MotionModel = motion::MotionModel<f64>;
pub type ReluPeParams = baselines::ReluPeParams<f64>;
pub type BoneCloudParams = baselines::BoneCloudParams<f64>;

pub use geometry::{KdTree, Mesh, PointSet};
pub use motion::Variant;
pub use synth::TrajectorySet;
pub use train::{RegMode, TrainConfig, TrainReport};
