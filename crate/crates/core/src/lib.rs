//! Differentiable sample consensus.
//!
//! Hypothesise-score-select-refine robust fitting with three selection
//! strategies (hard argmax, soft argmax, probabilistic), the gradient
//! machinery to train a coordinate predictor and a hypothesis scorer through
//! the selection, and two synthetic problem families: 2D line fitting and
//! camera localisation from predicted scene coordinates.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the training
//! loops and problem generators run in `f64`. Aliases for the common
//! instantiations live at the crate root.

pub mod consensus;
pub mod diffgrad;
pub mod error;
pub mod geometry;
pub mod models;
pub mod problems;
pub mod scalar;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Intrinsics64 = geometry::Intrinsics<f64>;
pub type Intrinsics32 = geometry::Intrinsics<f32>;
pub type Correspondence64 = geometry::Correspondence<f64>;
pub type LineModel64 = solvers::LineModel<f64>;
pub type Mlp64 = models::Mlp<f64>;
pub type Mlp32 = models::Mlp<f32>;
pub type ParamVector64 = models::ParamVector<f64>;
pub type ScoreDistribution64 = consensus::ScoreDistribution<f64>;
pub type Gradient64 = diffgrad::Gradient<f64>;
