//! Experiment runner: configuration files, evaluation of trained networks
//! on the camera task, and the strategy comparison.

pub mod eval;
pub mod experiment;
pub mod compare;
pub mod gradcheck;
pub mod output;
