//! Symmetric equilibrium GAN for retinal vessel segmentation.

pub mod cli;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod training;
