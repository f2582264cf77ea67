//! Arbitrary-scale image super-resolution with a hierarchical-encoding
//! implicit image function.

pub mod tensor;
pub mod coords;
pub mod image;
pub mod nn;
pub mod encoder;
pub mod decoder;
pub mod model;
pub mod synth;
pub mod train;
pub mod eval;
pub mod config;
pub mod checkpoint;
pub mod gradcheck;
pub mod run;
