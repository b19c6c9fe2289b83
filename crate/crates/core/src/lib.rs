//! Teacher-feature stage regularization for segmentation encoders, with a
//! small reverse-mode autodiff engine, a desk-scale domain-adaptation trainer
//! and a synthetic domain-shift benchmark.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, FormatError, Result};
