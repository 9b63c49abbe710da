pub mod diffusion;
pub mod error;
pub mod nn;
pub mod so3;

pub use error::{Error, Result};
pub mod kinematics;
pub mod rng;
pub mod dataset;
pub mod sequence;
pub mod config;
pub mod model;
pub mod training;
pub mod mar;
pub mod metrics;
pub mod checks;
