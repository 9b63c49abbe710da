//! Minimal dense neural-network toolkit: tensors, a differentiation tape,
//! parameter storage with Adam, and the layers used by the models.

pub mod graph;
pub mod denoiser;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Segment, Var};
pub use params::{AdamConfig, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
pub use denoiser::{DenoiserConfig, DenoiserNet};
