//! Desk-scale audio-to-video generation stack: an invertible latent codec,
//! condition encoders, a multimodal diffusion transformer trained by flow
//! matching, a guided ODE sampler, and sequence-parallel attention.
//!
//! All numeric code is generic over [`scalar::Scalar`]; the aliases below pin
//! the two supported widths.

pub mod codec;
pub mod cond;
pub mod cp;
pub mod flow;
pub mod gradcheck;
pub mod io;
pub mod mmdit;
pub mod optim;
pub mod sampler;
pub mod scalar;

pub use scalar::Scalar;

/// Width used by training, sampling, and every tolerance-critical test.
pub type DefaultScalar = f64;

pub type LatentVideoF64 = codec::LatentVideo<f64>;
pub type LatentVideoF32 = codec::LatentVideo<f32>;
pub type PixelChunkF64 = codec::PixelChunk<f64>;
pub type PixelChunkF32 = codec::PixelChunk<f32>;
pub type ModelParamsF64 = mmdit::ModelParams<f64>;
pub type ModelParamsF32 = mmdit::ModelParams<f32>;
