//! Multimodal diffusion transformer over four token streams.
//!
//! One joint attention sequence carries reference frames, text, audio, and the
//! noisy video, in that fixed order. Parameters are split three ways (visual,
//! text, audio) with the reference stream riding on the visual group.

use ndarray::Array2;
use thiserror::Error;

use crate::codec::CodecError;

pub mod attention;
pub mod block;
pub mod model;
pub mod nn;
pub mod rope;

pub use block::{
    adaln_parameters, joint_block_forward, BlockParams, ModalityBlockParams, Modulation,
    ParamModality, STREAM_ORDER,
};
pub use model::{
    model_backward, model_forward, model_forward_tape, model_infer, timestep_features, AttnCache,
    AttnCacheMode, InferOptions, ModelConfig, ModelParams, ModelTape, TensorMut, TensorRef,
    TimestepEmbedder, WindowSpec,
};
pub use nn::Linear;

/// Which stream a token bundle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Ref,
    Text,
    Audio,
    Video,
}

/// One stream's tokens plus its `(t, h, w)` rotary coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStream<S> {
    pub tokens: Array2<S>,
    pub modality: Modality,
    pub positions: Array2<S>,
}

#[derive(Debug, Error, PartialEq)]
pub enum MmditError {
    #[error("streams must arrive as [ref, text, audio, video]")]
    StreamOrder,
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("flow time {0} outside [0, 1]")]
    TimeRange(f64),
    #[error("non-finite activation after block {block}")]
    NonFinite { block: usize },
    #[error("skip index {idx} out of range for depth {depth}")]
    SkipIndex { idx: usize, depth: usize },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}
