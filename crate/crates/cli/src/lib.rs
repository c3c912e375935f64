//! Command-line front end: configuration, the synthetic-scene generator,
//! the training loop, and the `mirage-mini` subcommands built on top of the
//! core model and the curation pipeline.

use std::path::PathBuf;

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod data;
pub mod trainer;

pub use config::RunConfig;
pub use data::{make_synthetic_dataset, SyntheticScene};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}; last checkpoint kept")]
    NonFiniteLoss { step: u64 },
    #[error("no checkpoint found under {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codec(#[from] mirage_core::codec::CodecError),
    #[error(transparent)]
    Cond(#[from] mirage_core::cond::CondError),
    #[error(transparent)]
    Flow(#[from] mirage_core::flow::FlowError),
    #[error(transparent)]
    Model(#[from] mirage_core::mmdit::MmditError),
    #[error(transparent)]
    Optim(#[from] mirage_core::optim::OptimError),
    #[error(transparent)]
    Sampler(#[from] mirage_core::sampler::SamplerError),
    #[error(transparent)]
    Cp(#[from] mirage_core::cp::CpError),
    #[error(transparent)]
    Checkpoint(#[from] mirage_core::io::IoError),
    #[error(transparent)]
    Curation(#[from] mirage_curation::CurationError),
    #[error(transparent)]
    Store(#[from] mirage_curation::StoreError),
}
