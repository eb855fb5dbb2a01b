//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] crate::playdata::DataError),
    #[error("codec: {0}")]
    Codec(#[from] crate::codec::CodecError),
    #[error("nn: {0}")]
    Nn(#[from] crate::nn::NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::nn::CheckpointError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("sampler: {0}")]
    Sampler(#[from] crate::sampler::SamplerError),
    #[error("env: {0}")]
    Env(#[from] crate::envs::EnvError),
    #[error("train: {0}")]
    Train(#[from] crate::trainer::TrainError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
