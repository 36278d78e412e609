//! Latent-diffusion video editor: hashed text embeddings, condition
//! dropout, a small trainable denoiser with vision conditioning by channel
//! concatenation, decoupled classifier-free guidance, DDIM sampling, and
//! checkpointing.

pub mod checkpoint;
pub mod codec;
pub mod dropout;
pub mod embed;
pub mod guidance;
pub mod model;
pub mod sample;
pub mod train;

use thiserror::Error;

use crate::numkit::TensorError;
use crate::schedule::ScheduleError;

pub use checkpoint::{load_model, save_model, CheckpointError, NamedArray};
pub use codec::{CenteredCodec, IdentityCodec, LatentCodec};
pub use dropout::{drop_conditions, DropLabel, DropoutError, DropoutPolicy};
pub use embed::{embed_text, null_text, TEXT_DIM};
pub use guidance::{cfg_noise, GuidanceConfig, GuidanceMode, StubDenoiser};
pub use model::{Denoiser, DenoiserConfig, DenoiserModel, PARAM_NAMES};
pub use sample::edit_video;
pub use train::{model_init_seed, train_loop, training_step, TrainConfig, TrainState};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("model produced a non-finite value")]
    NonFiniteOutput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Dropout(#[from] DropoutError),
}
