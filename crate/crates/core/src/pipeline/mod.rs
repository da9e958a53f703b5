//! Contrastive training loop, run configuration, and checkpoints.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_menu, ConfigFile, TrainConfig};
pub use train::{batch_seed, batches_per_epoch, epoch_order, select_corpus, train, train_step, Checkpoint, LossRecord};

use thiserror::Error;

use crate::augment::AugmentError;
use crate::encoder::EncoderError;
use crate::numcore::NumError;
use crate::objective::ObjectiveError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("non-finite loss at iteration {iteration}; parameters left at the last good step")]
    NonFiniteLoss { iteration: u64 },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
