//! Contrastive representation learning for 2-channel eye-movement velocity
//! signals: preprocessing, augmentation, a dilated residual TCN encoder,
//! the NT-Xent objective, training, and linear-probe evaluation.

pub mod augment;
pub mod encoder;
pub mod ingest;
pub mod numcore;
pub mod objective;
pub mod pipeline;
pub mod probe;
pub mod rng;
