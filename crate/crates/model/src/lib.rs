//! Sequence model for symbolic regression: point-set encoder, expression
//! decoder, training loop, sampling/beam decoding and checkpointing.

pub mod autodiff;
pub mod checkpoint;
pub mod decode;
pub mod train;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use decode::{decode_beam, decode_sample, encode_input, DecodeStrategy, ModelDecoder};
pub use train::{train, TrainConfig, TrainMetrics};
pub use transformer::{Forward, Model, ModelConfig};
