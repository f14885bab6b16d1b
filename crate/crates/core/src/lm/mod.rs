//! Decoder-only autoregressive transformer with mixed continuous/discrete
//! prefix conditioning.

mod checkpoint;
mod generate;
pub mod kernels;
mod model;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use generate::{generate, generate_from, in_top_k, sample_many, top_k_indices, Generation, Strategy};
pub use kernels::Matrix;
pub use model::{Assembled, ConditioningBundle, Decoder, DecoderLM, Grads, Param, Payload, Tape};

#[cfg(test)]
mod tests;
