//! Desk-scale single-stream audio-video flow transformer.
//!
//! Everything runs on the CPU over plain `f32` buffers: a small tensor
//! kernel set, a reverse-mode tape, the token-sequence layout, the
//! sandwich-structured backbone with per-head gated attention, rectified-flow
//! sampling, latent super-resolution, and a toy end-to-end pipeline with
//! checkpointing and a text config format.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod sequence;
pub mod superres;
pub mod tape;
pub mod toyset;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{CoreError, Result};
pub use sequence::{AudioLatent, ModalityTag, TokenSequence};
pub use tensor::{LatentGrid, Tensor};
