//! Nonparallel voice conversion built on hierarchical vector-quantized
//! autoencoders.
//!
//! The crate is organized in layers:
//!
//! * [`signal`] — deterministic DSP: STFT, mel-filterbank, mel-cepstrum,
//!   F0 extraction, Griffin-Lim waveform reconstruction, WAV and feature
//!   file I/O.
//! * [`autograd`] — a minimal reverse-mode differentiation tape over dense
//!   real tensors, including the nonstandard gradient flows the model needs
//!   (stop-gradient, straight-through quantization, gradient reversal).
//! * [`netblocks`] — dilated-convolution gated blocks and the
//!   discriminator / speaker-classifier networks.
//! * [`vqmodel`] — the three-stack hierarchical VQ autoencoder, its forward
//!   pass and the conversion path.
//! * [`losses`] — the training loss catalog (reconstruction + codebook +
//!   commitment, cyclic, least-squares GAN, auxiliary classifier,
//!   speaker-adversarial, multiresolution STFT).
//! * [`trainer`] — training orchestration for the five method variants,
//!   batching, checkpointing and deterministic seeding.
//! * [`evaluation`] — DTW-aligned mel-cepstral distortion reports and the
//!   pluggable external scorer hook.
//! * [`pipeline`] — the staged recipe runner, synthetic corpus generator,
//!   TOML configuration and everything the `vqvc` binary dispatches to.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod autograd;
pub mod error;
pub(crate) mod fsutil;
pub mod evaluation;
pub mod losses;
pub mod netblocks;
pub mod pipeline;
pub mod signal;
pub mod trainer;
pub mod vqmodel;

pub use error::{Error, Result};
