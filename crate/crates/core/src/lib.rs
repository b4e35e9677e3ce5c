//! Core library for fedcast: a desk-scale simulator for split federated
//! traffic forecasting with masked-node server training.
//!
//! The pieces compose bottom-up:
//!
//! * [`tensor`]: dense f64 tensors with reverse-mode autodiff and Adam.
//! * [`graph`]: client/cluster graph construction and spectral clustering.
//! * [`client`]: per-client GRU encoder and dual decoders.
//! * [`server`]: node masking and multi-granularity message passing.
//! * [`data`]: trace loading, standardization, windowing, synthesis.
//! * [`federation`]: the alternating client/server training protocol.
//! * [`eval`]: offline-robustness evaluation and sweeps.
//! * [`checkpoint`]: flat binary parameter container.

pub mod checkpoint;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod graph;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
