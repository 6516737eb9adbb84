//! spikecodec: a from-scratch spiking-neural-network coding toolkit.
//!
//! Implements gated attention coding alongside classical SNN input coding
//! schemes (direct, rate, phase, time-to-first-spike), trains small
//! spike-driven networks with surrogate-gradient backpropagation through
//! time, and quantifies each scheme's temporal dynamics (observer-model
//! entropy, firing period) and hardware cost (MAC/AC energy model).

pub mod analysis;
pub mod coding;
pub mod data;
pub mod energy;
pub mod error;
pub mod network;
pub mod neuron;
pub mod ops;
pub mod svg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
