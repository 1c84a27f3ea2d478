//! Stochastic WaveNet: a dilated causal convolutional sequence model with
//! per-layer latent variables, trained by amortized variational inference.
//!
//! The crate carries its own small reverse-mode tensor engine ([`tape`]),
//! the generative and inference networks ([`model`]), the evidence lower
//! bound ([`objective`]), the training loop ([`train`]) and dataset
//! utilities ([`data`], [`synth`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod par;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use data::{Dataset, NormStats, Sequence, SequenceBatch};
pub use error::{Error, Result};
pub use model::SWaveNet;
pub use params::ParamStore;
pub use tape::{Graph, Var};
pub use tensor::Tensor;
