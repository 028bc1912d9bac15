//! Multi-level construal neural network (MLCNN) for multivariate time-series
//! forecasting.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a define-by-run
//!   reverse-mode tape with finite-difference gradient checking.
//! - [`nn`]: zero-padded Conv1D, LSTM, dense alignment, dropout, initialisers.
//! - [`model`]: the construal chain, the shared fusion encoder, the main
//!   decoder, the autoregressive head and the ablation variants.
//! - [`train`]: L1/L2 losses, Adam and the early-stopping training loop.
//! - [`data`]: CSV ingestion, chronological splits, scaling and windowing.
//! - [`metrics`], [`baseline`], [`stats`]: evaluation, reference forecasters
//!   and Welch's t-test.
//! - [`config`]: the flat `key = value` run configuration.

pub mod autodiff;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{ForecastOutput, Mlcnn, ModelConfig, Variant};
pub use nn::Mode;
pub use params::ParameterStore;
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainReport};
