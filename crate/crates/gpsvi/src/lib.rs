//! Desk-scale CTR laboratory for group-prior variational user-behavior modeling.
//!
//! The crate implements GPSVI (group prior sampler variational inference): an
//! attention-based behavior encoder whose output is treated as the mean of a
//! Gaussian posterior over latent user interest, a group-prior network that
//! restricts the stochastic correction to the span of a learned group-interest
//! vector, a volume-preserving additive-coupling flow on the latent sample, and
//! the training/evaluation harness (baselines, segment-wise AUC, diagnostic
//! reports) needed to study the long-tail regime.
//!
//! Everything runs on a small f64 tensor engine with recorded reverse-mode
//! differentiation ([`tensor`]); training is deterministic for fixed seeds.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod flow;
pub mod jsonfmt;
pub mod models;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod variational;

pub use config::{DataConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig};
pub use data::{Dataset, ExampleRecord, SegmentLabel, SynthConfig};
pub use tensor::{Tape, Tensor, TensorError};
