//! No-reference image quality assessment with quality-aware feature
//! matching: a small ViT encoder and cross-attention decoder, per-batch
//! noise matching and feature mixing, teacher pseudo-labels for an
//! unlabeled pool, synthetic data and the evaluation harness.

pub mod error;
pub mod analysis;
pub mod config;
pub mod data;
pub mod dle;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod qcc;
pub mod report;
pub mod snm;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use model::{DecoderConfig, EncoderConfig, FeatureMap, LabelScale, Model, ModelConfig};
pub use config::TrainConfig;
pub use train::{run_training, RunResult, TrainInputs, TrainObserver};
