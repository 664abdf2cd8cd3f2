//! ROD: RGB-only off-road freespace detection.
//!
//! A frozen ViT encoder taps one latent token grid per transformer block and
//! produces an image embedding; a lightweight trainable decoder fuses the
//! latents and the embedding into a per-pixel freespace mask. The crate
//! covers the model, a frozen-encoder training loop, segmentation metrics, a
//! named-tensor checkpoint container, dataset ingestion and a per-stage
//! inference latency bench behind the `rod` binary.

pub mod bench;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use config::{LossReduction, ModelConfig, Precision, TrainConfig};
pub use error::{Result, RodError};
pub use model::Model;
