//! Bundles a [`ModelConfig`] with its parameter store and exposes the whole
//! image -> logits -> mask pipeline.

use ndarray::Array3;

use crate::config::ModelConfig;
use crate::decoder::{decoder_forward, decoder_forward_traced, DecoderTrace};
use crate::encoder::{encoder_forward, EncoderOutput};
use crate::error::Result;
use crate::params::{init_params, TensorMap, ENCODER_PREFIX};
use crate::tensor::ops::argmax_classes;
use crate::tensor::{Elem, ImageTensor, SegLogits};

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: TensorMap<T>,
}

impl<T: Elem> Model<T> {
    /// Freshly initialized model with deterministic random weights.
    pub fn new_random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Model { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: TensorMap<T>) -> Self {
        Model { cfg, params }
    }

    pub fn encode(&self, image: &ImageTensor<T>) -> Result<EncoderOutput<T>> {
        encoder_forward(image, &self.cfg, &self.params)
    }

    pub fn decode(&self, enc: &EncoderOutput<T>, out_size: (usize, usize)) -> Result<SegLogits<T>> {
        decoder_forward(enc, &self.cfg, &self.params, out_size)
    }

    pub fn decode_traced(
        &self,
        enc: &EncoderOutput<T>,
        out_size: (usize, usize),
    ) -> Result<(SegLogits<T>, DecoderTrace<T>)> {
        decoder_forward_traced(enc, &self.cfg, &self.params, out_size)
    }

    /// Full forward pass to logits at `out_size`.
    pub fn forward(&self, image: &ImageTensor<T>, out_size: (usize, usize)) -> Result<SegLogits<T>> {
        let enc = self.encode(image)?;
        self.decode(&enc, out_size)
    }

    /// Predicted binary mask (1 = freespace) at `out_size`.
    pub fn predict_mask(&self, image: &ImageTensor<T>, out_size: (usize, usize)) -> Result<Array3<u8>> {
        Ok(argmax_classes(&self.forward(image, out_size)?))
    }

    /// Bitwise snapshot of the frozen encoder parameter group.
    pub fn encoder_snapshot(&self) -> std::collections::BTreeMap<String, Vec<u8>> {
        self.params.snapshot(ENCODER_PREFIX)
    }
}
