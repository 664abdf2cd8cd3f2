//! Dense tensor plumbing shared by the encoder, decoder and training code.
//!
//! Everything is built on `ndarray` with a single element trait [`Elem`]
//! implemented for `f32` and `f64`, so the whole model can run in either
//! precision. Layout conventions:
//!
//! - images and feature maps are NCHW `(batch, channel, height, width)`
//! - token grids are channels-last `(batch, grid_h, grid_w, embed_dim)`
//!
//! Linear-algebra kernels route through `ndarray`'s matrixmultiply backend;
//! the thread count is controlled by `MATMUL_NUM_THREADS`.

pub mod ops;
pub mod trace;

use ndarray::{Array4, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RodError};

/// Element dtype recorded in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn byte_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Floating-point element type the model is generic over.
pub trait Elem: NdFloat + Default + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64_val(self) -> f64;

    /// Append this value to `buf` as little-endian bytes.
    fn write_le(self, buf: &mut Vec<u8>);

    /// Decode one value from the front of `bytes` (must hold enough bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_val(self) -> f64 {
        self as f64
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_val(self) -> f64 {
        self
    }

    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Batched image / feature map, NCHW layout.
pub type ImageTensor<T> = Array4<T>;

/// Batched token grid, `(batch, grid_h, grid_w, embed_dim)` layout.
pub type TokenGrid<T> = Array4<T>;

/// Per-pixel class logits, `(batch, num_classes, height, width)`.
pub type SegLogits<T> = Array4<T>;

/// Errors with the offending stage name if any entry is non-finite.
pub fn ensure_finite<T: Elem, D: ndarray::Dimension>(
    x: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, D>,
    stage: &str,
) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(RodError::Numerical(format!(
            "non-finite value produced in {stage}"
        )))
    }
}

/// Checks a rank-4 shape and reports a descriptive error on mismatch.
pub fn expect_shape4<T: Elem>(x: &Array4<T>, want: [usize; 4], context: &str) -> Result<()> {
    let got = x.dim();
    let got = [got.0, got.1, got.2, got.3];
    if got == want {
        Ok(())
    } else {
        Err(RodError::shape(context, format!("{want:?}"), format!("{got:?}")))
    }
}
