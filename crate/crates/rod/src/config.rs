//! Architecture, training and run configuration.
//!
//! Run and dataset-layout configs are small flat `key = value` text files
//! (TOML grammar). Unknown keys are rejected so typos surface immediately.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RodError};

/// ViT encoder width presets. Widths follow the SAM / EfficientSAM family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VitVariant {
    H,
    L,
    B,
    S,
    T,
}

impl VitVariant {
    /// `(embed_dim, depth, num_heads)` of the variant.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            VitVariant::H => (1280, 32, 16),
            VitVariant::L => (1024, 24, 16),
            VitVariant::B => (768, 12, 12),
            VitVariant::S => (384, 12, 6),
            VitVariant::T => (192, 12, 3),
        }
    }
}

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Token embedding width.
    pub embed_dim: usize,
    /// Number of transformer blocks (and tapped latents).
    pub depth: usize,
    /// Attention heads per block.
    pub num_heads: usize,
    /// MLP hidden expansion factor.
    pub mlp_ratio: f64,
    /// Channel width of the summed latent path.
    pub decoder_width: usize,
    /// Channel width of the image embedding and upsample path.
    pub fusion_width: usize,
    /// Segmentation classes (2: not-freespace, freespace).
    pub num_classes: usize,
    /// Side of the stored position-embedding table, in tokens.
    pub pos_base_grid: usize,
    /// Epsilon for all normalization layers.
    pub norm_eps: f64,
    /// Apply channel normalization + ReLU inside decoder conv blocks.
    /// Disabled only by structural identity tests.
    pub conv_block_norm: bool,
    /// Share one latent projection across all tapped layers instead of a
    /// per-layer projection.
    pub shared_latent_projection: bool,
}

impl ModelConfig {
    /// Full-size configuration: ViT-S encoder at 1024 px, 16 px patches.
    pub fn paper() -> Self {
        Self::vit(VitVariant::S)
    }

    /// ViT-variant configuration at full input resolution.
    pub fn vit(variant: VitVariant) -> Self {
        let (embed_dim, depth, num_heads) = variant.dims();
        ModelConfig {
            input_size: 1024,
            patch_size: 16,
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            decoder_width: 128,
            fusion_width: 256,
            num_classes: 2,
            pos_base_grid: 64,
            norm_eps: 1e-6,
            conv_block_norm: true,
            shared_latent_projection: false,
        }
    }

    /// Small configuration for tests and desk-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 128,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            decoder_width: 32,
            fusion_width: 64,
            num_classes: 2,
            pos_base_grid: 16,
            norm_eps: 1e-6,
            conv_block_norm: true,
            shared_latent_projection: false,
        }
    }

    /// Tokens per side of the patch grid.
    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// MLP hidden width.
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(RodError::Config(msg));
        if self.input_size == 0 || self.patch_size == 0 {
            return fail("input_size and patch_size must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input_size {} is not a multiple of patch_size {}",
                self.input_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.decoder_width == 0 || self.fusion_width == 0 {
            return fail("decoder_width and fusion_width must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.pos_base_grid == 0 {
            return fail("pos_base_grid must be at least 1".into());
        }
        if self.mlp_ratio <= 0.0 {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Numeric precision the model runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl FromStr for Precision {
    type Err = RodError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(RodError::Usage(format!(
                "unknown precision {other:?}, expected f32 or f64"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Loss reduction over the pixel dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

/// Optimization schedule and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr0: f64,
    /// Poly decay exponent.
    pub power: f64,
    /// Total optimization steps T.
    pub total_steps: usize,
    pub batch_size: usize,
    /// Decoupled weight decay, applied to weight tensors only.
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    /// Run an analytic-vs-finite-difference gradient audit inside train_step.
    pub grad_check_mode: bool,
    /// Save a checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            power: 0.9,
            total_steps: 100,
            batch_size: 8,
            weight_decay: 1e-2,
            seed: 0,
            loss_reduction: LossReduction::Mean,
            grad_check_mode: false,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(RodError::Config("lr0 must be positive".into()));
        }
        if self.power < 0.0 {
            return Err(RodError::Config("power must be non-negative".into()));
        }
        if self.total_steps == 0 {
            return Err(RodError::Config("total_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(RodError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Image/mask preprocessing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Per-channel mean subtracted after scaling to [0, 1].
    pub image_mean: [f64; 3],
    /// Per-channel std divided after mean subtraction.
    pub image_std: [f64; 3],
    /// Mask pixels with luminance at or above this value are freespace.
    pub mask_threshold: u8,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            image_mean: [0.5, 0.5, 0.5],
            image_std: [0.5, 0.5, 0.5],
            mask_threshold: 128,
        }
    }
}

/// Dataset directory layout: where images and masks live and how their file
/// stems correspond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub image_dir: String,
    pub image_glob: String,
    pub mask_dir: String,
    pub mask_glob: String,
    /// Suffix stripped from mask stems before pairing with image stems.
    pub stem_strip_suffix: String,
}

impl Default for LayoutConfig {
    /// ORFD-style layout: `image_data/*.png` paired with
    /// `gt_image/*_fillcolor.png`.
    fn default() -> Self {
        LayoutConfig {
            image_dir: "image_data".into(),
            image_glob: "*.png".into(),
            mask_dir: "gt_image".into(),
            mask_glob: "*.png".into(),
            stem_strip_suffix: "_fillcolor".into(),
        }
    }
}

impl LayoutConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RodError::Config(format!("layout config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RodError::io(path, e))?;
        Self::parse_str(&text)
    }
}

/// Flat run configuration file: model preset and overrides, paths, training
/// hyperparameters. Every key is optional; command-line flags win over file
/// values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub precision: Option<String>,
    pub dataset_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub layout: Option<PathBuf>,

    pub lr0: Option<f64>,
    pub power: Option<f64>,
    pub total_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub loss_reduction: Option<String>,
    pub grad_check: Option<bool>,
    pub checkpoint_every: Option<usize>,

    pub input_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub depth: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub decoder_width: Option<usize>,
    pub fusion_width: Option<usize>,
    pub num_classes: Option<usize>,
    pub pos_base_grid: Option<usize>,
    pub conv_block_norm: Option<bool>,
    pub shared_latent_projection: Option<bool>,

    pub image_mean: Option<[f64; 3]>,
    pub image_std: Option<[f64; 3]>,
    pub mask_threshold: Option<u8>,
    pub overlay_alpha: Option<f64>,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RodError::Config(format!("run config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RodError::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Resolve the architecture: preset base, then per-field overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match self.preset.as_deref() {
            None | Some("desk") => ModelConfig::desk(),
            Some("paper") | Some("vit-s") => ModelConfig::paper(),
            Some("vit-h") => ModelConfig::vit(VitVariant::H),
            Some("vit-l") => ModelConfig::vit(VitVariant::L),
            Some("vit-b") => ModelConfig::vit(VitVariant::B),
            Some("vit-t") => ModelConfig::vit(VitVariant::T),
            Some(other) => {
                return Err(RodError::Config(format!(
                    "unknown preset {other:?}, expected paper, desk or vit-{{h,l,b,s,t}}"
                )))
            }
        };
        if let Some(v) = self.input_size {
            cfg.input_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.depth {
            cfg.depth = v;
        }
        if let Some(v) = self.num_heads {
            cfg.num_heads = v;
        }
        if let Some(v) = self.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        if let Some(v) = self.decoder_width {
            cfg.decoder_width = v;
        }
        if let Some(v) = self.fusion_width {
            cfg.fusion_width = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if let Some(v) = self.pos_base_grid {
            cfg.pos_base_grid = v;
        }
        if let Some(v) = self.conv_block_norm {
            cfg.conv_block_norm = v;
        }
        if let Some(v) = self.shared_latent_projection {
            cfg.shared_latent_projection = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.power {
            cfg.power = v;
        }
        if let Some(v) = self.total_steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.grad_check {
            cfg.grad_check_mode = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        match self.loss_reduction.as_deref() {
            None => {}
            Some("mean") => cfg.loss_reduction = LossReduction::Mean,
            Some("sum") => cfg.loss_reduction = LossReduction::Sum,
            Some(other) => {
                return Err(RodError::Config(format!(
                    "unknown loss_reduction {other:?}, expected mean or sum"
                )))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        let mut cfg = PreprocessConfig::default();
        if let Some(v) = self.image_mean {
            cfg.image_mean = v;
        }
        if let Some(v) = self.image_std {
            cfg.image_std = v;
        }
        if let Some(v) = self.mask_threshold {
            cfg.mask_threshold = v;
        }
        cfg
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.precision.as_deref() {
            None => Ok(Precision::F32),
            Some(s) => s.parse(),
        }
    }
}
