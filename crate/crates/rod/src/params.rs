//! Named parameter store.
//!
//! Every model tensor lives in a [`TensorMap`] keyed by a dotted name. Names
//! partition into the `encoder.` and `decoder.` groups, which is how the
//! frozen/trainable split, the optimizer, checkpointing and the frozen
//! contract audit all decide what they may touch.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView4, ArrayViewD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Result, RodError};
use crate::tensor::Elem;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

/// Ordered name → tensor map. Iteration order is the sorted name order, which
/// keeps initialization, checkpoints and snapshots deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap<T> {
    entries: BTreeMap<String, ArrayD<T>>,
}

impl<T: Elem> Default for TensorMap<T> {
    fn default() -> Self {
        TensorMap {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Elem> TensorMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| RodError::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| RodError::Config(format!("missing parameter {name:?}")))
    }

    pub fn view1(&self, name: &str) -> Result<ArrayView1<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality()
            .map_err(|_| bad_rank(name, 1))
    }

    pub fn view2(&self, name: &str) -> Result<ArrayView2<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality()
            .map_err(|_| bad_rank(name, 2))
    }

    pub fn view4(&self, name: &str) -> Result<ArrayView4<'_, T>> {
        self.get(name)?
            .view()
            .into_dimensionality()
            .map_err(|_| bad_rank(name, 4))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Accumulate `other` into self, inserting missing names.
    pub fn accumulate(&mut self, other: TensorMap<T>) {
        for (name, value) in other.entries {
            match self.entries.get_mut(&name) {
                Some(dst) => *dst += &value,
                None => {
                    self.entries.insert(name, value);
                }
            }
        }
    }

    /// Names in the group selected by `prefix` ("" selects everything).
    pub fn group_names(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Bitwise little-endian snapshot of a parameter group.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Vec<u8>> {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), tensor_le_bytes(&v.view())))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

fn bad_rank(name: &str, rank: usize) -> RodError {
    RodError::Config(format!("parameter {name:?} does not have rank {rank}"))
}

/// Serialize a tensor to little-endian bytes in logical (row-major) order.
pub fn tensor_le_bytes<T: Elem>(t: &ArrayViewD<'_, T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(t.len() * T::DTYPE.byte_size());
    for v in t.iter() {
        v.write_le(&mut buf);
    }
    buf
}

/// Decode a tensor from little-endian bytes.
pub fn tensor_from_le_bytes<T: Elem>(shape: &[usize], bytes: &[u8]) -> Result<ArrayD<T>> {
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| RodError::Checkpoint(format!("shape {shape:?} overflows")))?;
    let sz = T::DTYPE.byte_size();
    if n.checked_mul(sz).is_none_or(|want| bytes.len() != want) {
        return Err(RodError::Checkpoint(format!(
            "tensor byte length {} does not match shape {:?} ({} bytes expected)",
            bytes.len(),
            shape,
            n * sz
        )));
    }
    let data: Vec<T> = bytes.chunks_exact(sz).map(T::read_le).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| RodError::Checkpoint(format!("bad tensor shape {shape:?}: {e}")))
}

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std sqrt(2 / fan_in), for conv weights ahead of ReLU.
    HeNormal,
}

/// Name, shape and initializer of one model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

fn conv_block_specs(specs: &mut Vec<ParamSpec>, prefix: &str, channels: usize, kernel: usize, with_norm: bool) {
    for idx in ["1", "2"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.conv{idx}.weight"),
            &[channels, channels, kernel, kernel],
            Init::HeNormal,
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.conv{idx}.bias"),
            &[channels],
            Init::Zeros,
        ));
        if with_norm {
            specs.push(ParamSpec::new(
                format!("{prefix}.norm{idx}.weight"),
                &[channels],
                Init::Ones,
            ));
            specs.push(ParamSpec::new(
                format!("{prefix}.norm{idx}.bias"),
                &[channels],
                Init::Zeros,
            ));
        }
    }
}

/// Full parameter inventory of a model with the given configuration.
/// This is the single source of truth shared by initialization, checkpoint
/// validation and `inspect-ckpt`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.embed_dim;
    let fw = cfg.fusion_width;
    let dw = cfg.decoder_width;
    let hidden = cfg.mlp_hidden();
    let mut specs = Vec::new();

    // encoder
    specs.push(ParamSpec::new(
        "encoder.patch_embed.weight",
        &[c, 3, cfg.patch_size, cfg.patch_size],
        Init::Normal(0.02),
    ));
    specs.push(ParamSpec::new("encoder.patch_embed.bias", &[c], Init::Zeros));
    specs.push(ParamSpec::new(
        "encoder.pos_embed",
        &[1, cfg.pos_base_grid, cfg.pos_base_grid, c],
        Init::Normal(0.02),
    ));
    for i in 0..cfg.depth {
        let p = format!("encoder.blocks.{i}");
        specs.push(ParamSpec::new(format!("{p}.norm1.weight"), &[c], Init::Ones));
        specs.push(ParamSpec::new(format!("{p}.norm1.bias"), &[c], Init::Zeros));
        specs.push(ParamSpec::new(
            format!("{p}.attn.qkv.weight"),
            &[3 * c, c],
            Init::Normal(0.02),
        ));
        specs.push(ParamSpec::new(format!("{p}.attn.qkv.bias"), &[3 * c], Init::Zeros));
        specs.push(ParamSpec::new(
            format!("{p}.attn.proj.weight"),
            &[c, c],
            Init::Normal(0.02),
        ));
        specs.push(ParamSpec::new(format!("{p}.attn.proj.bias"), &[c], Init::Zeros));
        specs.push(ParamSpec::new(format!("{p}.norm2.weight"), &[c], Init::Ones));
        specs.push(ParamSpec::new(format!("{p}.norm2.bias"), &[c], Init::Zeros));
        specs.push(ParamSpec::new(
            format!("{p}.mlp.fc1.weight"),
            &[hidden, c],
            Init::Normal(0.02),
        ));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc1.bias"), &[hidden], Init::Zeros));
        specs.push(ParamSpec::new(
            format!("{p}.mlp.fc2.weight"),
            &[c, hidden],
            Init::Normal(0.02),
        ));
        specs.push(ParamSpec::new(format!("{p}.mlp.fc2.bias"), &[c], Init::Zeros));
    }
    specs.push(ParamSpec::new(
        "encoder.neck.conv1.weight",
        &[fw, c, 1, 1],
        Init::Normal(0.02),
    ));
    specs.push(ParamSpec::new("encoder.neck.conv1.bias", &[fw], Init::Zeros));
    specs.push(ParamSpec::new("encoder.neck.norm1.weight", &[fw], Init::Ones));
    specs.push(ParamSpec::new("encoder.neck.norm1.bias", &[fw], Init::Zeros));
    specs.push(ParamSpec::new(
        "encoder.neck.conv2.weight",
        &[fw, fw, 3, 3],
        Init::Normal(0.02),
    ));
    specs.push(ParamSpec::new("encoder.neck.conv2.bias", &[fw], Init::Zeros));
    specs.push(ParamSpec::new("encoder.neck.norm2.weight", &[fw], Init::Ones));
    specs.push(ParamSpec::new("encoder.neck.norm2.bias", &[fw], Init::Zeros));

    // decoder
    if cfg.shared_latent_projection {
        specs.push(ParamSpec::new(
            "decoder.project.shared.weight",
            &[dw, c, 1, 1],
            Init::HeNormal,
        ));
        specs.push(ParamSpec::new("decoder.project.shared.bias", &[dw], Init::Zeros));
    } else {
        for i in 0..cfg.depth {
            specs.push(ParamSpec::new(
                format!("decoder.project.{i}.weight"),
                &[dw, c, 1, 1],
                Init::HeNormal,
            ));
            specs.push(ParamSpec::new(
                format!("decoder.project.{i}.bias"),
                &[dw],
                Init::Zeros,
            ));
        }
    }
    conv_block_specs(&mut specs, "decoder.fuse", dw, 3, cfg.conv_block_norm);
    specs.push(ParamSpec::new(
        "decoder.expand.weight",
        &[fw, dw, 1, 1],
        Init::HeNormal,
    ));
    specs.push(ParamSpec::new("decoder.expand.bias", &[fw], Init::Zeros));
    conv_block_specs(&mut specs, "decoder.usl1", fw, 3, cfg.conv_block_norm);
    conv_block_specs(&mut specs, "decoder.usl2", fw, 3, cfg.conv_block_norm);
    specs.push(ParamSpec::new(
        "decoder.fusion.weight",
        &[fw, 4 * fw, 1, 1],
        Init::HeNormal,
    ));
    specs.push(ParamSpec::new("decoder.fusion.bias", &[fw], Init::Zeros));
    specs.push(ParamSpec::new(
        "decoder.head.weight",
        &[cfg.num_classes, fw, 1, 1],
        Init::HeNormal,
    ));
    specs.push(ParamSpec::new("decoder.head.bias", &[cfg.num_classes], Init::Zeros));

    specs
}

/// Fresh parameters for `cfg`, deterministically seeded.
pub fn init_params<T: Elem>(cfg: &ModelConfig, seed: u64) -> TensorMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut map = TensorMap::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<T> = match spec.init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => (0..n)
                .map(|_| T::from_f64(normal.sample(&mut rng) * std))
                .collect(),
            Init::HeNormal => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(normal.sample(&mut rng) * std))
                    .collect()
            }
        };
        map.insert(
            spec.name,
            ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("spec shape"),
        );
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_partition_into_encoder_and_decoder() {
        let cfg = ModelConfig::desk();
        let specs = param_specs(&cfg);
        assert!(specs
            .iter()
            .all(|s| s.name.starts_with(ENCODER_PREFIX) || s.name.starts_with(DECODER_PREFIX)));
        let names: std::collections::BTreeSet<_> = specs.iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), specs.len(), "duplicate parameter name");
    }

    #[test]
    fn init_is_deterministic_for_fixed_seed() {
        let cfg = ModelConfig::desk();
        let a: TensorMap<f32> = init_params(&cfg, 42);
        let b: TensorMap<f32> = init_params(&cfg, 42);
        assert_eq!(a.snapshot(""), b.snapshot(""));
        let c: TensorMap<f32> = init_params(&cfg, 43);
        assert_ne!(a.snapshot(""), c.snapshot(""));
    }

    #[test]
    fn shared_projection_flag_changes_inventory() {
        let mut cfg = ModelConfig::desk();
        cfg.shared_latent_projection = true;
        let specs = param_specs(&cfg);
        assert!(specs.iter().any(|s| s.name == "decoder.project.shared.weight"));
        assert!(!specs.iter().any(|s| s.name == "decoder.project.0.weight"));
    }

    #[test]
    fn byte_round_trip_is_lossless() {
        let cfg = ModelConfig::desk();
        let map: TensorMap<f64> = init_params(&cfg, 7);
        for (name, tensor) in map.iter() {
            let bytes = tensor_le_bytes(&tensor.view());
            let back: ArrayD<f64> = tensor_from_le_bytes(tensor.shape(), &bytes).unwrap();
            assert_eq!(tensor, &back, "{name}");
        }
    }
}
