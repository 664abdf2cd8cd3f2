//! Named-tensor checkpoint container.
//!
//! On-disk layout: magic bytes `RODCKPT1`, a little-endian u64 length, a
//! UTF-8 JSON manifest of that length, then the raw tensor blob. The
//! manifest carries the format version, a full config snapshot and one entry
//! per tensor (name, dtype, shape, byte offset and length into the blob).
//! Tensors are stored little-endian in sorted name order, so save -> load ->
//! save is byte-identical.
//!
//! Parsing is defensive throughout: the reader is exercised directly by a
//! fuzz target and must reject malformed input with errors, never panics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Result, RodError};
use crate::model::Model;
use crate::params::{param_specs, tensor_from_le_bytes, tensor_le_bytes, TensorMap};
use crate::tensor::{Dtype, Elem};

pub const MAGIC: &[u8; 8] = b"RODCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Manifest entry for one stored tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// JSON header of an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// A parsed (but not yet typed) checkpoint: validated manifest plus blob.
#[derive(Debug, Clone)]
pub struct CheckpointArchive {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

impl CheckpointArchive {
    /// Parses and validates an archive from raw bytes.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let err = |msg: String| RodError::Checkpoint(msg);
        if data.len() < MAGIC.len() + 8 {
            return Err(err("truncated archive header".into()));
        }
        if &data[..MAGIC.len()] != MAGIC {
            return Err(err("bad magic bytes: not a ROD checkpoint".into()));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&data[MAGIC.len()..MAGIC.len() + 8]);
        let manifest_len = u64::from_le_bytes(len_bytes);
        let body = &data[MAGIC.len() + 8..];
        let manifest_len: usize = manifest_len
            .try_into()
            .map_err(|_| err("manifest length does not fit in memory".into()))?;
        if manifest_len > body.len() {
            return Err(err(format!(
                "manifest length {manifest_len} exceeds remaining {} bytes",
                body.len()
            )));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..manifest_len])
            .map_err(|e| err(format!("manifest JSON: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint format version {} (supported: {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let blob = body[manifest_len..].to_vec();
        validate_entries(&manifest.tensors, blob.len())?;
        Ok(CheckpointArchive { manifest, blob })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| RodError::io(path, e))?;
        Self::from_bytes(&data)
    }

    /// Dtype shared by all stored tensors.
    pub fn dtype(&self) -> Result<Dtype> {
        let first = self
            .manifest
            .tensors
            .first()
            .ok_or_else(|| RodError::Checkpoint("archive stores no tensors".into()))?;
        if let Some(bad) = self.manifest.tensors.iter().find(|t| t.dtype != first.dtype) {
            return Err(RodError::Checkpoint(format!(
                "mixed dtypes in archive: {} is {}, {} is {}",
                first.name,
                first.dtype.name(),
                bad.name,
                bad.dtype.name()
            )));
        }
        Ok(first.dtype)
    }

    /// Raw bytes of one tensor entry.
    pub fn tensor_bytes(&self, entry: &TensorEntry) -> &[u8] {
        let lo = entry.offset as usize;
        let hi = lo + entry.len as usize;
        &self.blob[lo..hi]
    }
}

fn validate_entries(entries: &[TensorEntry], blob_len: usize) -> Result<()> {
    let err = |msg: String| RodError::Checkpoint(msg);
    let mut names = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        if names.insert(e.name.clone(), i).is_some() {
            return Err(err(format!("duplicate tensor name {:?}", e.name)));
        }
        if !(e.name.starts_with("encoder.") || e.name.starts_with("decoder.")) {
            return Err(err(format!(
                "tensor {:?} is in neither the encoder nor decoder group",
                e.name
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| err(format!("shape overflow in {:?}", e.name)))?;
        let want_len = numel
            .checked_mul(e.dtype.byte_size())
            .ok_or_else(|| err(format!("byte-length overflow in {:?}", e.name)))?;
        if e.len as usize != want_len {
            return Err(err(format!(
                "tensor {:?}: {} bytes stored but shape {:?} needs {}",
                e.name, e.len, e.shape, want_len
            )));
        }
        let end = e
            .offset
            .checked_add(e.len)
            .ok_or_else(|| err(format!("offset overflow in {:?}", e.name)))?;
        if end as usize > blob_len {
            return Err(err(format!(
                "tensor {:?} extends to byte {end}, past the {blob_len}-byte blob",
                e.name
            )));
        }
    }
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| (e.offset, e.offset + e.len, e.name.as_str()))
        .collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(err(format!(
                "tensors {:?} and {:?} overlap in the blob",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok(())
}

/// Serializes a model into archive bytes.
pub fn checkpoint_bytes<T: Elem>(cfg: &ModelConfig, params: &TensorMap<T>) -> Vec<u8> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::new();
    for (name, tensor) in params.iter() {
        let bytes = tensor_le_bytes(&tensor.view());
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            len: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    out
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<T: Elem>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(&model.cfg, &model.params);
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, &bytes).map_err(|e| RodError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| RodError::io(path, e))?;
    Ok(())
}

/// Loads a model, checking the stored inventory exactly against what the
/// stored config requires: any missing, extra or reshaped tensor fails with
/// a diff listing.
pub fn load_checkpoint<T: Elem>(path: &Path) -> Result<Model<T>> {
    let archive = CheckpointArchive::read(path)?;
    model_from_archive(&archive)
}

/// Typed model from a parsed archive.
pub fn model_from_archive<T: Elem>(archive: &CheckpointArchive) -> Result<Model<T>> {
    let dtype = archive.dtype()?;
    if dtype != T::DTYPE {
        return Err(RodError::Checkpoint(format!(
            "archive precision is {}, requested {}",
            dtype.name(),
            T::DTYPE.name()
        )));
    }
    let cfg = archive.manifest.config.clone();
    cfg.validate()?;
    let expected = param_specs(&cfg);
    let stored: BTreeMap<&str, &TensorEntry> = archive
        .manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for spec in &expected {
        match stored.get(spec.name.as_str()) {
            None => missing.push(spec.name.clone()),
            Some(e) if e.shape != spec.shape => mismatched.push(format!(
                "{}: stored {:?}, expected {:?}",
                spec.name, e.shape, spec.shape
            )),
            Some(_) => {}
        }
    }
    let expected_names: std::collections::BTreeSet<&str> =
        expected.iter().map(|s| s.name.as_str()).collect();
    let extra: Vec<String> = stored
        .keys()
        .filter(|k| !expected_names.contains(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() || !mismatched.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            parts.push(format!("unexpected: {}", extra.join(", ")));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatches: {}", mismatched.join("; ")));
        }
        return Err(RodError::Checkpoint(format!(
            "archive does not match its config ({})",
            parts.join(" | ")
        )));
    }

    let mut params = TensorMap::<T>::new();
    for entry in &archive.manifest.tensors {
        let tensor = tensor_from_le_bytes::<T>(&entry.shape, archive.tensor_bytes(entry))?;
        params.insert(entry.name.clone(), tensor);
    }
    Ok(Model::from_parts(cfg, params))
}

// ---------------------------------------------------------------------------
// third-party encoder import
// ---------------------------------------------------------------------------

/// Renames one SAM-family image-encoder tensor to this crate's naming.
/// Returns `None` for tensors outside the encoder (prompt/mask decoder etc).
pub fn translate_external_name(name: &str) -> Option<String> {
    let rest = name.strip_prefix("image_encoder.")?;
    if let Some(tail) = rest.strip_prefix("patch_embed.proj.") {
        return Some(format!("encoder.patch_embed.{tail}"));
    }
    if rest == "pos_embed" {
        return Some("encoder.pos_embed".to_string());
    }
    if let Some(block_rest) = rest.strip_prefix("blocks.") {
        let (idx, tail) = block_rest.split_once('.')?;
        idx.parse::<usize>().ok()?;
        let tail = tail
            .replace("mlp.lin1.", "mlp.fc1.")
            .replace("mlp.lin2.", "mlp.fc2.");
        for known in [
            "norm1.weight",
            "norm1.bias",
            "norm2.weight",
            "norm2.bias",
            "attn.qkv.weight",
            "attn.qkv.bias",
            "attn.proj.weight",
            "attn.proj.bias",
            "mlp.fc1.weight",
            "mlp.fc1.bias",
            "mlp.fc2.weight",
            "mlp.fc2.bias",
        ] {
            if tail == known {
                return Some(format!("encoder.blocks.{idx}.{tail}"));
            }
        }
        return None;
    }
    // SAM necks are a Sequential: 0 = 1x1 conv, 1 = channel norm,
    // 2 = 3x3 conv, 3 = channel norm
    if let Some(tail) = rest.strip_prefix("neck.") {
        let translated = match tail {
            "0.weight" => "encoder.neck.conv1.weight",
            "0.bias" => "encoder.neck.conv1.bias",
            "1.weight" => "encoder.neck.norm1.weight",
            "1.bias" => "encoder.neck.norm1.bias",
            "2.weight" => "encoder.neck.conv2.weight",
            "2.bias" => "encoder.neck.conv2.bias",
            "3.weight" => "encoder.neck.norm2.weight",
            "3.bias" => "encoder.neck.norm2.bias",
            _ => return None,
        };
        return Some(translated.to_string());
    }
    None
}

#[derive(Debug, Clone, Default)]
pub struct ImportReport {
    pub imported: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies externally named encoder tensors into a model wherever the
/// translated name exists with an agreeing shape. Shape disagreement is an
/// error; untranslatable names are skipped and reported.
pub fn import_external_encoder<T: Elem>(
    model: &mut Model<T>,
    external: &TensorMap<T>,
) -> Result<ImportReport> {
    let mut report = ImportReport::default();
    for (name, tensor) in external.iter() {
        let Some(internal) = translate_external_name(name) else {
            report.skipped.push(name.to_string());
            continue;
        };
        if !model.params.contains(&internal) {
            report.skipped.push(name.to_string());
            continue;
        }
        let dst = model.params.get_mut(&internal)?;
        if dst.shape() != tensor.shape() {
            return Err(RodError::Checkpoint(format!(
                "external tensor {name:?} has shape {:?}, but {internal:?} needs {:?}",
                tensor.shape(),
                dst.shape()
            )));
        }
        *dst = tensor.clone();
        report.imported.push(internal);
    }
    Ok(report)
}
