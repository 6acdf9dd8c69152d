//! Weight container: a JSON manifest plus a raw little-endian `f32` blob.
//!
//! The manifest lists every tensor's name, shape, dtype, and byte offset
//! into the blob. Tensor order is fixed (embedding, unembedding,
//! gamma_final, then per-layer weights in layer order), so saving the same
//! weights twice produces byte-identical files. Round-tripping is bit-exact:
//! `f32 -> LE bytes -> f32` loses nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{LayerWeights, ModelConfig, ModelWeights};

/// One tensor's entry in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Always `"f32"` in this container.
    pub dtype: String,
    /// Offset of the first byte within the blob.
    pub byte_offset: u64,
}

/// Manifest for a weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub dtype: String,
    pub total_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Fixed serialization order: name and reference for every tensor.
fn tensor_list(weights: &ModelWeights<f32>) -> Vec<(String, &Tensor<f32>)> {
    let mut list: Vec<(String, &Tensor<f32>)> = vec![
        ("embedding".to_string(), &weights.embedding),
        ("unembedding".to_string(), &weights.unembedding),
        ("gamma_final".to_string(), &weights.gamma_final),
    ];
    for (i, layer) in weights.layers.iter().enumerate() {
        let named: [(&str, &Tensor<f32>); 9] = [
            ("wq", &layer.wq),
            ("wk", &layer.wk),
            ("wv", &layer.wv),
            ("wo", &layer.wo),
            ("w_gate", &layer.w_gate),
            ("w_up", &layer.w_up),
            ("w_down", &layer.w_down),
            ("gamma_attn", &layer.gamma_attn),
            ("gamma_mlp", &layer.gamma_mlp),
        ];
        for (suffix, t) in named {
            list.push((format!("layers.{i}.{suffix}"), t));
        }
    }
    list
}

/// Write `manifest_path` (JSON) and `blob_path` (raw little-endian `f32`).
pub fn save_weights(
    weights: &ModelWeights<f32>,
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<()> {
    let list = tensor_list(weights);
    let mut entries = Vec::with_capacity(list.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in &list {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            byte_offset: blob.len() as u64,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightManifest {
        dtype: "f32".to_string(),
        total_bytes: blob.len() as u64,
        tensors: entries,
    };
    // Sorted-key JSON keeps the manifest canonical.
    let value = serde_json::to_value(&manifest)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    std::fs::write(manifest_path, text)?;
    std::fs::write(blob_path, &blob)?;
    Ok(())
}

fn read_tensor(entry: &TensorEntry, blob: &[u8]) -> Result<Tensor<f32>> {
    if entry.dtype != "f32" {
        return Err(Error::WeightContainer(format!(
            "tensor '{}' has unsupported dtype '{}'",
            entry.name, entry.dtype
        )));
    }
    let count: usize = entry.shape.iter().product();
    let nbytes = count * 4;
    let start = entry.byte_offset as usize;
    let end = start.checked_add(nbytes).ok_or_else(|| {
        Error::WeightContainer(format!("tensor '{}' offset overflows", entry.name))
    })?;
    if end > blob.len() {
        return Err(Error::WeightContainer(format!(
            "tensor '{}' extends to byte {} but the blob has only {} bytes",
            entry.name,
            end,
            blob.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in blob[start..end].chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Tensor::new(entry.shape.clone(), data)
}

fn expect_shape(entry: &TensorEntry, expected: &[usize]) -> Result<()> {
    if entry.shape != expected {
        return Err(Error::WeightContainer(format!(
            "tensor '{}' has shape {:?}, expected {:?}",
            entry.name, entry.shape, expected
        )));
    }
    Ok(())
}

/// Load a weight container and validate it against `config`.
///
/// Validation covers: manifest/blob size agreement, per-tensor extents
/// (errors name the offending tensor), the expected tensor set, and shape
/// agreement with the model configuration.
pub fn load_weights(
    config: &ModelConfig,
    manifest_path: &Path,
    blob_path: &Path,
) -> Result<ModelWeights<f32>> {
    config.validate()?;
    let manifest: WeightManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let blob = std::fs::read(blob_path)?;
    if manifest.total_bytes != blob.len() as u64 {
        return Err(Error::WeightContainer(format!(
            "manifest declares {} bytes but the blob has {}",
            manifest.total_bytes,
            blob.len()
        )));
    }
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let find = |name: &str| -> Result<&TensorEntry> {
        manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::WeightContainer(format!("tensor '{name}' missing from manifest")))
    };

    let emb_entry = find("embedding")?;
    expect_shape(emb_entry, &[v, d])?;
    let unemb_entry = find("unembedding")?;
    expect_shape(unemb_entry, &[d, v])?;
    let gf_entry = find("gamma_final")?;
    expect_shape(gf_entry, &[d])?;

    let embedding = read_tensor(emb_entry, &blob)?;
    let unembedding = read_tensor(unemb_entry, &blob)?;
    let gamma_final = read_tensor(gf_entry, &blob)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let get = |suffix: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let entry = find(&format!("layers.{i}.{suffix}"))?;
            expect_shape(entry, shape)?;
            read_tensor(entry, &blob)
        };
        layers.push(LayerWeights {
            wq: get("wq", &[d, d])?,
            wk: get("wk", &[d, d])?,
            wv: get("wv", &[d, d])?,
            wo: get("wo", &[d, d])?,
            w_gate: get("w_gate", &[d, ff])?,
            w_up: get("w_up", &[d, ff])?,
            w_down: get("w_down", &[ff, d])?,
            gamma_attn: get("gamma_attn", &[d])?,
            gamma_mlp: get("gamma_mlp", &[d])?,
        });
    }
    let expected_count = 3 + 9 * config.n_layers;
    if manifest.tensors.len() != expected_count {
        return Err(Error::WeightContainer(format!(
            "manifest lists {} tensors, expected {expected_count}",
            manifest.tensors.len()
        )));
    }
    Ok(ModelWeights {
        embedding,
        unembedding,
        gamma_final,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use crate::transformer::init_weights;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            vocab_size: 11,
            activation: Activation::Silu,
            norm_eps: 1e-6,
            max_seq: 16,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let config = cfg();
        let weights = init_weights::<f32>(&config, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("model.manifest.json");
        let blob = dir.path().join("model.bin");
        save_weights(&weights, &manifest, &blob).unwrap();
        let loaded = load_weights(&config, &manifest, &blob).unwrap();
        assert_eq!(weights, loaded);
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let config = cfg();
        let weights = init_weights::<f32>(&config, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m1, b1) = (dir.path().join("a.json"), dir.path().join("a.bin"));
        let (m2, b2) = (dir.path().join("b.json"), dir.path().join("b.bin"));
        save_weights(&weights, &m1, &b1).unwrap();
        save_weights(&weights, &m2, &b2).unwrap();
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
        assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
    }

    #[test]
    fn truncated_blob_names_the_offending_tensor() {
        let config = cfg();
        let weights = init_weights::<f32>(&config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("model.manifest.json");
        let blob = dir.path().join("model.bin");
        save_weights(&weights, &manifest, &blob).unwrap();
        // Chop off the last tensor's tail and fix up the declared size so the
        // per-tensor extent check is what fires.
        let bytes = std::fs::read(&blob).unwrap();
        let truncated = &bytes[..bytes.len() - 8];
        std::fs::write(&blob, truncated).unwrap();
        let mut m: WeightManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
        m.total_bytes = truncated.len() as u64;
        std::fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_weights(&config, &manifest, &blob).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("layers.1.gamma_mlp"),
            "error should name the truncated tensor, got: {msg}"
        );
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let config = cfg();
        let weights = init_weights::<f32>(&config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("model.manifest.json");
        let blob = dir.path().join("model.bin");
        save_weights(&weights, &manifest, &blob).unwrap();
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes.push(0);
        std::fs::write(&blob, &bytes).unwrap();
        assert!(load_weights(&config, &manifest, &blob).is_err());
    }

    #[test]
    fn wrong_config_shape_is_rejected() {
        let config = cfg();
        let weights = init_weights::<f32>(&config, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("model.manifest.json");
        let blob = dir.path().join("model.bin");
        save_weights(&weights, &manifest, &blob).unwrap();
        let mut other = config.clone();
        other.d_ff = 32;
        let err = load_weights(&other, &manifest, &blob).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }
}
