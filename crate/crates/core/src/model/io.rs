//! Model file format, version 1.
//!
//! A model is a directory holding a human-readable `manifest.json` (layer
//! list, shapes, hyper-parameters, optional pruning provenance) plus one
//! little-endian 32-bit-float binary blob per weight tensor under `weights/`,
//! referenced by name from the manifest. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{BnWeights, ConvWeights, LayerKind, LayerSpec, ModelGraph, ModelMeta, WeightStore};

pub const FORMAT_VERSION: u32 = 1;

/// Where a pruned model came from: parent hash, kept filter indices per
/// pruned layer, and the rank report the plan was made from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub parent_hash: String,
    pub kept: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_report: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    endianness: String,
    meta: ModelMeta,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    bn_eps: BTreeMap<String, f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn blob_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_blob(path: &Path, tensor: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::TruncatedBlob {
            tensor: tensor.into(),
            bytes: bytes.len(),
        });
    }
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(Error::BlobShapeMismatch {
            tensor: tensor.into(),
            expected,
            actual,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn tensor_entries(model: &ModelGraph) -> Vec<(String, String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    for (id, w) in &model.weights.convs {
        out.push((
            id.clone(),
            "weight".to_string(),
            w.weight.shape().to_vec(),
            w.weight.data().to_vec(),
        ));
        out.push((
            id.clone(),
            "bias".to_string(),
            vec![w.bias.len()],
            w.bias.clone(),
        ));
    }
    for (id, b) in &model.weights.bns {
        for (name, v) in [
            ("gamma", &b.gamma),
            ("beta", &b.beta),
            ("running_mean", &b.running_mean),
            ("running_var", &b.running_var),
        ] {
            out.push((id.clone(), name.to_string(), vec![v.len()], v.clone()));
        }
    }
    out
}

/// Content hash of a model: SHA-256 over the structural JSON (layers + meta)
/// and every weight blob in deterministic order.
pub fn model_hash(model: &ModelGraph) -> String {
    let mut hasher = Sha256::new();
    let structure = serde_json::to_vec(&(&model.layers, &model.meta)).expect("serializable");
    hasher.update(&structure);
    for (layer, name, _, values) in tensor_entries(model) {
        hasher.update(layer.as_bytes());
        hasher.update(name.as_bytes());
        hasher.update(blob_bytes(&values));
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Write `model` (and optional provenance) as a format-v1 directory.
pub fn save_model_with_provenance(
    model: &ModelGraph,
    path: &Path,
    provenance: Option<Provenance>,
) -> Result<()> {
    model.validate()?;
    let weights_dir = path.join("weights");
    fs::create_dir_all(&weights_dir)?;

    let mut tensors = Vec::new();
    for (layer, name, shape, values) in tensor_entries(model) {
        let file = format!("weights/{layer}.{name}.f32le");
        fs::write(path.join(&file), blob_bytes(&values))?;
        tensors.push(TensorEntry {
            layer,
            name,
            shape,
            file,
        });
    }
    let bn_eps = model
        .weights
        .bns
        .iter()
        .map(|(id, b)| (id.clone(), b.eps))
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        meta: model.meta.clone(),
        layers: model.layers.clone(),
        tensors,
        bn_eps,
        provenance,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    fs::write(path.join("manifest.json"), json)?;
    Ok(())
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    save_model_with_provenance(model, path, None)
}

/// Load a format-v1 model directory, returning the model and any recorded
/// provenance.
pub fn load_model_full(path: &Path) -> Result<(ModelGraph, Option<Provenance>)> {
    let manifest_path = path.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.endianness != "little" {
        return Err(Error::Manifest(format!(
            "unsupported endianness `{}`",
            manifest.endianness
        )));
    }

    let mut blobs: BTreeMap<(String, String), (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for entry in &manifest.tensors {
        let expected: usize = entry.shape.iter().product();
        let key = format!("{}.{}", entry.layer, entry.name);
        let values = read_blob(&path.join(&entry.file), &key, expected)?;
        blobs.insert(
            (entry.layer.clone(), entry.name.clone()),
            (entry.shape.clone(), values),
        );
    }

    let mut take = |layer: &str, name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        blobs
            .remove(&(layer.to_string(), name.to_string()))
            .ok_or_else(|| Error::Manifest(format!("missing tensor entry for {layer}.{name}")))
    };

    let mut weights = WeightStore::default();
    for layer in &manifest.layers {
        match layer.kind {
            LayerKind::Conv { .. } => {
                let (shape, values) = take(&layer.id, "weight")?;
                if shape.len() != 4 {
                    return Err(Error::Manifest(format!(
                        "conv `{}` weight must be 4-D, manifest says {shape:?}",
                        layer.id
                    )));
                }
                let weight = Tensor::new([shape[0], shape[1], shape[2], shape[3]], values)?;
                let (_, bias) = take(&layer.id, "bias")?;
                weights
                    .convs
                    .insert(layer.id.clone(), ConvWeights { weight, bias });
            }
            LayerKind::BatchNorm { .. } => {
                let (_, gamma) = take(&layer.id, "gamma")?;
                let (_, beta) = take(&layer.id, "beta")?;
                let (_, running_mean) = take(&layer.id, "running_mean")?;
                let (_, running_var) = take(&layer.id, "running_var")?;
                let eps = *manifest.bn_eps.get(&layer.id).unwrap_or(&1e-5);
                weights.bns.insert(
                    layer.id.clone(),
                    BnWeights {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        eps,
                    },
                );
            }
            _ => {}
        }
    }
    if let Some(((layer, name), _)) = blobs.into_iter().next() {
        return Err(Error::Manifest(format!(
            "tensor entry {layer}.{name} does not belong to any conv/batch_norm layer"
        )));
    }

    let model = ModelGraph {
        layers: manifest.layers,
        weights,
        meta: manifest.meta,
    };
    model.validate()?;
    Ok((model, manifest.provenance))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    load_model_full(path).map(|(m, _)| m)
}
