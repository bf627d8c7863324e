//! Checkpoint format: one binary file of little-endian f64 values in layer
//! order plus a JSON manifest describing the architecture and the byte
//! offset of every parameter tensor. Round-trips are bitwise lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layer::{Layer, LayerKind, LayerParams, LayerSpec, NodeInput};
use crate::model::ModelWeights;
use crate::tensor::Tensor4D;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture_id: String,
    data_file: String,
    layers: Vec<LayerEntry>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    in_channels: usize,
    out_channels: usize,
    inputs: Vec<NodeInput>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    kind: LayerKind,
    param: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

fn param_tensors(layer: &Layer) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    match &layer.params {
        LayerParams::Conv { weight, bias } => vec![
            ("weight", weight.shape().to_vec(), weight.data().to_vec()),
            ("bias", vec![bias.len()], bias.clone()),
        ],
        LayerParams::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } => vec![
            ("gamma", vec![gamma.len()], gamma.clone()),
            ("beta", vec![beta.len()], beta.clone()),
            ("running_mean", vec![running_mean.len()], running_mean.clone()),
            ("running_var", vec![running_var.len()], running_var.clone()),
        ],
        LayerParams::None => vec![],
    }
}

/// Writes `<stem>.bin` and `<stem>.json` under `dir`.
pub fn save_model(model: &ModelWeights, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let data_file = format!("{stem}.bin");
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut layers = Vec::new();
    for layer in model.layers() {
        layers.push(LayerEntry {
            name: layer.name.clone(),
            kind: layer.spec.kind,
            in_channels: layer.spec.in_channels,
            out_channels: layer.spec.out_channels,
            inputs: layer.inputs.clone(),
        });
        for (param, shape, values) in param_tensors(layer) {
            tensors.push(TensorEntry {
                layer: layer.name.clone(),
                kind: layer.spec.kind,
                param: param.to_string(),
                shape,
                byte_offset: blob.len(),
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture_id: model.architecture_id().to_string(),
        data_file: data_file.clone(),
        layers,
        tensors,
    };
    fs::write(dir.join(&data_file), &blob)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Manifest(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Loads a model saved by [`save_model`]. The reconstruction is bitwise
/// identical to what was saved.
pub fn load_model(dir: &Path, stem: &str) -> Result<ModelWeights> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NnError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(dir.join(&manifest.data_file))?;

    let read_tensor = |layer: &str, param: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = manifest
            .tensors
            .iter()
            .find(|t| t.layer == layer && t.param == param)
            .ok_or_else(|| {
                NnError::Manifest(format!("missing tensor entry {layer}/{param}"))
            })?;
        let count: usize = entry.shape.iter().product();
        let end = entry.byte_offset + 8 * count;
        if end > blob.len() {
            return Err(NnError::Manifest(format!(
                "tensor {layer}/{param} overruns data file ({end} > {})",
                blob.len()
            )));
        }
        let values = blob[entry.byte_offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((entry.shape.clone(), values))
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let spec = LayerSpec {
            kind: entry.kind,
            in_channels: entry.in_channels,
            out_channels: entry.out_channels,
        };
        let params = match entry.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
                let (shape, values) = read_tensor(&entry.name, "weight")?;
                if shape.len() != 4 {
                    return Err(NnError::Manifest(format!(
                        "conv weight for `{}` must be rank 4",
                        entry.name
                    )));
                }
                let weight =
                    Tensor4D::from_vec([shape[0], shape[1], shape[2], shape[3]], values)?;
                let (_, bias) = read_tensor(&entry.name, "bias")?;
                LayerParams::Conv { weight, bias }
            }
            LayerKind::BatchNorm => {
                let (_, gamma) = read_tensor(&entry.name, "gamma")?;
                let (_, beta) = read_tensor(&entry.name, "beta")?;
                let (_, running_mean) = read_tensor(&entry.name, "running_mean")?;
                let (_, running_var) = read_tensor(&entry.name, "running_var")?;
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }
            }
            _ => LayerParams::None,
        };
        layers.push(Layer {
            name: entry.name.clone(),
            spec,
            params,
            inputs: entry.inputs.clone(),
        });
    }
    let model = ModelWeights::new(layers)?;
    if model.architecture_id() != manifest.architecture_id {
        return Err(NnError::Manifest(format!(
            "architecture id mismatch: manifest says `{}`, reconstruction is `{}`",
            manifest.architecture_id,
            model.architecture_id()
        )));
    }
    Ok(model)
}
