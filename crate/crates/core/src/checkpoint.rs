//! Binary checkpoint format.
//!
//! ```text
//! b"LLNS" | u32 version | u32 metadata length | metadata (UTF-8 JSON) | tensors
//! ```
//!
//! Integers are little-endian. The metadata holds the training config, the
//! layer layout of both networks and a tensor manifest (name, shape, byte
//! offset into the tensor section). Tensors are raw little-endian `f32`
//! values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelCheckpoint, ModelError, TrainConfig, FORMAT_VERSION};
use crate::nn::{Activation, DenseLayer, DenseNet};

pub const MAGIC: &[u8; 4] = b"LLNS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    epoch: usize,
    leaky_slope: f64,
    encoder: Vec<LayerSpec>,
    decoder: Vec<LayerSpec>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerSpec {
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialises a checkpoint to bytes. Parameters are narrowed to `f32`.
pub fn to_bytes(model: &ModelCheckpoint) -> Result<Vec<u8>, ModelError> {
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let nets = [("encoder", model.encoder()), ("decoder", model.decoder())];
    for (name, net) in nets {
        for (i, layer) in net.layers().iter().enumerate() {
            let parts: [(&str, Vec<usize>, &[f64]); 2] = [
                ("weight", vec![layer.outputs, layer.inputs], &layer.weights),
                ("bias", vec![layer.outputs], &layer.bias),
            ];
            for (kind, shape, values) in parts {
                tensors.push(TensorEntry {
                    name: format!("{name}.{i}.{kind}"),
                    shape,
                    offset: data.len(),
                });
                for v in values {
                    data.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    let specs = |net: &DenseNet| -> Vec<LayerSpec> {
        net.layers()
            .iter()
            .map(|l| LayerSpec {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
            })
            .collect()
    };
    let meta = Metadata {
        config: model.config.clone(),
        epoch: model.epoch,
        leaky_slope: model.encoder().leaky_slope(),
        encoder: specs(model.encoder()),
        decoder: specs(model.decoder()),
        tensors,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| ModelError::CorruptHeader(e.to_string()))?;
    let json_len = u32::try_from(json.len())
        .map_err(|_| ModelError::CorruptHeader("metadata too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, ModelError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let read_u32 = |at: usize| -> Result<u32, ModelError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| ModelError::CorruptHeader("file ends inside the header".into()))
    };
    let version = read_u32(4)?;
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionUnsupported(version));
    }
    let json_len = read_u32(8)? as usize;
    let json = bytes
        .get(12..12 + json_len)
        .ok_or_else(|| ModelError::CorruptHeader("file ends inside the metadata".into()))?;
    let meta: Metadata =
        serde_json::from_slice(json).map_err(|e| ModelError::CorruptHeader(e.to_string()))?;
    let data = &bytes[12 + json_len..];

    let mut entries = meta.tensors.iter();
    let mut expected_offset = 0usize;
    let mut read_net = |prefix: &str, specs: &[LayerSpec]| -> Result<DenseNet, ModelError> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let mut take = |kind: &str, shape: Vec<usize>| -> Result<Vec<f64>, ModelError> {
                let name = format!("{prefix}.{i}.{kind}");
                let entry = entries
                    .next()
                    .ok_or_else(|| ModelError::CorruptTensor(format!("manifest lacks {name}")))?;
                if entry.name != name || entry.shape != shape || entry.offset != expected_offset {
                    return Err(ModelError::CorruptTensor(format!(
                        "manifest entry {:?} does not match expected {name} {shape:?} at offset {expected_offset}",
                        entry.name
                    )));
                }
                let count: usize = shape.iter().product();
                let end = entry.offset + 4 * count;
                let raw = data.get(entry.offset..end).ok_or_else(|| {
                    ModelError::CorruptTensor(format!(
                        "{name} needs bytes {}..{end}, file has {}",
                        entry.offset,
                        data.len()
                    ))
                })?;
                expected_offset = end;
                Ok(raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect())
            };
            let weights = take("weight", vec![spec.outputs, spec.inputs])?;
            let bias = take("bias", vec![spec.outputs])?;
            layers.push(DenseLayer {
                inputs: spec.inputs,
                outputs: spec.outputs,
                weights,
                bias,
                activation: spec.activation,
            });
        }
        Ok(DenseNet::new(layers, meta.leaky_slope)?)
    };
    let encoder = read_net("encoder", &meta.encoder)?;
    let decoder = read_net("decoder", &meta.decoder)?;
    if entries.next().is_some() {
        return Err(ModelError::CorruptTensor(
            "manifest lists extra tensors".into(),
        ));
    }
    if expected_offset != data.len() {
        return Err(ModelError::CorruptTensor(format!(
            "tensor section holds {} bytes, manifest covers {expected_offset}",
            data.len()
        )));
    }
    ModelCheckpoint::from_parts(meta.config, encoder, decoder, meta.epoch)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint, ModelError> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, TrainConfig};

    fn model() -> ModelCheckpoint {
        ModelCheckpoint::initialize(TrainConfig {
            model_kind: ModelKind::Bvae,
            input_dim: 5,
            latent_dim: 3,
            hidden: vec![4],
            epochs: 2,
            ..TrainConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let first = to_bytes(&model()).unwrap();
        let loaded = from_bytes(&first).unwrap();
        assert_eq!(to_bytes(&loaded).unwrap(), first);
        assert_eq!(&first[..4], b"LLNS");
        assert_eq!(u32::from_le_bytes(first[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_file_is_corrupt_tensor() {
        let bytes = to_bytes(&model()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, ModelError::CorruptTensor(_)), "{err:?}");
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            from_bytes(&longer),
            Err(ModelError::CorruptTensor(_))
        ));
    }

    #[test]
    fn version_and_magic_checks() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(ModelError::VersionUnsupported(99))
        ));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(ModelError::BadMagic)));
        assert!(matches!(from_bytes(b"LL"), Err(ModelError::BadMagic)));
    }

    #[test]
    fn metadata_is_json() {
        let bytes = to_bytes(&model()).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(meta["config"]["model_kind"], "bvae");
        assert_eq!(meta["tensors"][0]["name"], "encoder.0.weight");
        assert_eq!(meta["tensors"][0]["shape"], serde_json::json!([4, 5]));
        assert_eq!(meta["tensors"][1]["offset"], 80);
    }
}
