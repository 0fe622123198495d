//! Weight files: a JSON manifest listing `{name, shape, offset}` for each
//! tensor, and a blob of little-endian f32 values in row-major order.
//! `offset` is a byte offset into the blob; tensors are packed back to back in
//! manifest order.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{Model, ModelWeights, NamedTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Returns `(manifest JSON, blob)`.
pub fn save_model(model: &Model) -> (String, Vec<u8>) {
    let weights = model.weights();
    let mut entries = Vec::with_capacity(weights.len());
    let mut blob = Vec::with_capacity(weights.scalar_count() * 4);
    for t in weights.iter() {
        entries.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.data.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    (manifest, blob)
}

pub fn load_model(config: ModelConfig, manifest: &str, blob: &[u8]) -> Result<Model> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(manifest)?;
    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let len: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::Weights {
                name: e.name,
                message: format!("offset {} but previous tensor ends at {expected_offset}", e.offset),
            });
        }
        let end = e.offset + 4 * len;
        let Some(bytes) = blob.get(e.offset..end) else {
            return Err(Error::Weights {
                name: e.name,
                message: format!("blob truncated: needs {end} bytes, has {}", blob.len()),
            });
        };
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data = ArrayD::from_shape_vec(e.shape, values).expect("length checked");
        tensors.push(NamedTensor { name: e.name, data });
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(Error::Format(format!(
            "blob has {} bytes, manifest covers {expected_offset}",
            blob.len()
        )));
    }
    Model::new(config, &ModelWeights::new(tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::with_channels(&[4, 8], 1, 8, 8);
        c.groups = 4;
        c
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let model = Model::seeded(cfg(), 3).unwrap();
        let (manifest, blob) = save_model(&model);
        let back = load_model(cfg(), &manifest, &blob).unwrap();
        assert_eq!(back, model);
        let (m2, b2) = save_model(&back);
        assert_eq!((m2, b2), (manifest, blob));
    }

    #[test]
    fn truncated_blob() {
        let model = Model::seeded(cfg(), 3).unwrap();
        let (manifest, blob) = save_model(&model);
        let err = load_model(cfg(), &manifest, &blob[..blob.len() - 4]).unwrap_err();
        assert!(matches!(err, Error::Weights { .. }), "{err}");
        let mut longer = blob.clone();
        longer.extend_from_slice(&[0; 4]);
        assert!(load_model(cfg(), &manifest, &longer).is_err());
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let model = Model::seeded(cfg(), 3).unwrap();
        let (manifest, blob) = save_model(&model);
        let mut other = cfg();
        other.blocks[1].channels = 12;
        let err = load_model(other, &manifest, &blob).unwrap_err();
        assert!(err.to_string().contains("block2"), "{err}");
    }

    #[test]
    fn bad_offset() {
        let model = Model::seeded(cfg(), 3).unwrap();
        let (manifest, blob) = save_model(&model);
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&manifest).unwrap();
        entries[1].offset += 4;
        let err = load_model(cfg(), &serde_json::to_string(&entries).unwrap(), &blob).unwrap_err();
        assert!(err.to_string().contains(&entries[1].name), "{err}");
    }
}
