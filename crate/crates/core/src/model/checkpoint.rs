//! Single-file checkpoint: an 8-byte little-endian header length, a JSON
//! header, then every parameter blob as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig, ParamEntry};
use crate::error::{Error, Result};
use crate::types::CosineClassifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub d: usize,
    pub tau: f64,
    pub class_count: usize,
    pub dummy: bool,
    pub backbone: BackboneConfig,
    /// Blob table; offsets count `f64` elements from the start of the data section.
    pub tensors: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, backbone: &Backbone, classifier: &CosineClassifier) -> Result<()> {
    let mut tensors = backbone.param_entries().to_vec();
    let classifier_offset = backbone.param_count();
    tensors.push(ParamEntry {
        name: "classifier.weight".into(),
        offset: classifier_offset,
        shape: vec![classifier.classes(), classifier.dim()],
    });
    let header = CheckpointHeader {
        architecture: backbone.architecture().id().to_string(),
        d: backbone.feature_dim(),
        tau: classifier.temperature(),
        class_count: classifier.classes(),
        dummy: classifier.dummy_index().is_some(),
        backbone: backbone.config().clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(8 + json.len() + 8 * (classifier_offset + classifier.weights().len()));
    bytes.extend((json.len() as u64).to_le_bytes());
    bytes.extend(json);
    for v in backbone.params().iter().chain(classifier.weights()) {
        bytes.extend(v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Backbone, CosineClassifier)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8 + header_len;
    if bytes.len() < data_start || (bytes.len() - data_start) % 8 != 0 {
        return Err(Error::Checkpoint("truncated header or data".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..data_start])?;
    let values: Vec<f64> = bytes[data_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut backbone = Backbone::new(header.backbone.clone(), 0)?;
    let n = backbone.param_count();
    let expected = n + header.class_count * header.d;
    if values.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} values, found {}",
            values.len()
        )));
    }
    backbone.load_params(values[..n].to_vec())?;
    let mut classifier =
        CosineClassifier::from_columns_flat(header.d, header.class_count, values[n..].to_vec(), header.tau)?;
    if header.dummy {
        let last = classifier.column(header.class_count - 1).to_vec();
        classifier = classifier.without_last().with_dummy_column(last)?;
    }
    Ok((header, backbone, classifier))
}
