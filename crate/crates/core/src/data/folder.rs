use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use super::{DatasetAdapter, DatasetIndex, Image, RegionsFile, SampleInfo, SampleRegions};
use crate::error::{Error, Result};

/// Directory-per-class dataset described by `index.json`. Images are decoded
/// lazily on first access and then kept in memory.
#[derive(Debug)]
pub struct FolderDataset {
    root: PathBuf,
    name: String,
    class_count: usize,
    paths: Vec<String>,
    samples: Vec<SampleInfo>,
    cache: Vec<OnceLock<Image>>,
    regions: Option<Vec<SampleRegions>>,
}

impl FolderDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let index_path = root.join("index.json");
        let raw = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: DatasetIndex = serde_json::from_slice(&raw)?;
        if let Some(e) = index.samples.iter().find(|e| e.label >= index.class_count) {
            return Err(Error::Dataset(format!(
                "{}: label {} outside {} classes",
                e.path, e.label, index.class_count
            )));
        }
        let regions_path = root.join("regions.json");
        let regions = if regions_path.exists() {
            let raw = fs::read(&regions_path).map_err(|e| Error::io(&regions_path, e))?;
            let file: RegionsFile = serde_json::from_slice(&raw)?;
            if file.samples.len() != index.samples.len() {
                return Err(Error::Dataset(format!(
                    "regions.json has {} entries for {} samples",
                    file.samples.len(),
                    index.samples.len()
                )));
            }
            Some(file.samples)
        } else {
            None
        };
        let n = index.samples.len();
        Ok(Self {
            root: root.to_path_buf(),
            name: index.name,
            class_count: index.class_count,
            paths: index.samples.iter().map(|e| e.path.clone()).collect(),
            samples: index
                .samples
                .into_iter()
                .map(|e| SampleInfo {
                    label: e.label,
                    partition: e.partition,
                })
                .collect(),
            cache: (0..n).map(|_| OnceLock::new()).collect(),
            regions,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl DatasetAdapter for FolderDataset {
    fn name(&self) -> &str {
        &self.name
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn samples(&self) -> &[SampleInfo] {
        &self.samples
    }

    fn image(&self, index: usize) -> Result<Cow<'_, Image>> {
        let slot = self
            .cache
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("sample {index} out of range")))?;
        if let Some(img) = slot.get() {
            return Ok(Cow::Borrowed(img));
        }
        let img = Image::load_png(&self.root.join(&self.paths[index]))?;
        Ok(Cow::Borrowed(slot.get_or_init(|| img)))
    }

    fn regions(&self, index: usize) -> Option<SampleRegions> {
        self.regions.as_ref().and_then(|r| r.get(index).copied())
    }

    fn has_regions(&self) -> bool {
        self.regions.is_some()
    }
}
