//! Dataset adapters, the planted-redundancy synthetic generator, and
//! session-schedule construction.

mod folder;
mod image;
mod schedule;
mod synthetic;

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use self::folder::FolderDataset;
pub use self::image::Image;
pub use self::schedule::{build_schedule, build_schedule_from_split, ScheduleSplit};
pub use self::synthetic::{generate_synthetic, NuisanceSharing, SyntheticSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleInfo {
    /// Dataset class index (not the dense schedule id).
    pub label: usize,
    pub partition: Partition,
}

/// Axis-aligned pixel box, inclusive-exclusive: `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn square(x0: usize, y0: usize, side: usize) -> Self {
        Self {
            x0,
            y0,
            x1: x0 + side,
            y1: y0 + side,
        }
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// Ground-truth regions of one synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRegions {
    pub signal: BoundingBox,
    pub nuisance: Option<BoundingBox>,
}

/// Read access to a labelled image collection with a train/test partition.
///
/// Implementations must allow concurrent readers.
pub trait DatasetAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Number of dataset classes; labels are `0..class_count()`.
    fn class_count(&self) -> usize;

    fn samples(&self) -> &[SampleInfo];

    fn image(&self, index: usize) -> Result<Cow<'_, Image>>;

    /// Ground-truth signal/nuisance boxes, when the dataset carries them.
    fn regions(&self, _index: usize) -> Option<SampleRegions> {
        None
    }

    fn has_regions(&self) -> bool {
        false
    }

    /// Sample indices of `class` in `partition`, ascending.
    fn class_samples(&self, class: usize, partition: Partition) -> Vec<usize> {
        self.samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class && s.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Labels and partitions without pixels; drives schedule-only runs.
#[derive(Debug, Clone)]
pub struct IndexOnlyDataset {
    name: String,
    class_count: usize,
    samples: Vec<SampleInfo>,
}

impl IndexOnlyDataset {
    pub fn new(name: &str, class_count: usize, train_per_class: usize, test_per_class: usize) -> Self {
        let mut samples = Vec::with_capacity(class_count * (train_per_class + test_per_class));
        for label in 0..class_count {
            samples.extend((0..train_per_class).map(|_| SampleInfo {
                label,
                partition: Partition::Train,
            }));
            samples.extend((0..test_per_class).map(|_| SampleInfo {
                label,
                partition: Partition::Test,
            }));
        }
        Self {
            name: name.to_string(),
            class_count,
            samples,
        }
    }

    /// 100 classes, 500 train / 100 test images per class.
    pub fn cifar100() -> Self {
        Self::new("cifar100", 100, 500, 100)
    }

    /// 100 classes, 500 train / 100 test images per class.
    pub fn mini_imagenet() -> Self {
        Self::new("mini_imagenet", 100, 500, 100)
    }

    /// 200 classes; roughly 30 train / 29 test images per class.
    pub fn cub200() -> Self {
        Self::new("cub200", 200, 30, 29)
    }
}

impl DatasetAdapter for IndexOnlyDataset {
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
        Err(Error::Dataset(format!(
            "{} is index-only; sample {index} has no pixels",
            self.name
        )))
    }
}

/// Fully materialized dataset, as produced by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    name: String,
    class_count: usize,
    samples: Vec<SampleInfo>,
    images: Vec<Image>,
    regions: Option<Vec<SampleRegions>>,
}

impl InMemoryDataset {
    pub fn new(
        name: &str,
        class_count: usize,
        samples: Vec<SampleInfo>,
        images: Vec<Image>,
        regions: Option<Vec<SampleRegions>>,
    ) -> Result<Self> {
        if samples.len() != images.len() || regions.as_ref().is_some_and(|r| r.len() != images.len()) {
            return Err(Error::Dataset("sample, image and region counts differ".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_count) {
            return Err(Error::Dataset(format!(
                "label {} outside {class_count} classes",
                s.label
            )));
        }
        Ok(Self {
            name: name.to_string(),
            class_count,
            samples,
            images,
            regions,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }
}

impl DatasetAdapter for InMemoryDataset {
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
        self.images
            .get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| Error::Dataset(format!("sample {index} out of range")))
    }

    fn regions(&self, index: usize) -> Option<SampleRegions> {
        self.regions.as_ref().and_then(|r| r.get(index).copied())
    }

    fn has_regions(&self) -> bool {
        self.regions.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub label: usize,
    pub partition: Partition,
}

/// `index.json` of a directory dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub name: String,
    pub class_count: usize,
    pub samples: Vec<IndexEntry>,
}

/// `regions.json`: one entry per sample, in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionsFile {
    pub samples: Vec<SampleRegions>,
}

/// Writes `<root>/<class>/<sample>.png`, `index.json`, and (if present) `regions.json`.
pub fn export_dataset(adapter: &dyn DatasetAdapter, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(adapter.samples().len());
    for (i, s) in adapter.samples().iter().enumerate() {
        let rel = format!("{}/{:06}.png", s.label, i);
        adapter.image(i)?.save_png(&root.join(&rel))?;
        entries.push(IndexEntry {
            path: rel,
            label: s.label,
            partition: s.partition,
        });
    }
    let index = DatasetIndex {
        name: adapter.name().to_string(),
        class_count: adapter.class_count(),
        samples: entries,
    };
    let path = root.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    if adapter.has_regions() {
        let samples = (0..adapter.samples().len())
            .map(|i| {
                adapter
                    .regions(i)
                    .ok_or_else(|| Error::Dataset(format!("sample {i} lacks regions")))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = root.join("regions.json");
        fs::write(&path, serde_json::to_vec_pretty(&RegionsFile { samples })?)
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
