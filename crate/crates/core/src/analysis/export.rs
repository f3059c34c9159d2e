//! Mask overlays, mask JSON records, and CSV writers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CdfPoint, PatchSimilarityStats};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::types::{ClassId, PatchMask};

/// Per-sample mask record written next to the overlay PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sample: usize,
    pub label: ClassId,
    pub predicted: ClassId,
    pub threshold: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major ALR bits.
    pub bits: Vec<u8>,
    /// Row-major patch cosines against the predicted class column.
    pub scores: Vec<f64>,
}

/// Tints the pixel window of every ALR patch red and darkens the rest.
pub fn mask_overlay(image: &Image, mask: &PatchMask, stride: usize) -> Image {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let (a, b) = (y / stride, x / stride);
            let selected = a < mask.height() && b < mask.width() && mask.get(a, b);
            let [r, g, bl] = image.pixel(x, y);
            let px = if selected {
                [(r as u16 / 2 + 128) as u8, g / 2, bl / 2]
            } else {
                [r / 3, g / 3, bl / 3]
            };
            out.set_pixel(x, y, px);
        }
    }
    out
}

pub fn write_mask_export(dir: &Path, record: &MaskRecord, overlay: &Image) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    overlay.save_png(&dir.join(format!("sample_{:06}.png", record.sample)))?;
    let path = dir.join(format!("sample_{:06}.json", record.sample));
    fs::write(&path, serde_json::to_vec_pretty(record)?).map_err(|e| Error::io(&path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Two-column CSV: `distance,cumulative`.
pub fn write_cdf_csv(path: &Path, cdf: &[CdfPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["distance", "cumulative"]).map_err(|e| csv_err(path, e))?;
    for p in cdf {
        w.write_record([p.distance.to_string(), p.cumulative.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per patch category.
pub fn write_patch_stats_csv(path: &Path, stats: &PatchSimilarityStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["category", "patches", "own_class", "other_classes", "threshold"])
        .map_err(|e| csv_err(path, e))?;
    for (name, cat) in [("central", stats.central), ("redundant", stats.redundant)] {
        let row = match cat {
            Some(c) => [
                name.to_string(),
                c.patches.to_string(),
                c.own_class.to_string(),
                c.other_classes.to_string(),
                stats.threshold.to_string(),
            ],
            None => [
                name.to_string(),
                "0".into(),
                String::new(),
                String::new(),
                stats.threshold.to_string(),
            ],
        };
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MaskKind;

    #[test]
    fn overlay_marks_selected_windows() {
        let img = Image::filled(4, 4, [90, 90, 90]);
        let m = PatchMask::new(2, 2, vec![true, false, false, false], MaskKind::Alr).unwrap();
        let o = mask_overlay(&img, &m, 2);
        assert_eq!(o.pixel(0, 0), [173, 45, 45]);
        assert_eq!(o.pixel(3, 3), [30, 30, 30]);
    }

    #[test]
    fn cdf_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cdf.csv");
        let pts = [
            CdfPoint { distance: 0.1, cumulative: 0.5 },
            CdfPoint { distance: 0.4, cumulative: 1.0 },
        ];
        write_cdf_csv(&path, &pts).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "distance,cumulative\n0.1,0.5\n0.4,1\n");
    }
}
