use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, SampleRegions};
use crate::error::{Error, Result};
use crate::types::{MaskKind, PatchMask};

/// Pixel window of patch `(a, b)` under a cumulative stride (padding halo ignored).
pub fn patch_window(a: usize, b: usize, stride: usize) -> BoundingBox {
    BoundingBox {
        x0: b * stride,
        y0: a * stride,
        x1: (b + 1) * stride,
        y1: (a + 1) * stride,
    }
}

/// How much mask mass lands on the planted regions.
///
/// A patch contributes the fraction of its pixel window covered by the box.
/// Nuisance figures are computed over samples that carry a nuisance box;
/// signal figures over all samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyAlignment {
    /// Share of ALI-mask mass inside nuisance boxes.
    pub ali_in_nuisance: f64,
    /// Share of all patch mass inside nuisance boxes (the chance level).
    pub nuisance_base_rate: f64,
    /// Share of ALR-mask mass inside signal boxes.
    pub alr_in_signal: f64,
    pub signal_base_rate: f64,
    pub samples: usize,
    pub nuisance_samples: usize,
    /// Total ALI patches over nuisance-carrying samples.
    pub ali_patches: usize,
}

impl RedundancyAlignment {
    /// `ali_in_nuisance / nuisance_base_rate`, or 0 when undefined.
    pub fn nuisance_lift(&self) -> f64 {
        if self.nuisance_base_rate > 0.0 {
            self.ali_in_nuisance / self.nuisance_base_rate
        } else {
            0.0
        }
    }
}

fn coverage(bx: &BoundingBox, a: usize, b: usize, stride: usize) -> f64 {
    let w = patch_window(a, b, stride);
    w.intersection_area(bx) as f64 / w.area() as f64
}

/// Scores ALR masks (one per sample) against ground-truth regions.
pub fn planted_redundancy_alignment(
    alr_masks: &[PatchMask],
    regions: &[Option<SampleRegions>],
    stride: usize,
) -> Result<RedundancyAlignment> {
    if alr_masks.len() != regions.len() {
        return Err(Error::Analysis("one region record per mask expected".into()));
    }
    if alr_masks.is_empty() {
        return Err(Error::Analysis("no masks to score".into()));
    }
    if stride == 0 {
        return Err(Error::Analysis("stride must be positive".into()));
    }
    let (mut ali_mass, mut ali_count, mut nui_all, mut nui_patches) = (0.0, 0usize, 0.0, 0usize);
    let (mut alr_mass, mut alr_count, mut sig_all, mut sig_patches) = (0.0, 0usize, 0.0, 0usize);
    let mut nuisance_samples = 0;
    for (mask, region) in alr_masks.iter().zip(regions) {
        if mask.kind() != MaskKind::Alr {
            return Err(Error::Analysis("alignment expects ALR masks".into()));
        }
        let region = region
            .ok_or_else(|| Error::Analysis("sample has no ground-truth regions (not a synthetic dataset?)".into()))?;
        nuisance_samples += usize::from(region.nuisance.is_some());
        for a in 0..mask.height() {
            for b in 0..mask.width() {
                let relevant = mask.get(a, b);
                let s = coverage(&region.signal, a, b, stride);
                sig_all += s;
                sig_patches += 1;
                if relevant {
                    alr_mass += s;
                    alr_count += 1;
                }
                if let Some(n) = region.nuisance {
                    let c = coverage(&n, a, b, stride);
                    nui_all += c;
                    nui_patches += 1;
                    if !relevant {
                        ali_mass += c;
                        ali_count += 1;
                    }
                }
            }
        }
    }
    let ratio = |num: f64, den: usize| if den > 0 { num / den as f64 } else { 0.0 };
    Ok(RedundancyAlignment {
        ali_in_nuisance: ratio(ali_mass, ali_count),
        nuisance_base_rate: ratio(nui_all, nui_patches),
        alr_in_signal: ratio(alr_mass, alr_count),
        signal_base_rate: ratio(sig_all, sig_patches),
        samples: alr_masks.len(),
        nuisance_samples,
        ali_patches: ali_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region() -> SampleRegions {
        SampleRegions {
            signal: BoundingBox::square(0, 0, 8),
            nuisance: Some(BoundingBox::square(16, 16, 8)),
        }
    }

    #[test]
    fn exact_cover_and_base_rate() {
        // 4x4 grid, stride 8: nuisance box is patch (2, 2), signal box patch (0, 0)
        let mut bits = vec![true; 16];
        bits[2 * 4 + 2] = false;
        let m = PatchMask::new(4, 4, bits, MaskKind::Alr).unwrap();
        let r = planted_redundancy_alignment(&[m], &[Some(region())], 8).unwrap();
        assert_eq!(r.ali_in_nuisance, 1.0);
        assert_eq!(r.nuisance_base_rate, 1.0 / 16.0);
        assert_eq!(r.nuisance_lift(), 16.0);

        let ones = PatchMask::filled(4, 4, true, MaskKind::Alr);
        let r = planted_redundancy_alignment(&[ones], &[Some(region())], 8).unwrap();
        assert_eq!(r.alr_in_signal, r.signal_base_rate);
        assert_eq!(r.alr_in_signal, 1.0 / 16.0);
    }

    #[test]
    fn missing_regions_is_an_error() {
        let ones = PatchMask::filled(2, 2, true, MaskKind::Alr);
        assert!(planted_redundancy_alignment(&[ones], &[None], 8).is_err());
    }
}
