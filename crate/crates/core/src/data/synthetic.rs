//! Planted-redundancy synthetic images.
//!
//! Every image is gray background noise plus two non-overlapping square
//! patches:
//!
//! * a **signal** patch whose texture (two-colour oriented grating) is unique
//!   to the class, and
//! * for classes in the nuisance subset, a **nuisance** patch whose texture
//!   (a coloured checkerboard) is shared by many classes. It separates those
//!   classes from the ones without it, but says nothing about which of them
//!   the image belongs to.
//!
//! Patch textures are anchored to the patch origin, so two zero-noise samples
//! of one class differ only in where the patches land.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, Image, InMemoryDataset, Partition, SampleInfo, SampleRegions};
use crate::error::{Error, Result};
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NuisanceSharing {
    /// One nuisance texture, present in every class of the nuisance subset.
    SharedAcrossClasses,
    /// A small pool of nuisance textures; each class of the subset draws one.
    PerClassSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub class_count: usize,
    /// Training images per class.
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub signal_patch_size: usize,
    pub nuisance_patch_size: usize,
    pub nuisance_sharing: NuisanceSharing,
    /// Fraction of classes carrying a nuisance patch.
    pub nuisance_fraction: f64,
    /// Texture pool size under [`NuisanceSharing::PerClassSubset`].
    pub nuisance_textures: usize,
    /// Peak-to-peak contrast of the signal grating, in `[0, 1]`.
    pub signal_contrast: f64,
    pub noise_sigma: f64,
    /// Snap patch corners to multiples of this many pixels (1 = anywhere).
    pub placement_grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            class_count: 28,
            samples_per_class: 40,
            test_samples_per_class: 20,
            signal_patch_size: 12,
            nuisance_patch_size: 12,
            nuisance_sharing: NuisanceSharing::SharedAcrossClasses,
            nuisance_fraction: 0.5,
            nuisance_textures: 3,
            signal_contrast: 1.0,
            noise_sigma: 0.05,
            placement_grid: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::SyntheticSpec(m));
        if self.class_count == 0 {
            return err("class_count must be positive".into());
        }
        if self.samples_per_class == 0 {
            return err("samples_per_class must be at least 1".into());
        }
        if self.signal_patch_size == 0 || self.nuisance_patch_size == 0 {
            return err("patch sizes must be positive".into());
        }
        if self.signal_patch_size > self.image_size || self.nuisance_patch_size > self.image_size {
            return err(format!(
                "patches ({}, {}) do not fit a {}px image",
                self.signal_patch_size, self.nuisance_patch_size, self.image_size
            ));
        }
        if self.signal_patch_size + self.nuisance_patch_size > self.image_size {
            return err(format!(
                "signal ({}) and nuisance ({}) regions cannot be placed without overlapping in a {}px image",
                self.signal_patch_size, self.nuisance_patch_size, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.nuisance_fraction) {
            return err("nuisance_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.signal_contrast) {
            return err("signal_contrast must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be non-negative".into());
        }
        if self.placement_grid == 0 {
            return err("placement_grid must be at least 1".into());
        }
        if self.nuisance_sharing == NuisanceSharing::PerClassSubset && self.nuisance_textures == 0 {
            return err("nuisance_textures must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Grating {
    color: [f64; 3],
    direction: (f64, f64),
    frequency: f64,
}

#[derive(Debug, Clone)]
struct Checker {
    a: [f64; 3],
    b: [f64; 3],
    period: usize,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

impl Grating {
    fn sample(&self, x: usize, y: usize, contrast: f64) -> [f64; 3] {
        let t = 2.0 * PI * self.frequency * (x as f64 * self.direction.0 + y as f64 * self.direction.1);
        let g = 0.5 + 0.5 * t.sin();
        let mut out = [0.0; 3];
        for (o, c) in out.iter_mut().zip(self.color) {
            let v = g * c + (1.0 - g) * (1.0 - c);
            *o = 0.5 + contrast * (v - 0.5);
        }
        out
    }
}

impl Checker {
    fn sample(&self, x: usize, y: usize) -> [f64; 3] {
        if (x / self.period + y / self.period) % 2 == 0 {
            self.a
        } else {
            self.b
        }
    }
}

struct ClassPlan {
    signal: Grating,
    nuisance: Option<usize>,
}

fn plan_classes(spec: &SyntheticSpec) -> (Vec<ClassPlan>, Vec<Checker>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x7465_7874));
    let textures = match spec.nuisance_sharing {
        NuisanceSharing::SharedAcrossClasses => 1,
        NuisanceSharing::PerClassSubset => spec.nuisance_textures,
    };
    let checkers: Vec<Checker> = (0..textures)
        .map(|_| Checker {
            a: random_color(&mut rng),
            b: random_color(&mut rng),
            period: 2,
        })
        .collect();

    // Alternate presence so every contiguous block of classes (base or a
    // novel session) has the requested share of nuisance carriers.
    let carriers = (spec.class_count as f64 * spec.nuisance_fraction).round() as usize;
    let mut has_nuisance = vec![false; spec.class_count];
    let stride = spec.class_count as f64 / carriers.max(1) as f64;
    for i in 0..carriers {
        let c = ((i as f64) * stride).floor() as usize;
        has_nuisance[c.min(spec.class_count - 1)] = true;
    }

    let plans = (0..spec.class_count)
        .map(|c| {
            let angle = rng.random::<f64>() * PI;
            let signal = Grating {
                color: random_color(&mut rng),
                direction: (angle.cos(), angle.sin()),
                frequency: 0.12 + 0.2 * rng.random::<f64>(),
            };
            let nuisance = has_nuisance[c].then(|| rng.random_range(0..textures));
            ClassPlan { signal, nuisance }
        })
        .collect();
    (plans, checkers)
}

fn place(rng: &mut ChaCha8Rng, image: usize, side: usize, grid: usize) -> BoundingBox {
    let slots = (image - side) / grid + 1;
    let x = rng.random_range(0..slots) * grid;
    let y = rng.random_range(0..slots) * grid;
    BoundingBox::square(x, y, side)
}

/// Nuisance positions on the placement grid that stay clear of `signal`.
fn free_positions(spec: &SyntheticSpec, signal: &BoundingBox) -> Vec<BoundingBox> {
    let (side, grid) = (spec.nuisance_patch_size, spec.placement_grid);
    let slots = (spec.image_size - side) / grid + 1;
    let mut out = Vec::new();
    for y in 0..slots {
        for x in 0..slots {
            let b = BoundingBox::square(x * grid, y * grid, side);
            if !b.overlaps(signal) {
                out.push(b);
            }
        }
    }
    out
}

fn render_sample(
    spec: &SyntheticSpec,
    plan: &ClassPlan,
    checkers: &[Checker],
    rng: &mut ChaCha8Rng,
) -> Result<(Image, SampleRegions)> {
    let s = spec.image_size;
    let mut signal = place(rng, s, spec.signal_patch_size, spec.placement_grid);
    let nuisance = match plan.nuisance {
        None => None,
        Some(_) => {
            // Redraw the signal until the nuisance patch has room beside it.
            let mut free = free_positions(spec, &signal);
            for _ in 0..1000 {
                if !free.is_empty() {
                    break;
                }
                signal = place(rng, s, spec.signal_patch_size, spec.placement_grid);
                free = free_positions(spec, &signal);
            }
            if free.is_empty() {
                return Err(Error::SyntheticSpec(
                    "could not place a nuisance patch next to the signal".into(),
                ));
            }
            Some(free[rng.random_range(0..free.len())])
        }
    };

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = vec![0.0; s * s * 3];
    for y in 0..s {
        for x in 0..s {
            let rgb = if signal.contains(x, y) {
                plan.signal.sample(x - signal.x0, y - signal.y0, spec.signal_contrast)
            } else if let (Some(b), Some(t)) = (nuisance, plan.nuisance) {
                if b.contains(x, y) {
                    checkers[t].sample(x - b.x0, y - b.y0)
                } else {
                    [0.5; 3]
                }
            } else {
                [0.5; 3]
            };
            for (ch, v) in rgb.iter().enumerate() {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                values[(y * s + x) * 3 + ch] = v + n;
            }
        }
    }
    Ok((Image::from_unit_floats(s, s, &values)?, SampleRegions { signal, nuisance }))
}

/// Renders the dataset described by `spec`. Output is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<InMemoryDataset> {
    spec.validate()?;
    let (plans, checkers) = plan_classes(spec);
    let per_class = spec.samples_per_class + spec.test_samples_per_class;
    let mut samples = Vec::with_capacity(spec.class_count * per_class);
    let mut images = Vec::with_capacity(samples.capacity());
    let mut regions = Vec::with_capacity(samples.capacity());
    for (class, plan) in plans.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, ((class as u64) << 32) | i as u64));
            let (img, reg) = render_sample(spec, plan, &checkers, &mut rng)?;
            samples.push(SampleInfo {
                label: class,
                partition: if i < spec.samples_per_class {
                    Partition::Train
                } else {
                    Partition::Test
                },
            });
            images.push(img);
            regions.push(reg);
        }
    }
    InMemoryDataset::new(
        &format!("synthetic-{}", spec.seed),
        spec.class_count,
        samples,
        images,
        Some(regions),
    )
}

/// Whether `class` carries a nuisance patch under `spec`.
#[cfg(test)]
fn nuisance_classes(spec: &SyntheticSpec) -> Vec<bool> {
    plan_classes(spec).0.iter().map(|p| p.nuisance.is_some()).collect()
}
